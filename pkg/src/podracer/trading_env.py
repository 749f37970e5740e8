"""Stock-trading MDP and a batched stepping facade.

Execution rules for one step, with ``p`` the close at time t:

1. sells run first, clipped to current holdings;
2. buys run in ticker order, each scaled down to what the remaining cash
   covers including its cost;
3. the cost ``cost_rate * (sell notional + buy notional)`` is taken from cash,
   so the reward (change in account value) already nets out friction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EnvError
from .market_data import MarketDataset


@dataclass(frozen=True)
class EnvConfig:
    initial_capital: float = 1_000_000.0
    cost_rate: float = 0.002
    h_max: int = 100
    gamma: float = 0.99
    episode_horizon: int | None = None

    def __post_init__(self):
        if not self.initial_capital > 0:
            raise ConfigError("initial_capital must be positive")
        if not 0.0 <= self.cost_rate < 1.0:
            raise ConfigError("cost_rate must lie in [0, 1)")
        if int(self.h_max) != self.h_max or self.h_max < 1:
            raise ConfigError("h_max must be an integer >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.episode_horizon is not None and self.episode_horizon < 1:
            raise ConfigError("episode_horizon must be >= 1")


@dataclass(frozen=True, eq=False)
class EnvState:
    t: int
    balance: float
    shares: np.ndarray
    done: bool
    dataset: MarketDataset = field(repr=False)
    start_index: int = 0
    end_index: int = 0
    # Bookkeeping for the transition that produced this state.
    cost: float = 0.0
    traded: np.ndarray | None = None

    @property
    def prices(self) -> np.ndarray:
        return self.dataset.close[self.t]

    @property
    def start_prices(self) -> np.ndarray:
        return self.dataset.close[self.start_index]

    @property
    def feature_snapshot(self) -> np.ndarray:
        return self.dataset.features[self.t]

    def same_as(self, other: "EnvState") -> bool:
        return (
            self.t == other.t
            and self.balance == other.balance
            and np.array_equal(self.shares, other.shares)
            and self.done == other.done
            and self.cost == other.cost
        )


class Transition(NamedTuple):
    state: EnvState
    reward: float
    done: bool


def observation_size(n_tickers: int, n_features: int) -> int:
    return 1 + 2 * n_tickers + n_tickers * n_features


def reset(config: EnvConfig, dataset: MarketDataset, start_index: int = 0, seed: int | None = None) -> EnvState:
    """Start an episode at ``start_index``.

    The dynamics are deterministic, so ``seed`` only exists to keep the
    signature uniform with stochastic environments.
    """
    T = dataset.n_steps
    if not 0 <= start_index or not start_index + 1 < T:
        raise EnvError(f"start_index {start_index} leaves no step in a dataset of length {T}")
    horizon = config.episode_horizon if config.episode_horizon is not None else T - 1
    end = min(start_index + horizon, T - 1)
    return EnvState(
        t=start_index,
        balance=float(config.initial_capital),
        shares=np.zeros(dataset.n_tickers, dtype=np.int64),
        done=False,
        dataset=dataset,
        start_index=start_index,
        end_index=end,
    )


def account_value(state: EnvState) -> float:
    return float(state.balance + state.prices @ state.shares)


def _scale_feature(name: str, values: np.ndarray, prices: np.ndarray) -> np.ndarray:
    if name == "macd":
        return 10.0 * values / prices
    if name == "rsi":
        return (values - 50.0) / 50.0
    if name == "cci":
        return values / 200.0
    return values


def observation(state: EnvState, config: EnvConfig) -> np.ndarray:
    """``[b/C, h*p/C, p/p_start, scaled features]`` with ``C`` the initial capital."""
    cap = config.initial_capital
    p = state.prices
    parts = [np.array([state.balance / cap]), state.shares * p / cap, p / state.start_prices]
    feats = state.feature_snapshot
    if feats.shape[1]:
        scaled = np.stack(
            [_scale_feature(name, feats[:, c], p) for c, name in enumerate(state.dataset.feature_names)],
            axis=1,
        )
        parts.append(scaled.ravel())
    return np.concatenate(parts)


def step(state: EnvState, action, config: EnvConfig) -> Transition:
    if state.done:
        raise EnvError("step called on a finished episode")
    a = np.asarray(action)
    n = state.shares.shape[0]
    if a.shape != (n,):
        raise EnvError(f"action has shape {a.shape}, expected ({n},)")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.round(a)):
            raise EnvError("actions must be whole share counts")
        a = a.astype(np.int64)
    if np.any(np.abs(a) > config.h_max):
        raise EnvError(f"|action| exceeds h_max={config.h_max}")

    p = state.prices
    rate = config.cost_rate
    shares = state.shares.copy()
    sell = np.minimum(np.maximum(-a, 0), shares)
    sell_notional = float(p @ sell)
    shares -= sell
    cash = state.balance + sell_notional - rate * sell_notional

    buy = np.zeros(n, dtype=np.int64)
    buy_notional = 0.0
    for i in np.flatnonzero(a > 0):
        price = float(p[i])
        k = min(int(a[i]), int(cash // (price * (1.0 + rate))))
        while k > 0 and cash - k * price - rate * (k * price) < 0.0:
            k -= 1
        if k > 0:
            notional = k * price
            cash = cash - notional - rate * notional
            buy[i] = k
            buy_notional += notional
    shares += buy

    t1 = state.t + 1
    nxt = dataclasses.replace(
        state,
        t=t1,
        balance=cash,
        shares=shares,
        done=t1 >= state.end_index,
        cost=rate * (sell_notional + buy_notional),
        traded=buy - sell,
    )
    reward = account_value(nxt) - account_value(state)
    return Transition(nxt, reward, nxt.done)


class VecEnv:
    """B independent sub-environments over one shared, immutable dataset.

    Finished sub-environments reset to their own start index; the terminal
    transition is still returned by :func:`batched_step`.
    """

    def __init__(self, dataset: MarketDataset, config: EnvConfig, start_indices: Sequence[int]):
        if len(start_indices) < 1:
            raise EnvError("a VecEnv needs at least one sub-environment")
        self.dataset = dataset
        self.config = config
        self.start_indices = [int(s) for s in start_indices]
        self.states = [reset(config, dataset, s) for s in self.start_indices]

    @classmethod
    def spread(cls, dataset: MarketDataset, config: EnvConfig, num_envs: int) -> "VecEnv":
        """Start indices spaced evenly over the first half of the data."""
        last = max(0, (dataset.n_steps - 2) // 2)
        starts = [(i * last) // max(1, num_envs) for i in range(num_envs)]
        return cls(dataset, config, starts)

    def __len__(self) -> int:
        return len(self.states)

    def observations(self) -> np.ndarray:
        return np.stack([observation(s, self.config) for s in self.states])


def batched_step(envs: VecEnv, actions) -> list[Transition]:
    actions = np.asarray(actions)
    if actions.ndim != 2 or actions.shape[0] != len(envs):
        raise EnvError(f"expected {len(envs)} action vectors, got shape {actions.shape}")
    out = []
    for i, (state, act) in enumerate(zip(envs.states, actions)):
        tr = step(state, act, envs.config)
        out.append(tr)
        envs.states[i] = reset(envs.config, envs.dataset, envs.start_indices[i]) if tr.done else tr.state
    return out
