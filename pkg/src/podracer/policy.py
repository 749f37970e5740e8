"""Actor-critic network, GAE and the PPO clipped-surrogate learner.

The network is a tanh MLP trunk shared by a Gaussian actor head (with a
state-independent log-std vector) and a scalar critic head. Everything works
on a flat float64 parameter vector so snapshots can be averaged, copied
between threads and written to disk without a framework. Gradients are
derived by hand; ``loss_and_grad`` is the single source of truth and is
checked against finite differences in the tests.

Flat vector layout, in order: ``W1, b1, ..., Wk, bk`` for the trunk, then
actor ``Wa, ba``, ``log_std``, then critic ``Wv, bv``. Weights are stored
row-major with shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import math
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError, LayoutError
from .trading_env import EnvConfig, EnvState, observation, step

LOG_2PI = math.log(2.0 * math.pi)
SNAPSHOT_MAGIC = b"PODPARAM"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class Layout:
    obs_dim: int
    hidden: tuple[int, ...]
    act_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.obs_dim < 1 or self.act_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise LayoutError(f"every layer needs at least one unit: {self}")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.obs_dim
        for i, h in enumerate(self.hidden):
            shapes += [(f"W{i}", (fan_in, h)), (f"b{i}", (h,))]
            fan_in = h
        shapes += [
            ("Wa", (fan_in, self.act_dim)), ("ba", (self.act_dim,)),
            ("log_std", (self.act_dim,)),
            ("Wv", (fan_in, 1)), ("bv", (1,)),
        ]
        return shapes

    @property
    def size(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``vec`` keyed by block name (writes go through)."""
        out, pos = {}, 0
        for name, shape in self.shapes():
            k = math.prod(shape)
            out[name] = vec[pos: pos + k].reshape(shape)
            pos += k
        return out


@dataclass(frozen=True, eq=False)
class PolicyParameters:
    """Immutable value-type snapshot of a policy."""

    layout: Layout
    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.shape != (self.layout.size,):
            raise LayoutError(f"vector has {v.size} entries, layout needs {self.layout.size}")
        if not np.all(np.isfinite(v)):
            raise DivergenceError("policy parameters contain non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def blocks(self) -> dict[str, np.ndarray]:
        return self.layout.unpack(self.vector)

    def identical_to(self, other: "PolicyParameters") -> bool:
        return self.layout == other.layout and np.array_equal(self.vector, other.vector)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 2.0**-14
    gamma: float = 0.99
    batch_size: int = 2**10
    repeat_times: int = 2**3
    rollout_capacity: int = 2**12
    ratio_clip: float = 0.25
    entropy_coef: float = 0.02
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    total_steps: int = 2**20
    # Learner-side reward multiplier; rewards are first expressed as a
    # fraction of initial capital.
    reward_scale: float = 100.0

    def __post_init__(self):
        for name in ("learning_rate", "gamma", "batch_size", "repeat_times", "rollout_capacity",
                     "entropy_coef", "value_coef", "total_steps", "reward_scale"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if not 0.0 < self.ratio_clip < 1.0:
            raise ConfigError(f"ratio_clip must lie in (0, 1), got {self.ratio_clip}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.gamma > 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.batch_size > self.rollout_capacity:
            raise ConfigError("batch_size cannot exceed rollout_capacity")


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_params(layout: Layout, seed: int) -> PolicyParameters:
    """Orthogonal init; actor head scaled by 0.01, log-std at log(0.5)."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(layout.size)
    blocks = layout.unpack(vec)
    fan_in = layout.obs_dim
    for i, h in enumerate(layout.hidden):
        blocks[f"W{i}"][:] = _orthogonal(rng, fan_in, h, 1.0)
        fan_in = h
    blocks["Wa"][:] = _orthogonal(rng, fan_in, layout.act_dim, 0.01)
    blocks["Wv"][:] = _orthogonal(rng, fan_in, 1, 1.0)
    blocks["log_std"][:] = math.log(0.5)
    return PolicyParameters(layout, vec)


def _forward(blocks: dict, layout: Layout, obs: np.ndarray):
    acts = [obs]
    x = obs
    for i in range(len(layout.hidden)):
        x = np.tanh(x @ blocks[f"W{i}"] + blocks[f"b{i}"])
        acts.append(x)
    mean = x @ blocks["Wa"] + blocks["ba"]
    value = (x @ blocks["Wv"])[:, 0] + blocks["bv"][0]
    return mean, value, acts


def forward(params: PolicyParameters, obs) -> tuple[np.ndarray, np.ndarray]:
    """Batched (mean, value) for observations of shape (m, obs_dim)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if obs.shape[1] != params.layout.obs_dim:
        raise LayoutError(f"observation has {obs.shape[1]} entries, policy expects {params.layout.obs_dim}")
    mean, value, _ = _forward(params.blocks(), params.layout, obs)
    return mean, value


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    z = (x - mean) / np.exp(log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def act(params: PolicyParameters, obs, rng: np.random.Generator):
    """Sample pre-squash actions.

    Accepts one observation or a batch; returns ``(raw_action, log_prob,
    value)`` with matching leading dimension. ``np.tanh(raw_action)`` is what
    the environment mapping consumes.
    """
    single = np.ndim(obs) == 1
    mean, value = forward(params, obs)
    log_std = params.blocks()["log_std"]
    z = rng.standard_normal(mean.shape)
    raw = mean + np.exp(log_std) * z
    log_prob = np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)
    if single:
        return raw[0], float(log_prob[0]), float(value[0])
    return raw, log_prob, value


def deterministic_action(params: PolicyParameters, obs) -> np.ndarray:
    mean, _ = forward(params, obs)
    return np.tanh(mean[0] if np.ndim(obs) == 1 else mean)


def map_action(squashed, h_max: int) -> np.ndarray:
    """Shares per ticker: ``round(x * h_max)`` with ties away from zero."""
    x = np.clip(np.asarray(squashed, dtype=np.float64), -1.0, 1.0) * h_max
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


# --- advantages -------------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Backward GAE recursion along axis 0.

    ``dones[t]`` marks that the episode ended with step t, cutting both the
    bootstrap and the advantage trace. Extra trailing axes are independent
    environments. Returns raw ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape) or rewards.shape[0] < 1:
        raise ValueError(
            f"rewards/values/dones must share a non-empty shape, got {rewards.shape}, {values.shape}, {dones.shape}")
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64), rewards.shape[1:])
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean()
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 0 else centered


class RolloutBuffer:
    """Preallocated on-policy storage, time-major over ``num_envs`` columns.

    Row ``s * num_envs + e`` holds step ``s`` of environment ``e``.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, num_envs: int = 1):
        if capacity % num_envs:
            raise ConfigError(f"capacity {capacity} is not a multiple of num_envs {num_envs}")
        self.capacity = capacity
        self.num_envs = num_envs
        self.obs = np.zeros((capacity, obs_dim))
        self.raw_actions = np.zeros((capacity, act_dim))
        self.log_probs = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.advantages = np.zeros(capacity)
        self.returns = np.zeros(capacity)
        self.cursor = 0
        self.finished = False

    @property
    def full(self) -> bool:
        return self.cursor == self.capacity

    def add(self, obs, raw_actions, log_probs, values, rewards, dones):
        b = self.num_envs
        if self.cursor + b > self.capacity:
            raise OverflowError("rollout buffer is full")
        sl = slice(self.cursor, self.cursor + b)
        self.obs[sl] = obs
        self.raw_actions[sl] = raw_actions
        self.log_probs[sl] = log_probs
        self.values[sl] = values
        self.rewards[sl] = rewards
        self.dones[sl] = dones
        self.cursor += b

    def finish(self, bootstrap_values, gamma: float, lam: float) -> None:
        if not self.full:
            raise ValueError("buffer must be full before computing advantages")
        shape = (self.capacity // self.num_envs, self.num_envs)
        adv, ret = compute_gae(self.rewards.reshape(shape), self.values.reshape(shape),
                               self.dones.reshape(shape), bootstrap_values, gamma, lam)
        self.advantages[:] = normalize_advantages(adv.ravel())
        self.returns[:] = ret.ravel()
        self.finished = True

    def clear(self) -> None:
        self.cursor = 0
        self.finished = False


# --- PPO loss -----------------------------------------------------------------

def loss_and_grad(vector: np.ndarray, layout: Layout, obs, raw_actions, old_log_probs,
                  advantages, returns, hp: HyperParams):
    """Mean PPO loss (to minimize) over a mini-batch and its exact gradient.

    Per sample the maximized objective is
    ``min(r*A, clip(r, 1-eps, 1+eps)*A) + c_ent*H - c_v*(V - R)**2``;
    the loss is its negated batch mean.
    """
    blocks = layout.unpack(vector)
    m = obs.shape[0]
    mean, value, acts = _forward(blocks, layout, obs)
    log_std = blocks["log_std"]
    inv_var = np.exp(-2.0 * log_std)
    diff = raw_actions - mean
    log_prob = np.sum(-0.5 * diff**2 * inv_var - log_std - 0.5 * LOG_2PI, axis=1)
    ratio = np.exp(log_prob - old_log_probs)
    eps = hp.ratio_clip
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    entropy = float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))
    value_err = value - returns

    policy_loss = -surrogate.mean()
    value_loss = float(np.mean(value_err**2))
    loss = policy_loss - hp.entropy_coef * entropy + hp.value_coef * value_loss

    grad = np.zeros_like(vector)
    g = layout.unpack(grad)
    # d(surrogate)/d(ratio) is A where the unclipped branch is the minimum.
    active = unclipped <= clipped
    d_logp = -(active * advantages * ratio) / m
    d_mean = d_logp[:, None] * diff * inv_var
    g["log_std"][:] = np.sum(d_logp[:, None] * (diff**2 * inv_var - 1.0), axis=0) - hp.entropy_coef
    d_value = 2.0 * hp.value_coef * value_err / m

    top = acts[-1]
    g["Wa"][:] = top.T @ d_mean
    g["ba"][:] = d_mean.sum(axis=0)
    g["Wv"][:] = top.T @ d_value[:, None]
    g["bv"][:] = d_value.sum()
    d_act = d_mean @ blocks["Wa"].T + d_value[:, None] @ blocks["Wv"].T
    for i in range(len(layout.hidden) - 1, -1, -1):
        d_pre = d_act * (1.0 - acts[i + 1] ** 2)
        g[f"W{i}"][:] = acts[i].T @ d_pre
        g[f"b{i}"][:] = d_pre.sum(axis=0)
        if i:
            d_act = d_pre @ blocks[f"W{i}"].T

    diagnostics = {
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return float(loss), grad, diagnostics


@dataclass
class AdamState:
    """Pod-local optimizer moments. Never fused or sent between pods."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))

    def apply(self, vector: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place descent step on ``vector``."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        vector -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ppo_update(params: PolicyParameters, buffer: RolloutBuffer, hp: HyperParams,
               rng: np.random.Generator, optimizer: AdamState | None = None):
    """``repeat_times`` shuffled passes of Adam steps over a full buffer.

    Returns ``(new_params, diagnostics)``; the buffer is cleared.
    """
    if not buffer.full:
        raise ValueError(f"buffer holds {buffer.cursor}/{buffer.capacity} transitions; PPO needs it full")
    if not buffer.finished:
        raise ValueError("advantages have not been computed for this buffer")
    layout = params.layout
    if optimizer is None:
        optimizer = AdamState.zeros(layout.size)
    vec = params.vector.copy()
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    n_batches = 0
    n = buffer.capacity
    for _ in range(hp.repeat_times):
        order = rng.permutation(n)
        for start in range(0, n - hp.batch_size + 1, hp.batch_size):
            idx = order[start: start + hp.batch_size]
            loss, grad, diag = loss_and_grad(
                vec, layout, buffer.obs[idx], buffer.raw_actions[idx], buffer.log_probs[idx],
                buffer.advantages[idx], buffer.returns[idx], hp)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(f"non-finite PPO loss ({loss}) after {n_batches} mini-batches")
            optimizer.apply(vec, grad, hp.learning_rate)
            for k in sums:
                sums[k] += diag[k]
            n_batches += 1
    buffer.clear()
    if not np.all(np.isfinite(vec)):
        raise DivergenceError("PPO update produced non-finite parameters")
    return PolicyParameters(layout, vec), {k: v / max(n_batches, 1) for k, v in sums.items()}


# --- evaluation and fusion ----------------------------------------------------

EnvFactory = Callable[[int], "tuple[EnvState, EnvConfig]"]


def discounted_return(rewards, gamma: float) -> float:
    total, disc = 0.0, 1.0
    for r in rewards:
        total += disc * r
        disc *= gamma
    return total


def rollout_deterministic(params: PolicyParameters, state: EnvState, config: EnvConfig):
    """Replay one episode with the mean action; returns (rewards, states)."""
    rewards, states = [], [state]
    while not state.done:
        a = map_action(deterministic_action(params, observation(state, config)), config.h_max)
        state, r, _ = step(state, a, config)
        rewards.append(r)
        states.append(state)
    return rewards, states


def fitness(params: PolicyParameters, env_factory: EnvFactory, episodes: int = 1,
            gamma: float = 0.99) -> float:
    """Mean discounted episode return of the deterministic policy.

    ``env_factory(i)`` returns ``(initial_state, config)`` for episode i.
    """
    if episodes < 1:
        raise ConfigError("fitness needs at least one episode")
    scores = []
    for ep in range(episodes):
        state, config = env_factory(ep)
        rewards, _ = rollout_deterministic(params, state, config)
        scores.append(discounted_return(rewards, gamma))
    return float(np.mean(scores))


def soft_update(target: PolicyParameters, source: PolicyParameters, tau: float) -> PolicyParameters:
    """``tau * source + (1 - tau) * target``; exact at tau in {0, 1}."""
    if target.layout != source.layout:
        raise LayoutError(f"cannot blend {source.layout} into {target.layout}")
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    return PolicyParameters(target.layout, tau * source.vector + (1.0 - tau) * target.vector)


# --- snapshot files -----------------------------------------------------------

def encode_params(params: PolicyParameters) -> bytes:
    lay = params.layout
    header = SNAPSHOT_MAGIC + struct.pack("<HIII", SNAPSHOT_VERSION, lay.obs_dim, lay.act_dim, len(lay.hidden))
    header += struct.pack(f"<{len(lay.hidden)}I", *lay.hidden)
    header += struct.pack("<Q", lay.size)
    return header + params.vector.astype("<f8").tobytes()


def decode_params(blob: bytes) -> PolicyParameters:
    if blob[:8] != SNAPSHOT_MAGIC:
        raise LayoutError("not a parameter snapshot (bad magic)")
    try:
        version, obs_dim, act_dim, depth = struct.unpack_from("<HIII", blob, 8)
        if version != SNAPSHOT_VERSION:
            raise LayoutError(f"unsupported snapshot version {version}")
        pos = 8 + struct.calcsize("<HIII")
        hidden = struct.unpack_from(f"<{depth}I", blob, pos)
        pos += 4 * depth
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    except struct.error as exc:
        raise LayoutError(f"truncated snapshot header: {exc}") from None
    layout = Layout(obs_dim, hidden, act_dim)
    if count != layout.size or len(blob) - pos != 8 * count:
        raise LayoutError("snapshot payload does not match its layout header")
    return PolicyParameters(layout, np.frombuffer(blob, dtype="<f8", offset=pos, count=count).astype(np.float64))


def save_params(params: PolicyParameters, path) -> Path:
    """Write-then-rename so readers never observe a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_bytes(encode_params(params))
    tmp.replace(path)
    return path


def load_params(path) -> PolicyParameters:
    path = Path(path)
    if not path.is_file():
        raise LayoutError(f"no such snapshot: {path}")
    return decode_params(path.read_bytes())
