"""Deterministic policy replay and portfolio metrics.

All metrics are pure functions of an :class:`EquityCurve`. Conventions:
per-period simple returns, sample (ddof=1) standard deviation, risk-free
rate quoted per year and converted by ``rf / periods_per_year``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateVolatility, LayoutError
from .market_data import MarketDataset
from .policy import PolicyParameters, deterministic_action, map_action
from .trading_env import EnvConfig, account_value, observation, observation_size, reset, step


@dataclass(frozen=True, eq=False)
class EquityCurve:
    timestamps: np.ndarray
    values: np.ndarray
    periods_per_year: int = 252
    costs: np.ndarray | None = None
    traded_notional: float = 0.0
    trades: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1 or ts.shape != v.shape:
            raise ValueError("timestamps and values must be equal-length, non-empty 1-D arrays")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("account values must be finite and non-negative")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", v)
        costs = np.zeros(max(v.size - 1, 0)) if self.costs is None else np.asarray(self.costs, dtype=np.float64)
        object.__setattr__(self, "costs", costs)

    @property
    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0

    @classmethod
    def from_values(cls, values, periods_per_year: int = 252, start: int = 0, interval: int = 86400):
        values = np.asarray(values, dtype=np.float64)
        return cls(start + interval * np.arange(values.size), values, periods_per_year)


@dataclass
class MetricsReport:
    cumulative_return: float
    annual_return: float | None
    annual_volatility: float | None
    sharpe_ratio: float | None
    max_drawdown: float
    trade_count: int
    total_transaction_costs: float

    def to_json(self) -> dict:
        return asdict(self)


def run_backtest(params: PolicyParameters, dataset: MarketDataset, env_config: EnvConfig) -> EquityCurve:
    """One mean-action pass over ``dataset`` from its first bar."""
    expected = observation_size(dataset.n_tickers, dataset.n_features)
    if params.layout.obs_dim != expected or params.layout.act_dim != dataset.n_tickers:
        raise LayoutError(
            f"snapshot expects obs_dim={params.layout.obs_dim}, act_dim={params.layout.act_dim}; "
            f"dataset gives obs_dim={expected}, act_dim={dataset.n_tickers} "
            f"({dataset.n_tickers} tickers x {dataset.n_features} features)")
    cfg = EnvConfig(env_config.initial_capital, env_config.cost_rate, env_config.h_max,
                    env_config.gamma, None)
    state = reset(cfg, dataset, 0)
    values = [account_value(state)]
    costs = []
    notional = 0.0
    trades = 0
    while not state.done:
        a = map_action(deterministic_action(params, observation(state, cfg)), cfg.h_max)
        prev_prices = state.prices
        state, _, _ = step(state, a, cfg)
        values.append(account_value(state))
        costs.append(state.cost)
        notional += float(prev_prices @ np.abs(state.traded))
        trades += int(np.count_nonzero(state.traded))
    return EquityCurve(dataset.timestamps[: len(values)], np.array(values), dataset.periods_per_year,
                       np.array(costs), notional, trades)


def cumulative_return(curve: EquityCurve) -> float:
    v = curve.values
    return float((v[-1] - v[0]) / v[0])


def annual_return_volatility(curve: EquityCurve) -> tuple[float, float]:
    v = curve.values
    if v.size < 2:
        raise ValueError("annualization needs at least 2 curve points")
    periods = v.size - 1
    annual = (v[-1] / v[0]) ** (curve.periods_per_year / periods) - 1.0
    r = curve.returns
    vol = float(np.std(r, ddof=1) * math.sqrt(curve.periods_per_year)) if r.size > 1 else 0.0
    return float(annual), vol


def sharpe(curve: EquityCurve, risk_free_rate: float = 0.0) -> float:
    """Annualized Sharpe ratio; raises :class:`DegenerateVolatility` on flat returns."""
    r = curve.returns
    if r.size < 2:
        raise ValueError("Sharpe ratio needs at least 2 returns")
    sd = float(np.std(r, ddof=1))
    mean = float(np.mean(r))
    if sd <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateVolatility("return series has zero volatility")
    rf = risk_free_rate / curve.periods_per_year
    return (mean - rf) / sd * math.sqrt(curve.periods_per_year)


def max_drawdown(curve: EquityCurve) -> float:
    """Worst ``v_t / running_peak - 1``; 0 for curves that never fall."""
    worst, peak = 0.0, -math.inf
    for v in curve.values.tolist():
        if v > peak:
            peak = v
        elif peak > 0:
            dd = v / peak - 1.0
            if dd < worst:
                worst = dd
    return worst


def compute_metrics(curve: EquityCurve, risk_free_rate: float = 0.0) -> MetricsReport:
    annual = vol = sr = None
    if curve.values.size >= 2:
        annual, vol = annual_return_volatility(curve)
        try:
            sr = sharpe(curve, risk_free_rate)
        except (DegenerateVolatility, ValueError):
            sr = None
    return MetricsReport(
        cumulative_return=cumulative_return(curve),
        annual_return=annual,
        annual_volatility=vol,
        sharpe_ratio=sr,
        max_drawdown=max_drawdown(curve),
        trade_count=curve.trades,
        total_transaction_costs=float(np.sum(curve.costs)),
    )


def buy_and_hold_curve(dataset: MarketDataset, initial_capital: float = 1_000_000.0) -> EquityCurve:
    """Equal-weight, fractional, frictionless buy-and-hold benchmark."""
    weights = np.full(dataset.n_tickers, initial_capital / dataset.n_tickers)
    units = weights / dataset.close[0]
    return EquityCurve(dataset.timestamps, dataset.close @ units, dataset.periods_per_year)


def read_curve_csv(path, periods_per_year: int = 252) -> EquityCurve:
    """Read ``timestamp,value[,period_return]`` as written by :func:`emit_report`."""
    ts, vals = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "value"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns timestamp,value")
        for row in reader:
            ts.append(int(row["timestamp"]))
            vals.append(float(row["value"]))
    return EquityCurve(np.array(ts), np.array(vals), periods_per_year)


def write_curve_csv(curve: EquityCurve, path) -> Path:
    path = Path(path)
    r = np.concatenate([[0.0], curve.returns])
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "value", "period_return"])
        for t, v, ret in zip(curve.timestamps.tolist(), curve.values.tolist(), r.tolist()):
            w.writerow([t, repr(v), repr(ret)])
    return path


def emit_report(curve: EquityCurve, metrics: MetricsReport, out_dir, benchmark: EquityCurve | None = None,
                plot: bool = True, label: str = "strategy") -> dict[str, Path]:
    """Write ``equity.csv``, ``metrics.json`` and, optionally, a comparison row and figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"equity": write_curve_csv(curve, out / "equity.csv")}
    summary = metrics.to_json()
    (out / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    files["metrics"] = out / "metrics.json"
    bench_metrics = None
    if benchmark is not None:
        bench_metrics = compute_metrics(benchmark)
        path = out / "comparison.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            cols = list(summary)
            w.writerow(["name"] + cols)
            w.writerow([label] + [summary[c] for c in cols])
            bj = bench_metrics.to_json()
            w.writerow(["benchmark"] + [bj[c] for c in cols])
        files["comparison"] = path
    if plot:
        from .plotting import plot_equity
        files["figure"] = plot_equity(curve, out / "equity.png", benchmark=benchmark, label=label)
    return files
