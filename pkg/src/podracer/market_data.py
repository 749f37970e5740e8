"""OHLCV loading, technical indicators, splits and synthetic markets.

Indicator conventions (all outputs have the same length as the input):

* MACD line: EMA(close, fast) - EMA(close, slow), both EMAs seeded with the
  first close and smoothed with ``alpha = 2 / (span + 1)``.
* RSI: Wilder smoothing of gains/losses. For ``t <= period`` the averages are
  expanding means of the deltas seen so far, afterwards
  ``avg_t = (avg_{t-1} * (period - 1) + x_t) / period``. A flat window is 50.
* CCI: typical price ``(high + low + close) / 3`` against its moving average
  over ``0.015 * mean absolute deviation``; windows shorter than ``period``
  (the first ``period - 1`` bars) use every bar seen so far. Zero deviation
  gives 0.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

CSV_COLUMNS = ("timestamp", "ticker", "open", "high", "low", "close", "volume")
ARTIFACT_MAGIC = "podracer-dataset"
ARTIFACT_VERSION = 1

TRADING_DAYS = 252
MINUTES_PER_SESSION = 390


@dataclass(frozen=True)
class OhlcvBar:
    timestamp: int
    ticker: str
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self):
        prices = (self.open, self.high, self.low, self.close)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            raise DataError(f"non-positive or non-finite price in {self}")
        if not (self.low <= self.open <= self.high and self.low <= self.close <= self.high):
            raise DataError(f"bar violates low <= open/close <= high: {self}")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            raise DataError(f"negative or non-finite volume in {self}")


@dataclass(frozen=True)
class IndicatorConfig:
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    rsi_period: int = 14
    cci_period: int = 20
    use_macd: bool = True
    use_rsi: bool = True
    use_cci: bool = True

    def __post_init__(self):
        periods = (self.macd_fast, self.macd_slow, self.macd_signal, self.rsi_period, self.cci_period)
        if any(int(p) != p or p < 1 for p in periods):
            raise ConfigError(f"indicator periods must be integers >= 1, got {periods}")
        if self.macd_fast >= self.macd_slow:
            raise ConfigError("macd_fast must be smaller than macd_slow")

    @property
    def channels(self) -> tuple[str, ...]:
        names = []
        if self.use_macd:
            names.append("macd")
        if self.use_rsi:
            names.append("rsi")
        if self.use_cci:
            names.append("cci")
        return tuple(names)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarketDataset:
    """Aligned multi-ticker bars. Arrays are read-only; shapes are (T, n)."""

    tickers: tuple[str, ...]
    timestamps: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    features: np.ndarray = field(default=None)
    feature_names: tuple[str, ...] = ()
    periods_per_year: int = TRADING_DAYS

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.int64)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        for name in ("open", "high", "low", "close", "volume"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        T, n = len(ts), len(self.tickers)
        if T < 2:
            raise DataError(f"dataset needs at least 2 timestamps, got {T}")
        if np.any(np.diff(ts) <= 0):
            raise DataError("timestamps must be strictly increasing")
        for name in ("open", "high", "low", "close", "volume"):
            if getattr(self, name).shape != (T, n):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {(T, n)}")
        if not (np.all(np.isfinite(self.close)) and np.all(self.close > 0)):
            raise DataError("close prices must be finite and positive")
        feats = np.zeros((T, n, 0)) if self.features is None else self.features
        feats = _frozen(feats)
        if feats.ndim != 3 or feats.shape[:2] != (T, n):
            raise DataError(f"features have shape {feats.shape}, expected ({T}, {n}, f)")
        if feats.shape[2] != len(self.feature_names):
            raise DataError("feature_names does not match the feature channel count")
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if int(self.periods_per_year) < 1:
            raise DataError("periods_per_year must be a positive integer")
        object.__setattr__(self, "periods_per_year", int(self.periods_per_year))

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    def slice(self, start: int, stop: int) -> "MarketDataset":
        return dataclasses.replace(
            self,
            timestamps=self.timestamps[start:stop],
            open=self.open[start:stop],
            high=self.high[start:stop],
            low=self.low[start:stop],
            close=self.close[start:stop],
            volume=self.volume[start:stop],
            features=self.features[start:stop],
        )

    def identical_to(self, other: "MarketDataset") -> bool:
        """Bit-level equality of every field."""
        if (self.tickers, self.feature_names, self.periods_per_year) != (
            other.tickers, other.feature_names, other.periods_per_year):
            return False
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("timestamps", "open", "high", "low", "close", "volume", "features")
        )


def infer_periods_per_year(timestamps: np.ndarray) -> int:
    """252 for daily-or-coarser bars, 252*390 for minute bars, pro rata in between."""
    spacing = float(np.median(np.diff(timestamps)))
    if spacing >= 0.8 * 86400:
        return TRADING_DAYS
    if spacing <= 90:
        return TRADING_DAYS * MINUTES_PER_SESSION
    return max(TRADING_DAYS, int(round(TRADING_DAYS * MINUTES_PER_SESSION * 60 / spacing)))


def load_ohlcv(path, tickers: Sequence[str] | None = None, periods_per_year: int | None = None) -> MarketDataset:
    """Read a long-format OHLCV CSV and align tickers on shared timestamps.

    ``tickers=None`` loads every ticker in the file, in first-seen order.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    bars: dict[str, dict[int, OhlcvBar]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if tuple(header) != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            unknown = [c for c in header if c not in CSV_COLUMNS]
            raise DataError(
                f"{path}: header must be {','.join(CSV_COLUMNS)}"
                + (f"; missing {missing}" if missing else "")
                + (f"; unknown {unknown}" if unknown else "")
            )
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(CSV_COLUMNS):
                    raise ValueError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
                bar = OhlcvBar(
                    timestamp=int(row[0]),
                    ticker=row[1].strip(),
                    open=float(row[2]),
                    high=float(row[3]),
                    low=float(row[4]),
                    close=float(row[5]),
                    volume=float(row[6]),
                )
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}: malformed row {row_no}: {exc}") from None
            per_ticker = bars.setdefault(bar.ticker, {})
            if bar.timestamp in per_ticker:
                raise DataError(f"{path}: row {row_no}: duplicate bar for {bar.ticker} at {bar.timestamp}")
            per_ticker[bar.timestamp] = bar

    wanted = list(bars) if tickers is None else list(tickers)
    if not wanted:
        raise DataError(f"{path}: no tickers")
    absent = [t for t in wanted if t not in bars]
    if absent:
        raise DataError(f"{path}: tickers not present in data: {absent}")
    shared = set.intersection(*(set(bars[t]) for t in wanted))
    if len(shared) < 2:
        raise DataError(f"{path}: fewer than 2 timestamps shared by {wanted}")
    ts = np.array(sorted(shared), dtype=np.int64)
    cols = {k: np.empty((len(ts), len(wanted))) for k in ("open", "high", "low", "close", "volume")}
    for j, t in enumerate(wanted):
        for i, stamp in enumerate(ts):
            bar = bars[t][int(stamp)]
            for k in cols:
                cols[k][i, j] = getattr(bar, k)
    ppy = periods_per_year or infer_periods_per_year(ts)
    return MarketDataset(tuple(wanted), ts, periods_per_year=ppy, **cols)


# --- indicators -------------------------------------------------------------

def _series(x, name="series") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DataError(f"{name} must be a non-empty 1-D series")
    return x


def ema(x, span: int) -> np.ndarray:
    x = _series(x)
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = acc + alpha * (v - acc) if i else v
        out[i] = acc
    return out


def compute_macd(close, cfg: IndicatorConfig = IndicatorConfig()) -> np.ndarray:
    close = _series(close, "close")
    return ema(close, cfg.macd_fast) - ema(close, cfg.macd_slow)


def compute_rsi(close, period: int = 14) -> np.ndarray:
    close = _series(close, "close")
    if close.size < 2:
        raise DataError("RSI needs at least 2 prices")
    delta = np.diff(close)
    out = np.empty_like(close)
    out[0] = 50.0
    avg_gain = avg_loss = 0.0
    for i, d in enumerate(delta, start=1):
        gain, loss = max(d, 0.0), max(-d, 0.0)
        if i <= period:
            avg_gain += (gain - avg_gain) / i
            avg_loss += (loss - avg_loss) / i
        else:
            avg_gain = (avg_gain * (period - 1) + gain) / period
            avg_loss = (avg_loss * (period - 1) + loss) / period
        if avg_loss == 0.0:
            out[i] = 50.0 if avg_gain == 0.0 else 100.0
        else:
            out[i] = 100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    return out


def compute_cci(high, low, close, period: int = 20) -> np.ndarray:
    high, low, close = (_series(s, n) for s, n in ((high, "high"), (low, "low"), (close, "close")))
    if not (high.size == low.size == close.size):
        raise DataError("high, low and close must have equal lengths")
    if period > close.size:
        raise DataError(f"CCI period {period} exceeds series length {close.size}")
    tp = (high + low + close) / 3.0
    out = np.zeros_like(tp)
    for i in range(tp.size):
        window = tp[max(0, i - period + 1): i + 1]
        mean = window.mean()
        dev = np.abs(window - mean).mean()
        if dev > 0.0:
            out[i] = (tp[i] - mean) / (0.015 * dev)
    return out


def build_features(dataset: MarketDataset, cfg: IndicatorConfig = IndicatorConfig()) -> MarketDataset:
    channels = cfg.channels
    T, n = dataset.close.shape
    feats = np.zeros((T, n, len(channels)))
    for j in range(n):
        for c, name in enumerate(channels):
            if name == "macd":
                feats[:, j, c] = compute_macd(dataset.close[:, j], cfg)
            elif name == "rsi":
                feats[:, j, c] = compute_rsi(dataset.close[:, j], cfg.rsi_period)
            else:
                feats[:, j, c] = compute_cci(dataset.high[:, j], dataset.low[:, j],
                                             dataset.close[:, j], cfg.cci_period)
    return dataclasses.replace(dataset, features=feats, feature_names=channels)


def split(dataset: MarketDataset, boundary_timestamp: int) -> tuple[MarketDataset, MarketDataset]:
    """Train gets timestamps < boundary, test gets the rest."""
    ts = dataset.timestamps
    if not (ts[0] < boundary_timestamp <= ts[-1]):
        raise DataError(f"boundary {boundary_timestamp} outside ({ts[0]}, {ts[-1]}]")
    cut = int(np.searchsorted(ts, boundary_timestamp, side="left"))
    if cut < 2 or ts.size - cut < 2:
        raise DataError(f"split leaves {cut} train and {ts.size - cut} test steps; both need >= 2")
    return dataset.slice(0, cut), dataset.slice(cut, ts.size)


def split_fraction(dataset: MarketDataset, fraction: float) -> tuple[MarketDataset, MarketDataset]:
    """Split so the first ``fraction`` of timestamps go to the left part."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    cut = int(round(dataset.n_steps * fraction))
    cut = min(max(cut, 1), dataset.n_steps - 1)
    return split(dataset, int(dataset.timestamps[cut]))


def generate_synthetic(
    n: int,
    T: int,
    model: str = "geometric-random-walk",
    seed: int = 0,
    *,
    start_price: float = 100.0,
    slope: float = 0.01,
    drift: float = 0.0,
    volatility: float = 0.02,
    start_timestamp: int = 1_262_304_000,
    interval: int = 86400,
    tickers: Iterable[str] | None = None,
) -> MarketDataset:
    """Build a synthetic market.

    ``deterministic-trend``: ``close[t] = start_price * (1 + slope)**t`` for
    every ticker. ``geometric-random-walk``: multiplicative steps with
    expected per-step return ``drift`` (so ``drift=0`` is a martingale) and
    log-volatility ``volatility``.
    """
    if n < 1 or T < 2:
        raise ConfigError(f"need n >= 1 and T >= 2, got n={n}, T={T}")
    rng = np.random.default_rng(seed)
    steps = np.arange(T, dtype=np.float64)[:, None]
    if model == "deterministic-trend":
        close = np.repeat(start_price * (1.0 + slope) ** steps, n, axis=1)
        wick = np.zeros((T, n))
    elif model == "geometric-random-walk":
        z = rng.standard_normal((T - 1, n))
        log_step = math.log1p(drift) - 0.5 * volatility**2 + volatility * z
        close = start_price * np.exp(np.vstack([np.zeros((1, n)), np.cumsum(log_step, axis=0)]))
        wick = np.abs(rng.normal(0.0, volatility / 4, size=(T, n)))
    else:
        raise ConfigError(f"unknown synthetic model {model!r}")
    open_ = np.vstack([close[:1], close[:-1]])
    high = np.maximum(open_, close) * (1.0 + wick)
    low = np.minimum(open_, close) / (1.0 + wick)
    volume = np.full((T, n), 1e6)
    names = tuple(tickers) if tickers is not None else tuple(f"SYN{j}" for j in range(n))
    if len(names) != n:
        raise ConfigError("ticker name count does not match n")
    ts = start_timestamp + interval * np.arange(T, dtype=np.int64)
    return MarketDataset(names, ts, open_, high, low, close, volume,
                         periods_per_year=infer_periods_per_year(ts))


# --- artifact I/O -------------------------------------------------------------

def save_dataset(dataset: MarketDataset, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(
            fh,
            magic=np.array(ARTIFACT_MAGIC),
            version=np.array(ARTIFACT_VERSION),
            tickers=np.array(dataset.tickers),
            feature_names=np.array(dataset.feature_names, dtype=str),
            periods_per_year=np.array(dataset.periods_per_year),
            timestamps=dataset.timestamps,
            open=dataset.open, high=dataset.high, low=dataset.low,
            close=dataset.close, volume=dataset.volume, features=dataset.features,
        )
    tmp.replace(path)
    return path


def load_dataset(path) -> MarketDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such dataset artifact: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            if str(z["magic"]) != ARTIFACT_MAGIC:
                raise DataError(f"{path}: not a dataset artifact")
            if int(z["version"]) != ARTIFACT_VERSION:
                raise DataError(f"{path}: unsupported artifact version {int(z['version'])}")
            return MarketDataset(
                tickers=tuple(str(t) for t in z["tickers"]),
                timestamps=z["timestamps"],
                open=z["open"], high=z["high"], low=z["low"], close=z["close"], volume=z["volume"],
                features=z["features"],
                feature_names=tuple(str(t) for t in z["feature_names"]),
                periods_per_year=int(z["periods_per_year"]),
            )
    except (KeyError, OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: unreadable dataset artifact ({exc})") from None
