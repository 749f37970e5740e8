import numpy as np
import pytest

from podracer.market_data import build_features, generate_synthetic

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str, status: str | None = None):
        line = f"[{status or ('PASS' if ok else 'FAIL')}] criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def gbm2():
    return build_features(generate_synthetic(2, 120, "geometric-random-walk", seed=7))


@pytest.fixture
def trend1():
    return build_features(generate_synthetic(1, 200, "deterministic-trend", slope=0.005))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def from_close(close, features=None, names=()):
    """Dataset whose bars all equal the given (T, n) close matrix."""
    from podracer.market_data import MarketDataset
    close = np.asarray(close, dtype=np.float64)
    if close.ndim == 1:
        close = close[:, None]
    T, n = close.shape
    return MarketDataset(tuple(f"T{i}" for i in range(n)), 86400 * np.arange(T), close, close, close, close,
                         np.ones_like(close), features, names)
