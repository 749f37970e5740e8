import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import from_close
from podracer.backtest import (EquityCurve, MetricsReport, annual_return_volatility, buy_and_hold_curve,
                               compute_metrics, cumulative_return, emit_report, max_drawdown,
                               read_curve_csv, run_backtest, sharpe)
from podracer.errors import DegenerateVolatility, LayoutError
from podracer.policy import Layout, PolicyParameters, init_params
from podracer.runtime import policy_layout
from podracer.trading_env import EnvConfig


def curve(values, ppy=252):
    return EquityCurve.from_values(values, ppy)


def hold_policy(ds):
    lay = policy_layout(ds, (4,))
    return PolicyParameters(lay, np.zeros(lay.size))


def buy_policy(ds, bias):
    """Constant mean action ``bias`` (pre-squash) regardless of observation."""
    lay = policy_layout(ds, (4,))
    vec = np.zeros(lay.size)
    lay.unpack(vec)["ba"][:] = bias
    return PolicyParameters(lay, vec)


def drawdown_oracle(v):
    worst = 0.0
    for i in range(len(v)):
        for j in range(i, len(v)):
            if v[i] > 0:
                worst = min(worst, v[j] / v[i] - 1.0)
    return worst


# --- metrics ------------------------------------------------------------------------------

def test_cumulative_return_reported_figure():
    assert cumulative_return(curve([1_000_000, 2_495_530])) == pytest.approx(1.49553, abs=1e-15)
    assert round(100 * cumulative_return(curve([1_000_000, 2_495_530])), 3) == 149.553
    assert cumulative_return(curve([5.0, 5.0, 5.0])) == 0.0
    assert cumulative_return(curve([5.0, 0.0])) == -1.0


def test_annualization_closed_forms():
    r = 0.001
    c = curve([100 * (1 + r) ** t for t in range(11)], ppy=10)
    ann, vol = annual_return_volatility(c)
    assert ann == pytest.approx((1 + r) ** 10 - 1, rel=1e-12)
    assert vol == pytest.approx(0.0, abs=1e-12)
    assert annual_return_volatility(EquityCurve.from_values([1.0, 2.0], 1))[0] == 1.0
    with pytest.raises(ValueError):
        annual_return_volatility(curve([1.0]))


def test_annualization_alternating_returns():
    v = [100.0]
    rets = [0.01, -0.01] * 10
    for x in rets:
        v.append(v[-1] * (1 + x))
    ann, vol = annual_return_volatility(curve(v))
    growth = math.prod(1 + x for x in rets)
    assert ann == pytest.approx(growth ** (252 / 20) - 1, rel=1e-12)
    m = sum(rets) / len(rets)
    sd = math.sqrt(sum((x - m) ** 2 for x in rets) / (len(rets) - 1))
    assert vol == pytest.approx(sd * math.sqrt(252), rel=1e-12)


def test_sharpe_examples():
    v = [100.0]
    for x in [0.01, -0.01] * 4:
        v.append(v[-1] * (1 + x))
    assert sharpe(curve(v), 0.0) == pytest.approx(0.0, abs=1e-10)
    zero_mean = curve(np.cumprod([100.0, 1.01, 1 / 1.01, 1.01, 1 / 1.01]))
    m = np.mean(zero_mean.returns)
    assert sharpe(zero_mean) == pytest.approx(m / np.std(zero_mean.returns, ddof=1) * math.sqrt(252), rel=1e-12)
    with pytest.raises(DegenerateVolatility):
        sharpe(curve([100 * 1.01**t for t in range(6)]))
    with pytest.raises(ValueError):
        sharpe(curve([1.0, 2.0]))


def test_sharpe_three_returns_oracle():
    rets = [0.01, 0.02, -0.005]
    v = [1.0]
    for x in rets:
        v.append(v[-1] * (1 + x))
    m = sum(rets) / 3
    sd = math.sqrt(sum((x - m) ** 2 for x in rets) / 2)
    got = sharpe(curve(v), 0.0)
    assert got == pytest.approx(m / sd * math.sqrt(252), rel=1e-12)
    rf = 0.03
    assert sharpe(curve(v), rf) == pytest.approx((m - rf / 252) / sd * math.sqrt(252), rel=1e-12)


def test_max_drawdown_examples():
    assert max_drawdown(curve([100, 120, 90, 110])) == -0.25
    assert max_drawdown(curve([1, 2, 3, 4])) == 0.0
    assert max_drawdown(curve([100])) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=80))
def test_max_drawdown_matches_exhaustive_scan(vals):
    assert max_drawdown(curve(vals)) == drawdown_oracle(vals)


def test_metric_purity(rng):
    c = curve(np.cumprod(1 + rng.normal(0, 0.01, 200)))
    assert compute_metrics(c) == compute_metrics(c)


def test_curve_validation():
    with pytest.raises(ValueError):
        EquityCurve(np.arange(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        EquityCurve(np.arange(3), np.array([1.0, 1.0]))


# --- replay ---------------------------------------------------------------------------------

@pytest.mark.parametrize("rate", [0.0, 0.002, 0.1])
def test_hold_policy_identity(gbm2, rate):
    c = run_backtest(hold_policy(gbm2), gbm2, EnvConfig(cost_rate=rate))
    assert np.all(c.values == 1_000_000)
    m = compute_metrics(c)
    assert m.cumulative_return == 0.0 and m.max_drawdown == 0.0
    assert m.total_transaction_costs == 0.0 and m.trade_count == 0


def test_buy_once_and_hold_replay():
    prices = [10.0, 12.0, 9.0, 15.0]
    ds = from_close(prices)
    cfg = EnvConfig(initial_capital=1000.0, cost_rate=0.0, h_max=100)
    # Full buy signal: 100 shares at 10 exhausts the cash, later buys are unaffordable.
    c = run_backtest(buy_policy(ds, 50.0), ds, cfg)
    assert np.allclose(c.values, [1000.0] + [100 * p for p in prices[1:]], rtol=0, atol=1e-9)
    assert c.trades == 1


def test_replay_determinism_and_cost_accounting(gbm2):
    p = init_params(policy_layout(gbm2, (8,)), 3)
    vec = p.vector.copy()
    p.layout.unpack(vec)["Wa"][:] *= 300.0
    p = PolicyParameters(p.layout, vec)
    cfg = EnvConfig(cost_rate=0.002)
    a, b = run_backtest(p, gbm2, cfg), run_backtest(p, gbm2, cfg)
    assert np.array_equal(a.values, b.values)
    assert a.trades > 0
    m = compute_metrics(a)
    assert m.total_transaction_costs == pytest.approx(0.002 * a.traded_notional, rel=1e-12)


def test_backtest_layout_mismatch(gbm2):
    wrong = init_params(Layout(7, (4,), 2), 0)
    with pytest.raises(LayoutError, match="obs_dim"):
        run_backtest(wrong, gbm2, EnvConfig())


def test_buy_and_hold_benchmark(gbm2):
    bh = buy_and_hold_curve(gbm2, 1000.0)
    expected = 500.0 * (gbm2.close[:, 0] / gbm2.close[0, 0]) + 500.0 * (gbm2.close[:, 1] / gbm2.close[0, 1])
    np.testing.assert_allclose(bh.values, expected, rtol=1e-12)


# --- reports -----------------------------------------------------------------------------------

def test_emit_report_files(tmp_path, gbm2):
    c = curve([100.0, 110.0, 99.0, 120.0])
    m = compute_metrics(c)
    files = emit_report(c, m, tmp_path / "out", benchmark=curve([100.0, 101.0, 102.0, 103.0]))
    assert {p.name for p in files.values()} == {"equity.csv", "metrics.json", "comparison.csv", "equity.png"}
    back = read_curve_csv(files["equity"])
    assert np.array_equal(back.values, c.values)
    rows = list(csv.reader(files["comparison"].open()))
    assert [r[0] for r in rows] == ["name", "strategy", "benchmark"]


def test_emit_report_serializes_sharpe():
    m = MetricsReport(0.1, 0.2, 0.3, 2.42, -0.1, 5, 12.5)
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        emit_report(curve([1.0, 2.0]), m, d, plot=False)
        assert json.loads(open(f"{d}/metrics.json").read())["sharpe_ratio"] == 2.42


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(curve([1.0, 2.0]), compute_metrics(curve([1.0, 2.0])), blocker / "sub", plot=False)
