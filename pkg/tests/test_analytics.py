import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import flat_dataset
from fxgp.analytics import (aggregate, binom_p, buy_and_hold_benchmark, group_reports, max_drawdown,
                            moving_average, pearson, reports_csv, strategy_report)

DAYS = np.arange(np.datetime64("2013-01-07"), np.datetime64("2013-01-07") + 100)


def exact_tail(n, k):
    return float(sum(Fraction(math.comb(n, i), 2 ** n) for i in range(k, n + 1)))


def mdd_oracle(v):
    worst = 0.0
    for i in range(len(v)):
        for j in range(i, len(v)):
            worst = max(worst, (v[i] - v[j]) / v[i])
    return worst


def fake_result(eod_nav, trades=10, win=0.5, long=0.5, initial=1e6):
    eod_nav = np.asarray(eod_nav, dtype=float)
    return SimpleNamespace(eod_days=DAYS[: len(eod_nav)], eod_nav=eod_nav, initial_nav=initial,
                           trade_count=trades, winning_ratio=win, long_ratio=long)


def report(rel, **kw):
    return strategy_report(fake_result(np.asarray(rel) * 1e4, **kw), name="s")


class TestBinom:
    @pytest.mark.parametrize("n,k", [(213, 121), (213, 141), (10, 0), (10, 10), (1, 1), (500, 300), (40, 20)])
    def test_matches_exact_sum(self, n, k):
        assert binom_p(n, k) == pytest.approx(exact_tail(n, k), rel=1e-10)

    def test_reported_values(self):
        assert 0.025 <= binom_p(213, 121) <= 0.029
        assert 5e-7 <= binom_p(213, 141) <= 5e-6

    def test_extreme_tail_does_not_underflow(self):
        assert binom_p(4000, 2600) == pytest.approx(exact_tail(4000, 2600), rel=1e-9)
        assert 0 < binom_p(4000, 2600) < 1e-70


class TestPearson:
    def test_oracle(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=50), rng.normal(size=50)
        mx, my = sum(x) / 50, sum(y) / 50
        num = sum((a - mx) * (b - my) for a, b in zip(x, y))
        den = math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))
        assert pearson(x, y) == pytest.approx(num / den, rel=1e-12)
        assert pearson(x, 3 * x + 1) == pytest.approx(1.0)

    def test_zero_variance(self):
        assert pearson([1, 1, 1], [1, 2, 3]) is None


class TestDrawdown:
    def test_against_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            v = 100 * np.exp(np.cumsum(rng.normal(0, 0.02, int(rng.integers(1, 80)))))
            assert max_drawdown(v) == pytest.approx(mdd_oracle(v), abs=1e-15)

    def test_first_day_loss_counts(self):
        assert report([90.0, 95.0]).max_drawdown == pytest.approx(0.10)


class TestDailyReturns:
    def test_compounding_reconstructs_ratio(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            nav = 1e6 * np.exp(np.cumsum(rng.normal(0, 0.01, 30)))
            r = report(nav / 1e4)
            assert np.prod(1 + r.daily_returns) == pytest.approx(nav[-1] / 1e6, rel=1e-9)
            assert len(r.daily_returns) == len(r.days) == 30

    def test_days_gt0_and_binom(self):
        r = report([101, 100, 102, 103])
        assert r.positive_days == 3 and r.days_gt0 == 0.75
        assert r.binom_p == pytest.approx(exact_tail(4, 3))


class TestMovingAverage:
    def test_ramp(self):
        ma = moving_average(np.arange(1, 41, dtype=float), 30)
        assert ma.values[29] == 15.5
        assert ma.values[39] == 25.5
        assert ma.partial[:29].all() and not ma.partial[29:].any()
        assert ma.values[0] == 1.0


class TestAggregate:
    def test_singleton_identity(self):
        r = report([101, 99, 104], trades=7)
        a = aggregate([r], name="s")
        assert np.array_equal(a.relative_nav, r.relative_nav)
        assert a.summary() == r.summary()

    def test_average_can_beat_every_member_on_positive_days(self):
        # each member has one big gain and two small losses; the mean gains every day
        rel = [[110, 109, 108], [99, 108.9, 107.8], [99, 98, 107.8]]
        members = [report(x) for x in rel]
        agg = aggregate(members)
        assert max(m.days_gt0 for m in members) < agg.days_gt0 == 1.0
        assert agg.members == 3
        assert agg.trade_count == 10 and agg.dispersion["trade_count"] == 0.0

    def test_mismatched_days_rejected(self):
        with pytest.raises(ValueError):
            aggregate([report([101, 102]), report([101, 102, 103])])

    def test_groupings(self):
        runs = [[report([101, 103]), report([99, 98])], [report([100, 101])]]
        g = group_reports(runs)
        assert g["best_individual"].return_ratio == pytest.approx(1.03)
        assert g["winners_across_runs"].return_ratio == pytest.approx((1.03 + 1.01) / 2)
        assert g["global_average"].return_ratio == pytest.approx((1.03 + 0.98 + 1.01) / 3)
        assert [r.members for r in g["per_run_average"]] == [2, 1]
        assert g["best_run"].return_ratio == pytest.approx(1.01)
        assert "best_individual" in reports_csv([g["best_individual"]])

    def test_single_run_winner_is_best_individual(self):
        g = group_reports([[report([101, 103]), report([99, 98])]])
        assert np.array_equal(g["winners_across_runs"].relative_nav, g["best_individual"].relative_nav)


def test_buy_and_hold_benchmark():
    n = 288 * 2
    ts = np.datetime64("2013-01-06T22:05", "ns") + np.arange(n) * np.timedelta64(5, "m")
    ds = flat_dataset({"USD.JPY": np.linspace(100, 111, n)}, ts)
    b = buy_and_hold_benchmark(ds, "USD.JPY")
    assert len(b.days) == 2
    assert b.return_ratio == pytest.approx(1.11)
    assert b.pearson_rho == pytest.approx(1.0)
    r = strategy_report(SimpleNamespace(eod_days=b.days, eod_nav=np.array([1.01e6, 1.03e6]), initial_nav=1e6,
                                        trade_count=0, winning_ratio=0.0, long_ratio=0.0), b)
    assert r.pearson_rho is not None
