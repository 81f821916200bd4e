import numpy as np
import pytest

from conftest import flat_dataset
from episodes import fifo_oracle, holdings, random_episode, step_mismatch
from fxgp.market_data import DataError
from fxgp.simulator import (Order, SimConfig, match_trades, open_lots, run_simulation,
                            simulate_signal, to_usd, translation_residual)
from fxgp.strategy_tree import deserialize


def const_tree(v):
    return deserialize(f"(const {v})")


def test_constant_zero_preserves_nav_exactly(small_dataset):
    for inst in ("EUR.USD", "USD.JPY"):
        res = run_simulation(const_tree(0), small_dataset, inst)
        assert np.all(res.nav == 1_000_000.0)
        assert res.orders == [] and res.trade_count == 0


def test_full_long_on_rising_quote_usd_pair():
    # EUR.USD rises 10% over the day; +100 moves half of NAV from USD into EUR.
    p = np.linspace(1.30, 1.43, 200)
    ds = flat_dataset({"EUR.USD": p, "USD.JPY": np.full(200, 95.0)})
    res = run_simulation(const_tree(100), ds, "EUR.USD")
    q = round(0.5 * 1e6 / 1.30 / 5000) * 5000
    cost = 15e-6 * q * 1.30
    assert [o.signed_size for o in res.orders] == [q]
    assert res.orders[0].cost_usd == pytest.approx(cost, rel=1e-12)
    assert res.final_nav == pytest.approx(1e6 - cost + q * (1.43 - 1.30), rel=1e-12)
    # exposure drifts to ~105, still inside the 10-point band
    assert 100 < res.exposure[-1] < 110


def test_long_means_quote_flips_direction():
    p = np.linspace(1.30, 1.43, 50)
    ds = flat_dataset({"EUR.USD": p})
    assert simulate_signal(np.full(50, 100.0), ds, "EUR.USD",
                           SimConfig(long_means="quote")).orders[0].side == "sell"


def test_usd_base_pair_nav_in_usd():
    p = np.full(20, 100.0)
    p[10:] = 110.0
    ds = flat_dataset({"USD.JPY": p})
    res = simulate_signal(np.full(20, -100.0), ds, "USD.JPY")
    q = res.orders[0].signed_size
    assert q == -500_000
    cost = 15e-6 * 500_000
    # short 500k USD against JPY; USD rises 10%
    expected = 1e6 - cost + to_usd(q * 110 - q * 100, 110, False)
    assert res.final_nav == pytest.approx(expected, rel=1e-12)


def test_order_rounds_to_nearest_lot():
    # target 12,300 base units rounds to 10,000
    ds = flat_dataset({"EUR.USD": np.full(3, 1.0)})
    e = 200 * 12_300 / 1e6
    res = simulate_signal(np.full(3, e), ds, "EUR.USD", SimConfig(threshold=0.0))
    assert res.orders[0].size == 10_000


def test_cost_of_one_million_usd_notional():
    ds = flat_dataset({"USD.JPY": np.full(3, 90.0)})
    res = simulate_signal(np.full(3, 100.0), ds, "USD.JPY", SimConfig(initial_equity=2e6))
    assert res.orders[0].size == 1_000_000
    assert res.orders[0].cost_usd == pytest.approx(15.0, rel=1e-12)


def test_threshold_band():
    ds = flat_dataset({"EUR.USD": np.full(4, 1.25)})
    res = simulate_signal(np.array([10.0, 10.5, 3.0, -20.0]), ds, "EUR.USD")
    assert [o.index for o in res.orders] == [1, 3]


def test_signal_is_clipped():
    ds = flat_dataset({"EUR.USD": np.full(3, 1.0)})
    a = simulate_signal(np.full(3, 1e9), ds, "EUR.USD")
    b = simulate_signal(np.full(3, 100.0), ds, "EUR.USD")
    assert np.array_equal(a.nav, b.nav) and a.orders == b.orders


def test_bankruptcy_halts():
    p = np.array([1.0, 1.0, 0.01, 0.01, 0.02])
    ds = flat_dataset({"EUR.USD": p})
    res = simulate_signal(np.full(5, -100.0), ds, "EUR.USD", SimConfig(long_means="quote"))
    assert not res.bankrupt  # long EUR 50% loses at most half
    p = np.array([1.0, 1.0, 5.0, 5.0, 5.0])
    res = simulate_signal(np.full(5, -100.0), flat_dataset({"EUR.USD": p}), "EUR.USD")
    assert res.bankrupt and len(res.nav) == 3 and res.nav[-1] <= 0


def test_pair_without_usd_rejected():
    ds = flat_dataset({"EUR.GBP": np.full(3, 0.8)})
    with pytest.raises(DataError):
        simulate_signal(np.zeros(3), ds, "EUR.GBP")


@pytest.mark.parametrize("seed", range(60))
def test_conservation_and_order_rules(seed):
    res, signal = random_episode(seed)
    assert step_mismatch(res) < 1e-9
    q, c, cum_cost, _ = holdings(res)
    qu = res.instrument.endswith("USD")
    p = res.close[: len(res.nav)]
    oracle = res.initial_nav - cum_cost + np.array([to_usd(a * b + d, b, qu) for a, b, d in zip(q, p, c)])
    np.testing.assert_allclose(res.nav, oracle, rtol=1e-9)
    for o in res.orders:
        assert o.size % 5000 == 0 and o.size > 0
        assert abs(np.clip(signal[o.index], -100, 100) - res.exposure[o.index]) > 10.0


@pytest.mark.parametrize("seed", range(60))
def test_fifo_matches_nav_change(seed):
    res, _ = random_episode(seed)
    total, change = fifo_oracle(res)
    assert total == pytest.approx(change, rel=1e-9, abs=1e-6)
    trades, lots = res.trades, res.open_lots
    assert len(trades) == res.trade_count
    p_end = res.close[len(res.nav) - 1]
    qu = res.instrument.endswith("USD")
    open_mtm = sum(to_usd(l.side_sign * l.size * (p_end - l.entry_price), p_end, qu) - l.size * l.cost_per_unit
                   for l in lots)
    realised = sum(t.pnl_usd for t in trades) - translation_residual(trades, p_end, res.instrument)
    assert realised + open_mtm == pytest.approx(change, rel=1e-9, abs=1e-6)


def _orders(*pairs):
    return [Order(i, np.datetime64("2013-01-07T00:00", "ns"), "buy" if s > 0 else "sell", abs(s), px, 0.0)
            for i, (s, px) in enumerate(pairs)]


def test_single_round_trip_is_one_trade():
    tr = match_trades(_orders((10_000, 1.0), (-10_000, 1.1)), "EUR.USD")
    assert len(tr) == 1
    assert tr[0].side == "long" and tr[0].pnl_usd == pytest.approx(1000.0)


def test_fifo_order_of_closing():
    tr = match_trades(_orders((5000, 1.0), (5000, 2.0), (-5000, 3.0), (-5000, 3.0)), "EUR.USD")
    assert [t.entry_price for t in tr] == [1.0, 2.0]
    assert [t.pnl_usd for t in tr] == pytest.approx([10_000.0, 5_000.0])


def test_crossing_neutral_splits():
    o = _orders((5000, 1.0), (-15_000, 1.2), (10_000, 1.1))
    tr = match_trades(o, "EUR.USD")
    assert [(t.side, t.size) for t in tr] == [("long", 5000), ("short", 10_000)]
    assert open_lots(o, "EUR.USD") == []
    assert match_trades(o, "EUR.USD", long_means="quote")[0].side == "short"


def test_cost_allocation_proportional():
    o = [Order(0, None, "buy", 10_000, 1.0, 10.0), Order(1, None, "sell", 20_000, 1.0, 30.0)]
    tr = match_trades(o, "EUR.USD")
    assert tr[0].pnl_usd == pytest.approx(-(10.0 + 15.0))
    (lot,) = open_lots(o, "EUR.USD")
    assert lot.size == 10_000 and lot.cost_per_unit * lot.size == pytest.approx(15.0)
