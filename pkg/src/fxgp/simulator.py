"""Single-instrument FX trading simulation driven by an exposure signal.

The account starts in the 50/50 neutral position.  The neutral book is
treated as hedged, so the account only carries the deviation from it: a
signed base-currency position ``q`` funded by quote-currency cash ``c``.
Exposure ``e`` in [-100, 100] corresponds to holding a fraction
``(100 + e) / 200`` of NAV in the base currency, i.e. a deviation of
``e / 200`` of NAV from neutral.  Under ``long_means="quote"`` the sign is
flipped.

NAV is tracked in USD, so the traded pair must have USD on one side.
"""
from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit

from .market_data import AlignedDataset, DataError, InstrumentId, format_timestamp
from .strategy_tree import ExprTree, evaluate_columns


@dataclass(frozen=True)
class SimConfig:
    initial_equity: float = 1_000_000.0
    long_means: str = "base"
    threshold: float = 10.0
    lot_size: int = 5_000
    cost_per_million: float = 15.0

    def __post_init__(self):
        if not self.initial_equity > 0:
            raise ValueError("initial_equity must be positive")
        if self.long_means not in ("base", "quote"):
            raise ValueError("long_means must be 'base' or 'quote'")
        if self.lot_size < 1 or self.threshold < 0 or self.cost_per_million < 0:
            raise ValueError("lot_size >= 1, threshold >= 0 and cost_per_million >= 0 required")

    @property
    def long_sign(self) -> int:
        return 1 if self.long_means == "base" else -1

    @property
    def cost_rate(self) -> float:
        return self.cost_per_million / 1e6


def usd_side(instrument: str) -> bool:
    """True when USD is the quote currency, False when it is the base."""
    inst = InstrumentId.parse(str(instrument))
    if inst.quote == "USD":
        return True
    if inst.base == "USD":
        return False
    raise DataError(f"traded instrument {inst} has no USD leg; NAV is kept in USD")


def to_usd(amount_quote: float, price: float, quote_is_usd: bool) -> float:
    return amount_quote if quote_is_usd else amount_quote / price


@njit(cache=True)
def _to_usd(x, p, quote_is_usd):
    if quote_is_usd:
        return x
    return x / p


@njit(cache=True)
def _simulate(signal, close, equity0, threshold, lot, cost_rate, quote_is_usd, sign):
    n = close.shape[0]
    nav = np.empty(n)
    exposure = np.empty(n)
    o_idx = np.empty(n, dtype=np.int64)
    o_qty = np.empty(n)
    o_cost = np.empty(n)
    lots = np.empty(n)
    head = 0
    tail = 0
    n_orders = 0
    trades = 0
    q = 0.0
    c = 0.0
    costs = 0.0
    bankrupt = False
    steps = 0
    for t in range(n):
        p = close[t]
        nav_t = equity0 - costs + _to_usd(q * p + c, p, quote_is_usd)
        if nav_t <= 0.0:
            nav[t] = nav_t
            exposure[t] = 0.0
            steps = t + 1
            bankrupt = True
            break
        usd_per_base = _to_usd(p, p, quote_is_usd)
        e_cur = sign * 200.0 * q * usd_per_base / nav_t
        exposure[t] = e_cur
        e_des = signal[t]
        if e_des > 100.0:
            e_des = 100.0
        elif e_des < -100.0:
            e_des = -100.0
        if abs(e_des - e_cur) > threshold:
            target = sign * (e_des / 200.0) * nav_t / usd_per_base
            dq = np.rint((target - q) / lot) * lot
            if dq != 0.0:
                cost = cost_rate * abs(dq) * usd_per_base
                # FIFO lot bookkeeping (counts matched entry/exit pairs)
                if q != 0.0 and (dq > 0.0) != (q > 0.0):
                    rem = abs(dq)
                    while rem > 0.0 and head < tail:
                        m = min(lots[head], rem)
                        trades += 1
                        lots[head] -= m
                        rem -= m
                        if lots[head] == 0.0:
                            head += 1
                    if rem > 0.0:
                        head = 0
                        tail = 0
                        lots[tail] = rem
                        tail += 1
                else:
                    lots[tail] = abs(dq)
                    tail += 1
                q += dq
                c -= dq * p
                costs += cost
                o_idx[n_orders] = t
                o_qty[n_orders] = dq
                o_cost[n_orders] = cost
                n_orders += 1
        nav[t] = equity0 - costs + _to_usd(q * p + c, p, quote_is_usd)
        steps = t + 1
        if nav[t] <= 0.0:
            bankrupt = True
            break
    return (nav[:steps], exposure[:steps], o_idx[:n_orders], o_qty[:n_orders],
            o_cost[:n_orders], trades, bankrupt)


@dataclass(frozen=True)
class Order:
    index: int
    timestamp: np.datetime64
    side: str           # "buy" or "sell" base currency
    size: float         # base units, positive multiple of the lot size
    price: float
    cost_usd: float

    @property
    def signed_size(self) -> float:
        return self.size if self.side == "buy" else -self.size


@dataclass(frozen=True)
class Trade:
    entry_order: int
    exit_order: int
    size: float
    side: str               # "long" or "short" relative to neutral
    entry_price: float
    exit_price: float
    entry_time: np.datetime64
    exit_time: np.datetime64
    gross_quote: float      # signed price change x size, in quote currency
    pnl_usd: float          # after allocated costs

    @property
    def winning(self) -> bool:
        return self.pnl_usd > 0


@dataclass(frozen=True)
class OpenLot:
    entry_order: int
    size: float
    side_sign: int          # +1 holds base, -1 short base
    entry_price: float
    cost_per_unit: float


def _match(orders: Sequence[Order], quote_is_usd: bool, long_sign: int):
    trades: list[Trade] = []
    lots: deque[list] = deque()
    q = 0.0
    for k, o in enumerate(orders):
        dq = o.signed_size
        cpu = o.cost_usd / o.size
        rem = o.size
        if q != 0.0 and (dq > 0) != (q > 0):
            side_sign = 1 if q > 0 else -1
            while rem > 0 and lots:
                lot = lots[0]
                m = min(lot[1], rem)
                gross = m * (o.price - lot[3]) * side_sign
                pnl = to_usd(gross, o.price, quote_is_usd) - m * (lot[4] + cpu)
                e = orders[lot[0]]
                trades.append(Trade(lot[0], k, m, "long" if side_sign == long_sign else "short",
                                    lot[3], o.price, e.timestamp, o.timestamp, gross, pnl))
                lot[1] -= m
                rem -= m
                q -= side_sign * m
                if lot[1] == 0:
                    lots.popleft()
        if rem > 0:
            s = 1 if dq > 0 else -1
            lots.append([k, rem, s, o.price, cpu])
            q += s * rem
    open_lots = [OpenLot(l[0], l[1], l[2], l[3], l[4]) for l in lots]
    return trades, open_lots


def match_trades(orders: Sequence[Order], instrument: str, long_means: str = "base") -> list[Trade]:
    """FIFO entry/exit matching relative to the neutral position.

    Orders moving away from neutral open lots; orders moving toward it close
    the oldest lots first.  Crossing neutral closes every lot, then opens the
    other side with the remainder.  Each order's cost is shared across the
    lots it touches in proportion to size.
    """
    sign = 1 if long_means == "base" else -1
    return _match(orders, usd_side(instrument), sign)[0]


def open_lots(orders: Sequence[Order], instrument: str, long_means: str = "base") -> list[OpenLot]:
    sign = 1 if long_means == "base" else -1
    return _match(orders, usd_side(instrument), sign)[1]


def translation_residual(trades: Sequence[Trade], final_price: float, instrument: str) -> float:
    """USD difference between converting realised quote P&L at exit vs. at the end.

    Zero when USD is the quote currency.  For USD-based pairs the account's
    realised quote cash is revalued at the current rate, which FIFO trade
    P&L (converted at exit) does not see.
    """
    qu = usd_side(instrument)
    return sum(to_usd(t.gross_quote, t.exit_price, qu) - to_usd(t.gross_quote, final_price, qu)
               for t in trades)


@dataclass
class SimulationResult:
    instrument: str
    config: SimConfig
    timestamps: np.ndarray          # partition timestamps actually simulated
    trading_day: np.ndarray
    close: np.ndarray
    nav: np.ndarray                 # post-trade NAV per datapoint
    exposure: np.ndarray            # pre-trade exposure per datapoint
    order_index: np.ndarray
    order_qty: np.ndarray
    order_cost: np.ndarray
    trade_count: int
    bankrupt: bool

    @property
    def initial_nav(self) -> float:
        return self.config.initial_equity

    @property
    def final_nav(self) -> float:
        return float(self.nav[-1])

    @cached_property
    def day_ends(self) -> np.ndarray:
        days = self.trading_day[: len(self.nav)]
        change = np.nonzero(days[1:] != days[:-1])[0]
        return np.append(change, len(days) - 1).astype(np.int64)

    @property
    def eod_days(self) -> np.ndarray:
        return self.trading_day[self.day_ends]

    @property
    def eod_nav(self) -> np.ndarray:
        return self.nav[self.day_ends]

    @cached_property
    def orders(self) -> list[Order]:
        out = []
        for i, dq, cost in zip(self.order_index, self.order_qty, self.order_cost):
            out.append(Order(int(i), self.timestamps[i], "buy" if dq > 0 else "sell",
                             float(abs(dq)), float(self.close[i]), float(cost)))
        return out

    @cached_property
    def _matched(self):
        return _match(self.orders, usd_side(self.instrument), self.config.long_sign)

    @property
    def trades(self) -> list[Trade]:
        return self._matched[0]

    @property
    def open_lots(self) -> list[OpenLot]:
        return self._matched[1]

    @property
    def winning_ratio(self) -> float:
        tr = self.trades
        return sum(t.winning for t in tr) / len(tr) if tr else 0.0

    @property
    def long_ratio(self) -> float:
        tr = self.trades
        return sum(t.side == "long" for t in tr) / len(tr) if tr else 0.0

    def summary(self) -> dict:
        return {
            "instrument": self.instrument,
            "initial_nav": self.initial_nav,
            "final_nav": self.final_nav,
            "return": self.final_nav / self.initial_nav - 1.0,
            "datapoints": int(len(self.nav)),
            "days": int(len(self.day_ends)),
            "orders": int(len(self.order_index)),
            "trade_count": int(self.trade_count),
            "winning_ratio": self.winning_ratio,
            "long_ratio": self.long_ratio,
            "bankrupt": bool(self.bankrupt),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def eod_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["day", "nav"])
        for d, v in zip(self.eod_days, self.eod_nav):
            w.writerow([str(d), repr(float(v))])
        return buf.getvalue()

    def blotter_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp", "side", "size", "price", "cost"])
        for o in self.orders:
            w.writerow([format_timestamp(o.timestamp), o.side, format(o.size, ".0f"),
                        repr(o.price), repr(o.cost_usd)])
        return buf.getvalue()


def simulate_signal(signal: np.ndarray, partition: AlignedDataset, traded_instrument: str,
                    config: SimConfig = SimConfig()) -> SimulationResult:
    """Run the trading model on a precomputed per-datapoint exposure signal."""
    if len(partition) == 0:
        raise DataError("cannot simulate on an empty partition")
    close = np.ascontiguousarray(partition.close(traded_instrument), dtype=np.float64)
    signal = np.ascontiguousarray(signal, dtype=np.float64)
    if signal.shape != close.shape:
        raise ValueError("signal length does not match partition")
    nav, expo, oi, oq, oc, trades, bankrupt = _simulate(
        signal, close, float(config.initial_equity), float(config.threshold),
        float(config.lot_size), config.cost_rate, usd_side(traded_instrument),
        float(config.long_sign))
    return SimulationResult(str(traded_instrument), config, partition.timestamps,
                            partition.trading_day, close, nav, expo, oi, oq, oc,
                            int(trades), bool(bankrupt))


def run_simulation(tree: ExprTree, partition: AlignedDataset, traded_instrument: str,
                   config: SimConfig = SimConfig(), columns: dict | None = None) -> SimulationResult:
    """Evaluate ``tree`` on every datapoint and trade the resulting exposure.

    The signal at row t depends only on row t, and orders fill at that row's
    close.  ``columns`` may be passed to reuse a partition's column mapping.
    """
    partition.instrument_index(traded_instrument)
    if len(partition) == 0:
        raise DataError("cannot simulate on an empty partition")
    cols = columns if columns is not None else partition.columns()
    signal = evaluate_columns(tree, cols, len(partition))
    return simulate_signal(signal, partition, traded_instrument, config)
