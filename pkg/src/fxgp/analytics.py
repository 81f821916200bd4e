"""Daily performance statistics, benchmark comparison and strategy aggregates."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .market_data import AlignedDataset


@dataclass(frozen=True)
class DailySeries:
    days: np.ndarray            # datetime64[D] trading-day labels
    eod_nav: np.ndarray
    initial_nav: float

    @property
    def daily_returns(self) -> np.ndarray:
        """One return per trading day; the first is measured from the initial NAV."""
        v = np.concatenate([[self.initial_nav], self.eod_nav])
        return v[1:] / v[:-1] - 1.0

    @property
    def relative(self) -> np.ndarray:
        """EoD NAV as a percentage of the initial NAV."""
        return self.eod_nav / self.initial_nav * 100.0


def daily_series(result) -> DailySeries:
    """End-of-day NAV (last datapoint of each trading day) of a simulation."""
    return DailySeries(np.asarray(result.eod_days), np.asarray(result.eod_nav, dtype=float),
                       float(result.initial_nav))


def pearson(xs, ys) -> float | None:
    """Sample Pearson correlation; ``None`` when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two 1-d sequences of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def binom_p(n: int, k: int) -> float:
    """One-sided tail P(X >= k) for X ~ Binomial(n, 1/2), summed in log space."""
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if k == 0:
        return 1.0
    i = np.arange(k, n + 1, dtype=np.float64)
    logpmf = (math.lgamma(n + 1) - np.array([math.lgamma(v + 1) for v in i])
              - np.array([math.lgamma(n - v + 1) for v in i]) - n * math.log(2.0))
    top = logpmf.max()
    return min(1.0, math.exp(top + math.log(np.exp(logpmf - top).sum())))


def max_drawdown(nav) -> float:
    """Largest relative decline from a running peak, in [0, 1)."""
    v = np.asarray(nav, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty series")
    peak = np.maximum.accumulate(v)
    return float(np.max((peak - v) / peak))


@dataclass(frozen=True)
class MovingAverage:
    values: np.ndarray
    partial: np.ndarray         # True where fewer than `window` points were available
    window: int


def moving_average(series, window: int = 30) -> MovingAverage:
    """Trailing mean over the last ``window`` points."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(0, idx - window + 1)
    vals = (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)
    return MovingAverage(vals, idx < window - 1, window)


@dataclass(frozen=True)
class StrategyReport:
    name: str
    days: np.ndarray
    relative_nav: np.ndarray            # EoD NAV, initial = 100
    daily_returns: np.ndarray
    days_gt0: float
    positive_days: int
    pearson_rho: float | None
    binom_p: float
    trade_count: float
    winning_ratio: float
    long_ratio: float
    max_drawdown: float
    members: int = 1
    dispersion: dict = field(default_factory=dict)    # "sd" of averaged trade stats

    @property
    def final_return(self) -> float:
        return float(self.relative_nav[-1] / 100.0 - 1.0)

    @property
    def return_ratio(self) -> float:
        return float(self.relative_nav[-1] / 100.0)

    @property
    def trades_per_day(self) -> float:
        return self.trade_count / len(self.days) if len(self.days) else 0.0

    def summary(self) -> dict:
        return {
            "name": self.name,
            "members": self.members,
            "days": int(len(self.days)),
            "return": self.final_return,
            "return_ratio": self.return_ratio,
            "days_gt0": self.days_gt0,
            "positive_days": self.positive_days,
            "pearson_rho": self.pearson_rho,
            "binom_p": self.binom_p,
            "trade_count": self.trade_count,
            "trades_per_day": self.trades_per_day,
            "winning_ratio": self.winning_ratio,
            "long_ratio": self.long_ratio,
            "max_drawdown": self.max_drawdown,
            **{f"{k}_sd": v for k, v in sorted(self.dispersion.items())},
        }


def _curve_stats(relative: np.ndarray, bench_returns: np.ndarray | None):
    curve = np.concatenate([[100.0], relative])
    rets = curve[1:] / curve[:-1] - 1.0
    pos = int(np.sum(rets > 0))
    n = len(rets)
    rho = None
    if bench_returns is not None and n >= 2:
        rho = pearson(rets, bench_returns)
    return rets, pos, (pos / n if n else 0.0), rho, binom_p(n, pos), max_drawdown(curve)


def _bench_for(days: np.ndarray, benchmark: "StrategyReport | None") -> np.ndarray | None:
    if benchmark is None:
        return None
    pos = np.searchsorted(benchmark.days, days)
    if np.any(pos >= len(benchmark.days)) or np.any(benchmark.days[np.minimum(pos, len(benchmark.days) - 1)] != days):
        raise ValueError("strategy days are not covered by the benchmark")
    return benchmark.daily_returns[pos]


def strategy_report(result, benchmark: "StrategyReport | None" = None, name: str = "strategy") -> StrategyReport:
    """Full statistic set for one simulation, correlated against ``benchmark``."""
    ds = daily_series(result)
    rel = ds.relative
    rets, pos, ratio, rho, p, mdd = _curve_stats(rel, _bench_for(ds.days, benchmark))
    return StrategyReport(name, ds.days, rel, rets, ratio, pos, rho, p,
                          float(result.trade_count), result.winning_ratio, result.long_ratio, mdd)


def buy_and_hold_benchmark(partition: AlignedDataset, instrument: str) -> StrategyReport:
    """The traded instrument's EoD close curve normalised to 100 at the first datapoint."""
    close = partition.close(instrument)
    ends = partition.day_ends()
    rel = close[ends] / close[0] * 100.0
    days = partition.trading_day[ends]
    rets = np.concatenate([[100.0], rel])
    rets = rets[1:] / rets[:-1] - 1.0
    _, pos, ratio, rho, p, mdd = _curve_stats(rel, rets)
    return StrategyReport(str(instrument), days, rel, rets, ratio, pos, rho, p, 0.0, 0.0, 0.0, mdd)


def aggregate(reports: Sequence[StrategyReport], benchmark: StrategyReport | None = None,
              name: str = "aggregate") -> StrategyReport:
    """Average NAV curves pointwise and recompute curve statistics from the mean.

    Trade statistics are plain averages across members, with their standard
    deviation kept in ``dispersion``.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty group")
    days = reports[0].days
    for r in reports[1:]:
        if len(r.days) != len(days) or np.any(r.days != days):
            raise ValueError("group members cover different trading days")
    if len(reports) == 1:
        return replace(reports[0], name=name)
    rel = np.mean([r.relative_nav for r in reports], axis=0)
    rets, pos, ratio, rho, p, mdd = _curve_stats(rel, _bench_for(days, benchmark))
    trades = np.array([r.trade_count for r in reports])
    win = np.array([r.winning_ratio for r in reports])
    lng = np.array([r.long_ratio for r in reports])
    disp = {"trade_count": float(trades.std()), "winning_ratio": float(win.std()),
            "long_ratio": float(lng.std())}
    return StrategyReport(name, days, rel, rets, ratio, pos, rho, p, float(trades.mean()),
                          float(win.mean()), float(lng.mean()), mdd, len(reports), disp)


GROUPINGS = ("best_individual", "winners_across_runs", "per_run_average", "global_average")


def _best(reports: Sequence[StrategyReport]) -> StrategyReport:
    # highest final return; earliest listed wins ties
    return max(reversed(list(reports)), key=lambda r: r.final_return)


def group_reports(runs: Sequence[Sequence[StrategyReport]], benchmark: StrategyReport | None = None) -> dict:
    """The standard groupings over ``runs`` (one list of member reports per run).

    Returns best_individual, winners_across_runs, best_run, global_average and
    per_run_average (a list, one per run).
    """
    runs = [list(r) for r in runs if r]
    if not runs:
        raise ValueError("no run has any strategy")
    per_run = [aggregate(r, benchmark, f"run_{i + 1}") for i, r in enumerate(runs)]
    best_ind = _best([m for r in runs for m in r])
    return {
        "best_individual": replace(best_ind, name="best_individual"),
        "winners_across_runs": aggregate([_best(r) for r in runs], benchmark, "winners"),
        "best_run": replace(_best(per_run), name="best_run"),
        "global_average": aggregate([m for r in runs for m in r], benchmark, "avg_run"),
        "per_run_average": per_run,
    }


# --- emission -------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def report_json(reports: Sequence[StrategyReport], extra: dict | None = None) -> str:
    body = {"reports": [{k: _jsonable(v) for k, v in r.summary().items()} for r in reports]}
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True)


REPORT_COLUMNS = ("name", "members", "days", "return", "return_ratio", "days_gt0", "positive_days",
                  "pearson_rho", "binom_p", "trade_count", "trades_per_day", "winning_ratio",
                  "long_ratio", "max_drawdown", "trade_count_sd", "winning_ratio_sd", "long_ratio_sd")


def reports_csv(reports: Sequence[StrategyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        s = r.summary()
        w.writerow(["" if s.get(c) is None else (repr(s[c]) if isinstance(s[c], float) else s[c])
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def series_csv(days, values, header: str = "value") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["day", header])
    for d, v in zip(days, values):
        w.writerow([str(d), repr(float(v))])
    return buf.getvalue()
