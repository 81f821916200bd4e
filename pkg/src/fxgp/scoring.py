"""Return, fitness with penalties, combined train/validation score, selection."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

PENALTY = 10.0
INSUFFICIENT_TRADES = "insufficient_trades"
BANKRUPT = "bankrupt"


@dataclass(frozen=True, order=True)
class FitnessScore:
    value: float
    penalty_reason: str | None = None

    @property
    def penalized(self) -> bool:
        return self.penalty_reason is not None

    @property
    def profitable(self) -> bool:
        return self.value < 1.0


def simple_return(initial_nav: float, final_nav: float) -> float:
    if not initial_nav > 0:
        raise ValueError("initial NAV must be positive")
    return final_nav / initial_nav - 1.0


def compute_return(result) -> float:
    """Final NAV over initial NAV, minus one."""
    return simple_return(result.initial_nav, result.final_nav)


def fitness_from_return(ret: float) -> float:
    return math.exp(-ret)


def compute_fitness(result, min_trades: int = 50) -> FitnessScore:
    """``exp(-return)``; bankrupt or under-active strategies get the 10.0 sentinel."""
    return fitness_of(result.initial_nav, result.final_nav, result.trade_count,
                      result.bankrupt, min_trades)


def fitness_of(initial_nav: float, final_nav: float, trade_count: int, bankrupt: bool,
               min_trades: int = 50) -> FitnessScore:
    if min_trades < 0:
        raise ValueError("min_trades must be >= 0")
    if bankrupt or final_nav <= 0:
        return FitnessScore(PENALTY, BANKRUPT)
    if trade_count < min_trades:
        return FitnessScore(PENALTY, INSUFFICIENT_TRADES)
    return FitnessScore(fitness_from_return(simple_return(initial_nav, final_nav)))


def combined_score(f_t: float, f_v: float) -> float | None:
    """Combined training/validation score; ``None`` unless both are profitable.

    Lower is better.  Along the diagonal ``f_t == f_v`` it reduces to ``f_t``.
    """
    if not (f_t < 1.0 and f_v < 1.0):
        return None
    cone = math.sqrt((1.0 - f_t) ** 2 + (1.0 - f_v) ** 2) / math.sqrt(2.0)
    return abs(f_t - f_v) + 1.0 - cone


@dataclass(frozen=True)
class SelectionRecord:
    strategy: str                 # serialized tree
    f_t: FitnessScore
    f_v: FitnessScore | None = None
    ref: object = None            # caller's handle on the individual

    @property
    def combined(self) -> float | None:
        if self.f_v is None:
            return None
        return combined_score(self.f_t.value, self.f_v.value)


class EmptySelection(Exception):
    """No record qualifies under the requested criterion."""


CRITERIA = ("Tr", "TrVa")


def select(records: Iterable[SelectionRecord], criterion: str, k: int) -> list[SelectionRecord]:
    """Rank and take the best ``k``.

    ``Tr`` sorts by training fitness.  ``TrVa`` keeps only records where both
    fitnesses are profitable and sorts by the combined score.  Ties fall back to
    training fitness, then to the serialized strategy text.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    records = list(records)
    if criterion == "Tr":
        ranked = sorted(records, key=lambda r: (r.f_t.value, r.strategy))
    elif criterion == "TrVa":
        eligible = [r for r in records if r.combined is not None]
        if not eligible:
            raise EmptySelection("no record has profitable training and validation fitness")
        ranked = sorted(eligible, key=lambda r: (r.combined, r.f_t.value, r.strategy))
    else:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    return ranked[:k]


def _fmt(x):
    return "" if x is None else repr(float(x))


def selection_csv(ranked: Sequence[SelectionRecord], criterion: str,
                  line_numbers: Sequence[int] | None = None) -> str:
    """Selection report: ``rank,criterion,f_t,f_v,combined,strategy_file_line``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "criterion", "f_t", "f_v", "combined", "strategy_file_line"])
    for rank, rec in enumerate(ranked, start=1):
        line = line_numbers[rank - 1] if line_numbers is not None else rank
        w.writerow([rank, criterion, _fmt(rec.f_t.value),
                    _fmt(rec.f_v.value if rec.f_v else None), _fmt(rec.combined), line])
    return buf.getvalue()
