"""Multi-instrument OHLC bar ingestion, alignment, partitioning and synthesis.

Timestamps are bar *close* instants in UTC on a 5-minute grid.  Trading days
run from 17:00 US-Eastern to 17:00 US-Eastern the next day; a day is labelled
with the calendar date on which it ends.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FIELDS = ("O", "H", "L", "C")
BAR_MINUTES = 5
BAR_NS = BAR_MINUTES * 60 * 1_000_000_000
EASTERN = "America/New_York"
# bars per year used to annualise synthetic drift / vol
BARS_PER_YEAR = 252 * 288

CSV_HEADER = ("timestamp", "instrument", "open", "high", "low", "close")


class DataError(ValueError):
    """Invalid or unusable market data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class InstrumentId:
    base: str
    quote: str

    def __post_init__(self):
        for code in (self.base, self.quote):
            if len(code) != 3 or not code.isalpha() or not code.isupper():
                raise ValueError(f"not an ISO-4217 code: {code!r}")
        if self.base == self.quote:
            raise ValueError(f"base and quote are both {self.base}")

    @classmethod
    def parse(cls, text: str) -> "InstrumentId":
        parts = text.strip().split(".")
        if len(parts) != 2:
            raise ValueError(f"instrument must look like BASE.QUOTE, got {text!r}")
        return cls(parts[0], parts[1])

    def __str__(self) -> str:
        return f"{self.base}.{self.quote}"


@dataclass(frozen=True)
class Bar:
    timestamp: datetime
    open: float
    high: float
    low: float
    close: float

    def __post_init__(self):
        check_bar(self.open, self.high, self.low, self.close)


def check_bar(o: float, h: float, l: float, c: float) -> None:
    """Raise ValueError unless the four prices form a sane bar."""
    if not all(math.isfinite(p) and p > 0 for p in (o, h, l, c)):
        raise ValueError("prices must be finite and positive")
    if not l <= h:
        raise ValueError(f"high {h} < low {l}")
    if not (l <= o <= h and l <= c <= h):
        raise ValueError("open/close outside [low, high]")


def trading_days(timestamps: np.ndarray) -> np.ndarray:
    """Label each UTC bar-close instant with its trading day.

    Returns ``datetime64[D]`` labels: the date of the 17:00 Eastern boundary
    closing the day.  A bar closing exactly at 17:00 belongs to the day that
    ends there.
    """
    ts = pd.DatetimeIndex(np.asarray(timestamps, dtype="datetime64[ns]"), tz="UTC")
    local = ts.tz_convert(EASTERN).tz_localize(None)
    shifted = local + pd.Timedelta(hours=7) - pd.Timedelta(1, "ns")
    return shifted.floor("D").values.astype("datetime64[D]")


def in_trading_week(timestamps: np.ndarray) -> np.ndarray:
    """Mask of bar closes inside the Sunday 17:00 to Friday 17:00 ET window."""
    days = trading_days(timestamps)
    # 1970-01-01 was a Thursday
    weekday = (days.astype(np.int64) + 3) % 7
    return weekday < 5


@dataclass(frozen=True, eq=False)
class AlignedDataset:
    """Timestamp-aligned bars for an ordered instrument basket.

    ``prices`` has shape ``(n_timestamps, n_instruments, 4)`` with the last
    axis in O, H, L, C order.
    """

    instruments: tuple[str, ...]
    timestamps: np.ndarray
    prices: np.ndarray
    trading_day: np.ndarray = field(default=None)
    dropped_timestamps: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[ns]")
        prices = np.asarray(self.prices, dtype=np.float64)
        if prices.shape != (len(ts), len(self.instruments), 4):
            raise DataError(f"price block shape {prices.shape} does not match "
                            f"{len(ts)} timestamps x {len(self.instruments)} instruments")
        if len(ts) > 1 and not np.all(np.diff(ts.astype(np.int64)) > 0):
            raise DataError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        prices.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "prices", prices)
        days = self.trading_day
        days = trading_days(ts) if days is None else np.asarray(days, dtype="datetime64[D]")
        days.setflags(write=False)
        object.__setattr__(self, "trading_day", days)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def variables(self) -> list[str]:
        """Input variable names, instrument-major: ``EUR.USD.O`` ... ``USD.JPY.C``."""
        return [f"{inst}.{f}" for inst in self.instruments for f in FIELDS]

    def columns(self) -> dict[str, np.ndarray]:
        """Map every input variable name to its (read-only) column."""
        out = {}
        for i, inst in enumerate(self.instruments):
            for j, f in enumerate(FIELDS):
                out[f"{inst}.{f}"] = self.prices[:, i, j]
        return out

    def row(self, t: int) -> dict[str, float]:
        return {name: float(col[t]) for name, col in self.columns().items()}

    def instrument_index(self, instrument: str) -> int:
        try:
            return self.instruments.index(str(instrument))
        except ValueError:
            raise DataError(f"instrument {instrument} not in basket {list(self.instruments)}") from None

    def close(self, instrument: str) -> np.ndarray:
        return self.prices[:, self.instrument_index(instrument), 3]

    def day_ends(self) -> np.ndarray:
        """Index of the last datapoint of each trading day."""
        days = self.trading_day
        if len(days) == 0:
            return np.zeros(0, dtype=np.int64)
        change = np.nonzero(days[1:] != days[:-1])[0]
        return np.append(change, len(days) - 1).astype(np.int64)

    @property
    def n_days(self) -> int:
        return len(self.day_ends())

    def between(self, start, end) -> "AlignedDataset":
        """Sub-dataset for the half-open UTC range ``[start, end)``."""
        lo, hi = np.searchsorted(self.timestamps, [_ts64(start), _ts64(end)], side="left")
        return self.take(slice(lo, hi))

    def take(self, sl: slice) -> "AlignedDataset":
        return AlignedDataset(self.instruments, self.timestamps[sl], self.prices[sl],
                              self.trading_day[sl])

    def bars(self, instrument: str) -> list[Bar]:
        i = self.instrument_index(instrument)
        return [Bar(pd.Timestamp(t, tz="UTC").to_pydatetime(), *map(float, self.prices[k, i]))
                for k, t in enumerate(self.timestamps)]

    def to_csv(self, path: str | Path | None = None) -> str:
        """Serialize in canonical order (timestamp major, basket order)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        stamps = [format_timestamp(t) for t in self.timestamps]
        for k, stamp in enumerate(stamps):
            for i, inst in enumerate(self.instruments):
                w.writerow([stamp, inst, *(repr(float(p)) for p in self.prices[k, i])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


@dataclass(frozen=True)
class DatasetSplit:
    training: AlignedDataset
    validation: AlignedDataset
    oos: AlignedDataset

    PARTITIONS = ("training", "validation", "oos")

    def partition(self, name: str) -> AlignedDataset:
        if name not in self.PARTITIONS:
            raise DataError(f"unknown partition {name!r}; expected one of {self.PARTITIONS}")
        return getattr(self, name)


def _ts64(value) -> np.datetime64:
    ts = pd.Timestamp(value)
    if ts.tzinfo is None:
        ts = ts.tz_localize("UTC")
    return np.datetime64(ts.tz_convert("UTC").tz_localize(None).to_datetime64(), "ns")


def format_timestamp(t) -> str:
    return pd.Timestamp(t).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "ns")


def load_bars(source, expected_instruments: Sequence[str]) -> AlignedDataset:
    """Read ``timestamp,instrument,open,high,low,close`` rows and align them.

    ``source`` is a path or an open text stream.  Only timestamps where every
    expected instrument has a valid bar survive; the number of dropped
    timestamps is stored on the result.
    """
    basket = tuple(str(InstrumentId.parse(s)) for s in expected_instruments)
    col = {inst: i for i, inst in enumerate(basket)}
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_bars(fh, basket)

    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip().lower() for h in header) != CSV_HEADER:
        raise DataError(f"expected header {','.join(CSV_HEADER)}", line=1)

    rows: dict[np.datetime64, np.ndarray] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != 6:
            raise DataError(f"expected 6 fields, got {len(rec)}", line=lineno)
        try:
            ts = parse_timestamp(rec[0])
            o, h, l, c = (float(x) for x in rec[2:])
        except ValueError as exc:
            raise DataError(f"cannot parse row: {exc}", line=lineno) from None
        if ts.astype(np.int64) % BAR_NS:
            raise DataError(f"timestamp {rec[0]} is not on the {BAR_MINUTES}-minute grid", line=lineno)
        inst = rec[1].strip()
        if inst not in col:
            raise DataError(f"unknown instrument {inst!r}", line=lineno)
        try:
            check_bar(o, h, l, c)
        except ValueError as exc:
            raise DataError(f"invalid bar: {exc}", line=lineno) from None
        block = rows.get(ts)
        if block is None:
            block = rows[ts] = np.full((len(basket), 4), np.nan)
        if not np.isnan(block[col[inst], 0]):
            raise DataError(f"duplicate bar for {inst} at {rec[0]}", line=lineno)
        block[col[inst]] = (o, h, l, c)

    stamps = sorted(rows)
    complete = [t for t in stamps if not np.isnan(rows[t]).any()]
    dropped = len(stamps) - len(complete)
    if not complete:
        raise DataError("no timestamp has bars for every instrument")
    if dropped:
        logger.info("dropped %d timestamps with missing instruments", dropped)
    prices = np.stack([rows[t] for t in complete])
    return AlignedDataset(basket, np.array(complete, dtype="datetime64[ns]"), prices,
                          dropped_timestamps=dropped)


def split(dataset: AlignedDataset, training_range, validation_range, oos_range) -> DatasetSplit:
    """Partition by three half-open UTC ranges, which must be ordered and disjoint."""
    ranges = [tuple(_ts64(x) for x in r) for r in (training_range, validation_range, oos_range)]
    names = DatasetSplit.PARTITIONS
    for name, (lo, hi) in zip(names, ranges):
        if not lo < hi:
            raise DataError(f"{name} range is empty")
    for (n1, (_, hi1)), (n2, (lo2, _)) in zip(zip(names, ranges), zip(names[1:], ranges[1:])):
        if lo2 < hi1:
            raise DataError(f"{n2} range overlaps or precedes {n1}")
    if len(dataset) == 0 or ranges[0][0] > dataset.timestamps[-1] or ranges[-1][1] <= dataset.timestamps[0]:
        raise DataError("split ranges fall outside the dataset span")
    parts = [dataset.between(lo, hi) for lo, hi in ranges]
    for name, part in zip(names, parts):
        if len(part) == 0:
            raise DataError(f"{name} partition contains no datapoints")
    return DatasetSplit(*parts)


@dataclass(frozen=True)
class LeadLag:
    """Make ``follower``'s return at t+lag load on ``leader``'s return at t."""

    leader: str
    follower: str
    lag: int = 1
    strength: float = 0.8


@dataclass(frozen=True)
class SynthSpec:
    instruments: tuple[str, ...]
    start: str
    end: str
    seed: int = 0
    drift: tuple[float, ...] | None = None      # annualised log drift
    vol: tuple[float, ...] | None = None        # annualised volatility
    correlation: tuple[tuple[float, ...], ...] | None = None
    initial_price: tuple[float, ...] | None = None
    lead_lag: tuple[LeadLag, ...] = ()

    @classmethod
    def from_mapping(cls, m: Mapping) -> "SynthSpec":
        insts = tuple(str(InstrumentId.parse(s)) for s in m["instruments"])

        def per_inst(key):
            v = m.get(key)
            if v is None:
                return None
            if isinstance(v, Mapping):
                missing = set(insts) - set(v)
                if missing:
                    raise ValueError(f"{key} lacks values for {sorted(missing)}")
                return tuple(float(v[i]) for i in insts)
            if isinstance(v, (int, float)):
                return (float(v),) * len(insts)
            return tuple(float(x) for x in v)

        corr = m.get("correlation")
        if corr is not None:
            corr = tuple(tuple(float(x) for x in row) for row in corr)
        ll = tuple(LeadLag(**d) if isinstance(d, Mapping) else d for d in m.get("lead_lag", ()) or ())
        return cls(insts, str(m["start"]), str(m["end"]), int(m.get("seed", 0)),
                   per_inst("drift"), per_inst("vol"), corr, per_inst("initial_price"), ll)


DEFAULT_PRICES = {"AUD.USD": 1.05, "EUR.USD": 1.30, "GBP.USD": 1.58, "USD.JPY": 80.0}


def psd_factor(corr: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Return L with L @ L.T == corr; raise for non-PSD or malformed input."""
    corr = np.asarray(corr, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValueError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0):
        raise ValueError("correlation matrix must have a unit diagonal")
    w, v = np.linalg.eigh(corr)
    if w.min() < -tol:
        raise ValueError(f"correlation matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def synth_timestamps(start, end) -> np.ndarray:
    lo, hi = _ts64(start), _ts64(end)
    first = -(-lo.astype(np.int64) // BAR_NS) * BAR_NS
    grid = np.arange(first, hi.astype(np.int64), BAR_NS, dtype=np.int64).astype("datetime64[ns]")
    return grid[in_trading_week(grid)]


def synthesize(spec: SynthSpec | Mapping) -> AlignedDataset:
    """Correlated geometric random walk sampled on the forex-week 5-minute grid.

    Each bar is built from four intra-bar points (O = first, C = last,
    H/L = extremes) so bar sanity holds by construction.
    """
    if not isinstance(spec, SynthSpec):
        spec = SynthSpec.from_mapping(spec)
    insts = spec.instruments
    n = len(insts)
    drift = np.array(spec.drift if spec.drift is not None else (0.0,) * n)
    vol = np.array(spec.vol if spec.vol is not None else (0.1,) * n)
    p0 = np.array(spec.initial_price if spec.initial_price is not None
                  else [DEFAULT_PRICES.get(i, 1.0) for i in insts])
    if not (len(drift) == len(vol) == len(p0) == n):
        raise ValueError("drift/vol/initial_price must have one entry per instrument")
    if np.any(vol < 0) or np.any(p0 <= 0):
        raise ValueError("vol must be >= 0 and initial prices > 0")
    corr = np.eye(n) if spec.correlation is None else np.array(spec.correlation)
    if corr.shape != (n, n):
        raise ValueError(f"correlation matrix must be {n}x{n}")
    chol = psd_factor(corr)

    ts = synth_timestamps(spec.start, spec.end)
    T = len(ts)
    if T == 0:
        raise ValueError("synthetic calendar range contains no trading bars")
    rng = np.random.default_rng(spec.seed)
    eps = rng.standard_normal((T, n)) @ chol.T
    for ll in spec.lead_lag:
        a, b = insts.index(ll.leader), insts.index(ll.follower)
        if a == b or ll.lag < 1 or not 0.0 <= ll.strength <= 1.0:
            raise ValueError(f"invalid lead-lag {ll}")
        k = ll.lag
        eps[k:, b] = ll.strength * eps[:-k, a] + math.sqrt(1.0 - ll.strength ** 2) * eps[k:, b]

    dt = 1.0 / BARS_PER_YEAR
    bar_ret = (drift - 0.5 * vol ** 2) * dt + vol * math.sqrt(dt) * eps
    log_close = np.log(p0) + np.cumsum(bar_ret, axis=0)
    log_prev = np.vstack([np.log(p0)[None, :], log_close[:-1]])

    # Brownian-bridge interior points: increments r/4 + zero-sum noise
    noise = rng.standard_normal((T, n, 4)) * (vol * math.sqrt(dt / 4))[None, :, None]
    noise -= noise.mean(axis=2, keepdims=True)
    steps = bar_ret[:, :, None] / 4 + noise
    path = log_prev[:, :, None] + np.cumsum(steps, axis=2)
    path[:, :, 3] = log_close
    sub = np.exp(path)
    prices = np.stack([sub[:, :, 0], sub.max(axis=2), sub.min(axis=2), sub[:, :, 3]], axis=2)
    return AlignedDataset(insts, ts, prices)
