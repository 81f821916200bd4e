import numpy as np
import pytest

from fxgp.config import day_ranges
from fxgp.market_data import AlignedDataset, LeadLag, SynthSpec, split, synthesize

BASKET = ("AUD.USD", "EUR.USD", "GBP.USD", "USD.JPY")


def synth(start="2013-01-06", end="2013-01-20", seed=3, lead=True, **kw):
    ll = (LeadLag("EUR.USD", "USD.JPY", 1, 0.8),) if lead else ()
    return synthesize(SynthSpec(BASKET, start, end, seed=seed, lead_lag=ll, **kw))


@pytest.fixture(scope="session")
def small_dataset():
    return synth()


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return split(small_dataset, *day_ranges(small_dataset, {"training": 4, "validation": 2, "oos": 3}))


def flat_dataset(closes: dict, timestamps=None) -> AlignedDataset:
    """Dataset whose bars are O=H=L=C at the given close paths."""
    insts = tuple(closes)
    n = len(next(iter(closes.values())))
    if timestamps is None:
        timestamps = np.datetime64("2013-01-07T00:05", "ns") + np.arange(n) * np.timedelta64(5, "m")
    prices = np.empty((n, len(insts), 4))
    for i, inst in enumerate(insts):
        prices[:, i, :] = np.asarray(closes[inst], dtype=float)[:, None]
    return AlignedDataset(insts, timestamps, prices)


_acceptance: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    _acceptance[name] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda s: int(s.split(".")[0])):
        ok, detail = _acceptance[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
