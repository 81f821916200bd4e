"""Run configuration: one YAML file with ``data``, ``gp`` and ``sim`` sections.

Example::

    seed: 7
    data:
      instruments: [AUD.USD, EUR.USD, GBP.USD, USD.JPY]
      traded: USD.JPY
      csv: bars.csv                 # or a `synth:` mapping
      ranges:
        training: ["2012-02-23T22:00:00Z", "2012-12-23T22:00:00Z"]
        validation: ["2012-12-23T22:00:00Z", "2013-02-22T22:00:00Z"]
        oos: ["2013-02-22T22:00:00Z", "2014-02-25T22:00:00Z"]
    gp: {population_size: 75000, generations: 15}
    sim: {long_means: base}

``ranges`` may instead be ``split_days: {training: 30, validation: 10, oos: 20}``,
allotting consecutive trading days from the start of the data.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .evolution import GpConfig
from .market_data import (AlignedDataset, DatasetSplit, SynthSpec, load_bars,
                          split, synthesize)
from .simulator import SimConfig, usd_side

DEFAULT_BASKET = ["AUD.USD", "EUR.USD", "GBP.USD", "USD.JPY"]


class ConfigError(ValueError):
    pass


def _plain(v):
    """Normalise YAML scalars (dates, datetimes) to strings for reproducible dumps."""
    if isinstance(v, Mapping):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if hasattr(v, "isoformat"):
        return v.isoformat()
    return v


def _fields(cls, section: Mapping, name: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return dict(section)


@dataclass
class RunConfig:
    data: dict
    gp: GpConfig
    sim: SimConfig
    seed: int | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_mapping(cls, raw: Mapping, base_dir: Path | None = None) -> "RunConfig":
        raw = _plain(dict(raw or {}))
        unknown = set(raw) - {"data", "gp", "sim", "seed", "output"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        data = dict(raw.get("data") or {})
        data.setdefault("instruments", list(DEFAULT_BASKET))
        data.setdefault("traded", "USD.JPY")
        seed = raw.get("seed")
        gp_raw = _fields(GpConfig, raw.get("gp") or {}, "gp")
        gp_raw.pop("seed", None)
        try:
            gp = GpConfig(**gp_raw, seed=int(seed) if seed is not None else 0)
            sim = SimConfig(**_fields(SimConfig, raw.get("sim") or {}, "sim"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(data, gp, sim, None if seed is None else int(seed), base_dir or Path.cwd())
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if raw is not None and not isinstance(raw, Mapping):
            raise ConfigError("config must be a mapping")
        return cls.from_mapping(raw or {}, path.parent.resolve())

    def check(self) -> None:
        d = self.data
        if str(d["traded"]) not in [str(x) for x in d["instruments"]]:
            raise ConfigError(f"traded instrument {d['traded']} is not in the basket")
        try:
            usd_side(d["traded"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if "csv" in d and "synth" in d:
            raise ConfigError("data section takes either `csv` or `synth`, not both")
        if "ranges" in d and "split_days" in d:
            raise ConfigError("data section takes either `ranges` or `split_days`, not both")
        if "csv" in d and not self.csv_path.is_file():
            raise ConfigError(f"data file not found: {self.csv_path}")

    @property
    def csv_path(self) -> Path:
        return (self.base_dir / str(self.data["csv"])).resolve()

    @property
    def traded(self) -> str:
        return str(self.data["traded"])

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed), gp=dataclasses.replace(self.gp, seed=int(seed)))

    def synth_spec(self, seed: int | None = None) -> SynthSpec:
        s = dict(self.data.get("synth") or {})
        if not s:
            raise ConfigError("no `csv` or `synth` entry in data section")
        s.setdefault("instruments", self.data["instruments"])
        if seed is not None:
            s["seed"] = seed
        elif "seed" not in s:
            s["seed"] = self.seed if self.seed is not None else 0
        try:
            return SynthSpec.from_mapping(s)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from None

    def load_dataset(self) -> AlignedDataset:
        if "csv" in self.data:
            return load_bars(self.csv_path, self.data["instruments"])
        try:
            return synthesize(self.synth_spec())
        except ValueError as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from None

    def split(self, dataset: AlignedDataset) -> DatasetSplit:
        d = self.data
        if "ranges" in d:
            r = d["ranges"]
            try:
                return split(dataset, r["training"], r["validation"], r["oos"])
            except KeyError as exc:
                raise ConfigError(f"ranges lacks {exc}") from None
        if "split_days" in d:
            return split(dataset, *day_ranges(dataset, d["split_days"]))
        raise ConfigError("data section needs `ranges` or `split_days`")

    def snapshot(self) -> str:
        """Canonical YAML that reproduces this run when passed back as --config."""
        data = dict(self.data)
        if "csv" in data:
            data["csv"] = str(self.csv_path)
        if "synth" in data:
            data["synth"] = dict(data["synth"])
            data["synth"].setdefault("seed", self.seed if self.seed is not None else 0)
        gp = dataclasses.asdict(self.gp)
        gp.pop("seed")
        body = {"seed": self.seed, "data": data, "gp": gp, "sim": dataclasses.asdict(self.sim)}
        return yaml.safe_dump(_plain(body), sort_keys=True, default_flow_style=None)


def day_ranges(dataset: AlignedDataset, days: Mapping[str, int]):
    """Timestamp ranges covering consecutive trading-day blocks."""
    counts = [int(days[k]) for k in ("training", "validation", "oos")]
    if min(counts) < 1:
        raise ConfigError("split_days entries must be >= 1")
    starts = np.concatenate([[0], dataset.day_ends()[:-1] + 1])
    if sum(counts) > len(starts):
        raise ConfigError(f"split_days needs {sum(counts)} trading days, data has {len(starts)}")
    bounds = np.cumsum([0] + counts)
    ts = dataset.timestamps
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        lo = ts[starts[a]]
        hi = ts[starts[b]] if b < len(starts) else ts[-1] + np.timedelta64(1, "ns")
        out.append((format_ns(lo), format_ns(hi)))
    return out


def format_ns(t) -> str:
    return str(np.datetime_as_string(np.datetime64(t, "ns"), unit="ns")) + "Z"
