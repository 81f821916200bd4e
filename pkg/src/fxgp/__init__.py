"""Genetic programming of free-form FX trading strategies over multi-instrument bars."""
from .market_data import AlignedDataset, DatasetSplit, InstrumentId, load_bars, split, synthesize
from .strategy_tree import ExprTree, TreeLimits, deserialize, evaluate, generate_random, serialize
from .simulator import SimConfig, SimulationResult, run_simulation
from .scoring import combined_score, compute_fitness, compute_return, select
from .evolution import GpConfig, evolve

__version__ = "0.1.0"

__all__ = [
    "AlignedDataset", "DatasetSplit", "InstrumentId", "load_bars", "split", "synthesize",
    "ExprTree", "TreeLimits", "deserialize", "evaluate", "generate_random", "serialize",
    "SimConfig", "SimulationResult", "run_simulation",
    "combined_score", "compute_fitness", "compute_return", "select",
    "GpConfig", "evolve",
]
