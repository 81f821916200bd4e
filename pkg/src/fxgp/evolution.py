"""Generational tree GP: tournament selection, subtree crossover, four mutations,
elitism, training-set fitness and an end-of-run validation pass.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .market_data import AlignedDataset, DataError, DatasetSplit
from .scoring import (EmptySelection, FitnessScore, SelectionRecord, fitness_of, select,
                      selection_csv)
from .simulator import SimConfig, simulate_signal
from .strategy_tree import (SAME_ARITY, TERMINALS, ExprTree, K, Node, TreeLimits,
                            deserialize, evaluate_columns, generate_random, random_terminal,
                            serialize)

logger = logging.getLogger(__name__)

CROSSOVER_RETRIES = 20
MUTATION_SIGMA = 1.0


@dataclass(frozen=True)
class GpConfig:
    population_size: int = 75_000
    generations: int = 15
    crossover_rate: float = 0.90
    mutation_rate: float = 0.15
    max_depth: int = 8
    max_length: int = 60
    elitism: int = 1
    tournament_size: int = 5
    min_trades: int = 50
    validated_fraction: float = 0.10
    selected_count: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("crossover_rate", "mutation_rate", "validated_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("population_size", "generations", "max_depth", "max_length",
                     "tournament_size", "selected_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.min_trades < 0 or self.elitism < 0:
            raise ValueError("min_trades and elitism must be >= 0")
        if self.elitism >= self.population_size:
            raise ValueError("elitism must be smaller than the population")

    @property
    def limits(self) -> TreeLimits:
        return TreeLimits(self.max_depth, self.max_length)

    @property
    def validated_count(self) -> int:
        # guard against 0.1 * n landing a hair above an integer
        return min(self.population_size,
                   max(1, math.ceil(round(self.validated_fraction * self.population_size, 9))))


@dataclass
class Individual:
    tree: ExprTree
    text: str
    f_t: FitnessScore | None = None
    f_v: FitnessScore | None = None

    def record(self) -> SelectionRecord:
        return SelectionRecord(self.text, self.f_t, self.f_v, self)


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best: float
    mean: float
    median: float
    penalized: int


@dataclass
class RunArtifact:
    config: GpConfig
    generations: list[GenerationStats]
    population: list[Individual]            # final population ranked by f_t
    selected_tr: list[SelectionRecord]
    selected_trva: list[SelectionRecord]
    validated: int
    trva_empty: bool = False

    @property
    def seed(self) -> int:
        return self.config.seed


def stream(seed: int, generation: int, slot: int) -> np.random.Generator:
    """Independent RNG for one breeding slot, so scheduling never changes results."""
    return np.random.default_rng([seed, generation, slot])


# --- operators ----------------------------------------------------------------

def tournament_select(rng: np.random.Generator, fitness: Sequence[float], size: int) -> int:
    """Index of the fittest of ``size`` uniform draws with replacement (first drawn wins ties)."""
    if size < 1 or len(fitness) == 0:
        raise ValueError("tournament needs size >= 1 and a nonempty population")
    draws = rng.integers(len(fitness), size=size)
    vals = np.asarray(fitness, dtype=np.float64)[draws]
    return int(draws[int(np.argmin(vals))])


def crossover(rng: np.random.Generator, parent_a: ExprTree, parent_b: ExprTree,
              limits: TreeLimits) -> ExprTree:
    """Swap a random subtree of ``parent_b`` into a copy of ``parent_a``.

    The donor is drawn uniformly among ``parent_b`` subtrees that keep the
    offspring within limits at the chosen insertion point.
    """
    na, nb = len(parent_a), len(parent_b)
    for _ in range(CROSSOVER_RETRIES):
        i = int(rng.integers(na))
        room_len = limits.max_length - (na - parent_a.subtree_size(i))
        room_depth = limits.max_depth - parent_a.level(i) + 1
        fits = [j for j in range(nb)
                if parent_b.subtree_size(j) <= room_len and parent_b.subtree_depth(j) <= room_depth]
        if fits:
            j = fits[int(rng.integers(len(fits)))]
            return parent_a.replace(i, parent_b.nodes[j:parent_b.end(j)])
    return parent_a


MUTATIONS = ("change_type", "perturb_weight", "remove_subtree", "replace_subtree")


def applicable_mutations(tree: ExprTree) -> list[str]:
    kinds = []
    if any(SAME_ARITY.get(n.kind) for n in tree.nodes):
        kinds.append("change_type")
    kinds.append("perturb_weight")
    if len(tree) > 1:
        kinds += ["remove_subtree", "replace_subtree"]
    return kinds


def mutate(rng: np.random.Generator, tree: ExprTree, limits: TreeLimits,
           variables: Sequence[str], kind: str | None = None) -> ExprTree:
    """Apply one mutation drawn uniformly among those applicable to ``tree``."""
    kinds = applicable_mutations(tree)
    if kind is None:
        kind = kinds[int(rng.integers(len(kinds)))]
    elif kind not in kinds:
        raise ValueError(f"mutation {kind} does not apply to this tree")
    nodes = tree.nodes

    if kind == "change_type":
        cands = [i for i, n in enumerate(nodes) if SAME_ARITY.get(n.kind)]
        i = cands[int(rng.integers(len(cands)))]
        alts = SAME_ARITY[nodes[i].kind]
        return tree.with_node(i, Node(alts[int(rng.integers(len(alts)))]))

    if kind == "perturb_weight":
        cands = [i for i, n in enumerate(nodes) if n.kind in TERMINALS]
        i = cands[int(rng.integers(len(cands)))]
        n = nodes[i]
        if n.kind is K.CONSTANT and rng.random() < 0.5:
            n = n._replace(value=n.value + rng.normal(0.0, MUTATION_SIGMA))
        else:
            n = n._replace(weight=n.weight + rng.normal(0.0, MUTATION_SIGMA))
        return tree.with_node(i, n)

    i = int(rng.integers(1, len(tree)))
    if kind == "remove_subtree":
        return tree.replace(i, [random_terminal(rng, variables)])
    sub_limits = TreeLimits(limits.max_depth - tree.level(i) + 1,
                            limits.max_length - (len(tree) - tree.subtree_size(i)))
    return tree.replace(i, generate_random(rng, sub_limits, variables))


# --- fitness evaluation ---------------------------------------------------------

class FitnessEvaluator:
    """Simulate trees on one partition and score them."""

    def __init__(self, partition: AlignedDataset, instrument: str, sim: SimConfig, min_trades: int):
        if len(partition) == 0:
            raise DataError("cannot evaluate on an empty partition")
        partition.instrument_index(instrument)
        self.partition = partition
        self.instrument = instrument
        self.sim = sim
        self.min_trades = min_trades
        self.columns = partition.columns()

    def __call__(self, tree: ExprTree) -> FitnessScore:
        signal = evaluate_columns(tree, self.columns, len(self.partition))
        res = simulate_signal(signal, self.partition, self.instrument, self.sim)
        return fitness_of(res.initial_nav, res.final_nav, res.trade_count, res.bankrupt,
                          self.min_trades)


_worker_eval: FitnessEvaluator | None = None


def _init_worker(evaluator: FitnessEvaluator) -> None:
    global _worker_eval
    _worker_eval = evaluator


def _eval_chunk(trees: list[ExprTree]) -> list[FitnessScore]:
    return [_worker_eval(t) for t in trees]


class _Pool:
    """Evaluate trees serially or across processes; results are index-ordered."""

    def __init__(self, evaluator: FitnessEvaluator, workers: int):
        self.evaluator = evaluator
        self.workers = max(1, int(workers))
        self.executor = None
        if self.workers > 1:
            self.executor = ProcessPoolExecutor(self.workers, initializer=_init_worker,
                                                initargs=(evaluator,))

    def map(self, trees: list[ExprTree]) -> list[FitnessScore]:
        if self.executor is None or len(trees) < 2 * self.workers:
            return [self.evaluator(t) for t in trees]
        size = -(-len(trees) // (self.workers * 4))
        chunks = [trees[i:i + size] for i in range(0, len(trees), size)]
        out: list[FitnessScore] = []
        for part in self.executor.map(_eval_chunk, chunks):
            out.extend(part)
        return out

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


def _evaluate(pop: list[Individual], pool: _Pool, cache: dict[str, FitnessScore]) -> None:
    todo: dict[str, ExprTree] = {}
    for ind in pop:
        if ind.f_t is None and ind.text not in cache:
            todo.setdefault(ind.text, ind.tree)
    if todo:
        for text, score in zip(todo, pool.map(list(todo.values()))):
            cache[text] = score
    for ind in pop:
        if ind.f_t is None:
            ind.f_t = cache[ind.text]


def _ranked(pop: list[Individual]) -> list[Individual]:
    return sorted(pop, key=lambda ind: (ind.f_t.value, ind.text))


def _stats(g: int, pop: list[Individual]) -> GenerationStats:
    vals = [ind.f_t.value for ind in pop]
    return GenerationStats(g, min(vals), statistics.fmean(vals), statistics.median(vals),
                           sum(ind.f_t.penalized for ind in pop))


def _individual(tree: ExprTree) -> Individual:
    return Individual(tree, serialize(tree))


def evolve(config: GpConfig, split: DatasetSplit, traded_instrument: str,
           sim: SimConfig = SimConfig(), workers: int = 1) -> RunArtifact:
    """Run the GP and return the final ranked population and selections.

    ``config.generations`` counts evaluated populations, the random initial
    one included.  Only training fitness drives selection; validation fitness
    is computed once, after the last generation, for the top
    ``validated_fraction`` of the population.
    """
    for name in split.PARTITIONS:
        if len(split.partition(name)) == 0:
            raise DataError(f"{name} partition is empty")
    variables = split.training.variables
    limits = config.limits
    train = FitnessEvaluator(split.training, traded_instrument, sim, config.min_trades)
    pool = _Pool(train, workers)
    cache: dict[str, FitnessScore] = {}
    history: list[GenerationStats] = []
    try:
        pop = [_individual(generate_random(stream(config.seed, 0, s), limits, variables))
               for s in range(config.population_size)]
        _evaluate(pop, pool, cache)
        history.append(_stats(0, pop))
        logger.info("gen 0 best %.6f", history[-1].best)
        for g in range(1, config.generations):
            elite = _ranked(pop)[:config.elitism]
            fitness = [ind.f_t.value for ind in pop]
            nxt = [Individual(e.tree, e.text, e.f_t) for e in elite]
            for s in range(config.elitism, config.population_size):
                rng = stream(config.seed, g, s)
                child = pop[tournament_select(rng, fitness, config.tournament_size)].tree
                if rng.random() < config.crossover_rate:
                    other = pop[tournament_select(rng, fitness, config.tournament_size)].tree
                    child = crossover(rng, child, other, limits)
                if rng.random() < config.mutation_rate:
                    child = mutate(rng, child, limits, variables)
                nxt.append(_individual(child))
            pop = nxt
            _evaluate(pop, pool, cache)
            history.append(_stats(g, pop))
            logger.info("gen %d best %.6f", g, history[-1].best)
    finally:
        pool.close()

    ranked = _ranked(pop)
    validation = FitnessEvaluator(split.validation, traded_instrument, sim, config.min_trades)
    n_val = config.validated_count
    for ind in ranked[:n_val]:
        ind.f_v = validation(ind.tree)

    records = [ind.record() for ind in ranked]
    sel_tr = select(records, "Tr", config.selected_count)
    try:
        sel_trva = select(records, "TrVa", config.selected_count)
        trva_empty = False
    except EmptySelection:
        logger.warning("TrVa selection is empty: no validated individual is profitable on both sets")
        sel_trva, trva_empty = [], True
    return RunArtifact(config, history, ranked, sel_tr, sel_trva, n_val, trva_empty)


# --- artifact files -----------------------------------------------------------

POPULATION_FILE = "population_final.strategies"
SELECTION_FILES = {"Tr": "selection_tr.csv", "TrVa": "selection_trva.csv"}


def _f(x: float) -> str:
    return repr(float(x))


def generations_csv(history: Sequence[GenerationStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gen", "best", "mean", "median", "penalized"])
    for h in history:
        w.writerow([h.generation, _f(h.best), _f(h.mean), _f(h.median), h.penalized])
    return buf.getvalue()


def population_text(population: Sequence[Individual]) -> tuple[str, dict[str, int]]:
    """Strategy file for the ranked population plus each strategy's line number."""
    lines = [f"# final population: {len(population)} individuals ranked by training fitness"]
    line_of: dict[str, int] = {}
    for rank, ind in enumerate(population, start=1):
        note = f"# rank={rank} f_t={_f(ind.f_t.value)}"
        if ind.f_t.penalty_reason:
            note += f" penalty={ind.f_t.penalty_reason}"
        if ind.f_v is not None:
            note += f" f_v={_f(ind.f_v.value)}"
            if ind.f_v.penalty_reason:
                note += f" v_penalty={ind.f_v.penalty_reason}"
        lines.append(note)
        lines.append(ind.text)
        line_of.setdefault(ind.text, len(lines))
    return "\n".join(lines) + "\n", line_of


def write_artifact(artifact: RunArtifact, out_dir: str | Path, snapshot: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(snapshot, encoding="utf-8")
    (out / "generations.csv").write_text(generations_csv(artifact.generations), encoding="utf-8")
    text, line_of = population_text(artifact.population)
    (out / POPULATION_FILE).write_text(text, encoding="utf-8")
    for crit, sel in (("Tr", artifact.selected_tr), ("TrVa", artifact.selected_trva)):
        body = selection_csv(sel, crit, [line_of[r.strategy] for r in sel])
        (out / SELECTION_FILES[crit]).write_text(body, encoding="utf-8")
    return out


@dataclass
class StoredStrategy:
    line: int
    tree: ExprTree
    f_t: float
    f_v: float | None
    rank: int


def read_population(run_dir: str | Path) -> dict[int, StoredStrategy]:
    """Parse ``population_final.strategies`` keyed by line number."""
    path = Path(run_dir) / POPULATION_FILE
    out: dict[int, StoredStrategy] = {}
    note: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = raw.strip()
        if not s:
            continue
        if s.startswith("#"):
            note = dict(tok.split("=", 1) for tok in s[1:].split() if "=" in tok)
            continue
        tree = deserialize(s, limits=None, line=lineno)
        f_v = note.get("f_v")
        out[lineno] = StoredStrategy(lineno, tree, float(note.get("f_t", "nan")),
                                     float(f_v) if f_v is not None else None,
                                     int(note.get("rank", 0)))
        note = {}
    return out


def read_selection(run_dir: str | Path, criterion: str) -> list[StoredStrategy]:
    """Selected strategies for ``criterion`` in rank order."""
    if criterion not in SELECTION_FILES:
        raise ValueError(f"criterion must be one of {tuple(SELECTION_FILES)}")
    pop = read_population(run_dir)
    path = Path(run_dir) / SELECTION_FILES[criterion]
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [pop[int(r["strategy_file_line"])] for r in rows]
