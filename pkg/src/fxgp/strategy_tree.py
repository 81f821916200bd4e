"""Expression trees for evolved strategies.

Trees are stored as immutable prefix-order node tuples.  A subtree rooted at
position ``i`` occupies ``nodes[i:tree.end(i)]``, which keeps the genetic
operators down to slicing.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class NodeKind(Enum):
    ADDITION = "add"
    SUBTRACTION = "sub"
    MULTIPLICATION = "mul"
    DIVISION = "div"
    SINE = "sin"
    COSINE = "cos"
    TANGENT = "tan"
    IF_THEN_ELSE = "if"
    GREATER_THAN = "gt"
    LESS_THAN = "lt"
    VARIABLE = "var"
    CONSTANT = "const"

    @property
    def arity(self) -> int:
        return ARITY[self]

    @property
    def is_terminal(self) -> bool:
        return ARITY[self] == 0


K = NodeKind
ARITY = {
    K.ADDITION: 2, K.SUBTRACTION: 2, K.MULTIPLICATION: 2, K.DIVISION: 2,
    K.GREATER_THAN: 2, K.LESS_THAN: 2,
    K.SINE: 1, K.COSINE: 1, K.TANGENT: 1,
    K.IF_THEN_ELSE: 3,
    K.VARIABLE: 0, K.CONSTANT: 0,
}
FUNCTIONS = tuple(k for k in NodeKind if ARITY[k] > 0)
TERMINALS = (K.VARIABLE, K.CONSTANT)
BY_SYMBOL = {k.value: k for k in NodeKind}
SAME_ARITY = {k: tuple(o for o in FUNCTIONS if o is not k and ARITY[o] == ARITY[k]) for k in FUNCTIONS}

PROTECTED_DIV_EPS = 1e-12
CONSTANT_RANGE = (-100.0, 100.0)
WEIGHT_RANGE = (-10.0, 10.0)


class Node(NamedTuple):
    kind: NodeKind
    var: str | None = None
    value: float = 0.0
    weight: float = 1.0


def variable(name: str, weight: float = 1.0) -> Node:
    return Node(K.VARIABLE, name, 0.0, float(weight))


def constant(value: float, weight: float = 1.0) -> Node:
    return Node(K.CONSTANT, None, float(value), float(weight))


def op(kind: NodeKind | str) -> Node:
    kind = BY_SYMBOL[kind] if isinstance(kind, str) else kind
    return Node(kind)


@dataclass(frozen=True)
class TreeLimits:
    max_depth: int = 8
    max_length: int = 60

    def __post_init__(self):
        if self.max_depth < 1 or self.max_length < 1:
            raise ValueError("tree limits must be >= 1")


class TreeError(ValueError):
    """Structurally invalid tree (arity or limit violation)."""


@dataclass(frozen=True, eq=False)
class ExprTree:
    nodes: tuple[Node, ...]
    _ends: tuple[int, ...] = field(init=False, repr=False)
    _levels: tuple[int, ...] = field(init=False, repr=False)
    _heights: tuple[int, ...] = field(init=False, repr=False)
    depth: int = field(init=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if not nodes:
            raise TreeError("empty tree")
        n = len(nodes)
        ends = [0] * n
        heights = [0] * n
        stack: list[int] = []  # indices of completed subtrees, scanning right to left
        for i in range(n - 1, -1, -1):
            a = ARITY[nodes[i].kind]
            if len(stack) < a:
                raise TreeError(f"node {i} ({nodes[i].kind.value}) is missing children")
            end, h = i + 1, 0
            for _ in range(a):
                c = stack.pop()
                end = ends[c]
                h = max(h, heights[c])
            ends[i] = end
            heights[i] = h + 1
            stack.append(i)
        if stack != [0]:
            raise TreeError("node sequence does not form a single tree")
        levels = [1] * n
        for i in range(n):
            a = ARITY[nodes[i].kind]
            j = i + 1
            for _ in range(a):
                levels[j] = levels[i] + 1
                j = ends[j]
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "_ends", tuple(ends))
        object.__setattr__(self, "_levels", tuple(levels))
        object.__setattr__(self, "_heights", tuple(heights))
        object.__setattr__(self, "depth", heights[0])

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def length(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExprTree) and self.nodes == other.nodes

    def __hash__(self) -> int:
        return hash(self.nodes)

    def __str__(self) -> str:
        return serialize(self)

    def end(self, i: int) -> int:
        """One past the last node of the subtree rooted at ``i``."""
        return self._ends[i]

    def subtree_size(self, i: int) -> int:
        return self._ends[i] - i

    def level(self, i: int) -> int:
        """Depth of node ``i`` (the root is at level 1)."""
        return self._levels[i]

    def subtree_depth(self, i: int) -> int:
        return self._heights[i]

    def subtree(self, i: int) -> "ExprTree":
        return ExprTree(self.nodes[i:self._ends[i]])

    def children(self, i: int) -> list[int]:
        out, j = [], i + 1
        for _ in range(ARITY[self.nodes[i].kind]):
            out.append(j)
            j = self._ends[j]
        return out

    def replace(self, i: int, sub: "ExprTree | Sequence[Node]") -> "ExprTree":
        sub_nodes = sub.nodes if isinstance(sub, ExprTree) else tuple(sub)
        return ExprTree(self.nodes[:i] + sub_nodes + self.nodes[self._ends[i]:])

    def with_node(self, i: int, node: Node) -> "ExprTree":
        """Swap node ``i`` for one of equal arity, keeping its children."""
        if ARITY[node.kind] != ARITY[self.nodes[i].kind]:
            raise TreeError("replacement node must keep the arity")
        return ExprTree(self.nodes[:i] + (node,) + self.nodes[i + 1:])

    def variables(self) -> list[str]:
        return [n.var for n in self.nodes if n.kind is K.VARIABLE]

    def within(self, limits: TreeLimits) -> bool:
        return self.depth <= limits.max_depth and len(self) <= limits.max_length


def validate(tree: ExprTree, limits: TreeLimits, variables: Iterable[str] | None = None) -> None:
    if tree.depth > limits.max_depth:
        raise TreeError(f"depth {tree.depth} exceeds limit {limits.max_depth}")
    if len(tree) > limits.max_length:
        raise TreeError(f"length {len(tree)} exceeds limit {limits.max_length}")
    for n in tree.nodes:
        if not (math.isfinite(n.weight) and math.isfinite(n.value)):
            raise TreeError("non-finite weight or constant")
    if variables is not None:
        known = set(variables)
        unknown = sorted(set(tree.variables()) - known)
        if unknown:
            raise TreeError(f"unknown variables {unknown}")


# --- evaluation -------------------------------------------------------------

def _finite(x: float) -> float:
    return x if math.isfinite(x) else 0.0


def evaluate(tree: ExprTree, row: Mapping[str, float]) -> float:
    """Evaluate on a single datapoint.  Untaken IfThenElse branches are skipped."""
    nodes, ends = tree.nodes, tree._ends

    def ev(i: int) -> float:
        node = nodes[i]
        kind = node.kind
        if kind is K.VARIABLE:
            return _finite(node.weight * row[node.var])
        if kind is K.CONSTANT:
            return _finite(node.weight * node.value)
        if kind is K.IF_THEN_ELSE:
            then_i = ends[i + 1]
            if ev(i + 1) > 0:
                return ev(then_i)
            return ev(ends[then_i])
        a = ev(i + 1)
        if ARITY[kind] == 1:
            if kind is K.SINE:
                return math.sin(a)
            if kind is K.COSINE:
                return math.cos(a)
            return _finite(math.tan(a))
        b = ev(ends[i + 1])
        if kind is K.ADDITION:
            r = a + b
        elif kind is K.SUBTRACTION:
            r = a - b
        elif kind is K.MULTIPLICATION:
            r = a * b
        elif kind is K.DIVISION:
            r = 1.0 if abs(b) < PROTECTED_DIV_EPS else a / b
        elif kind is K.GREATER_THAN:
            r = 1.0 if a > b else -1.0
        else:
            r = 1.0 if a < b else -1.0
        return _finite(r)

    return ev(0)


def evaluate_columns(tree: ExprTree, columns: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    """Evaluate row-wise over whole columns at once.

    Each output element depends only on the same row of the inputs, so this is
    the vectorised equivalent of calling :func:`evaluate` per row.
    """
    nodes, ends = tree.nodes, tree._ends
    if n is None:
        n = len(next(iter(columns.values())))

    def fin(x):
        return np.where(np.isfinite(x), x, 0.0)

    def ev(i: int) -> np.ndarray:
        node = nodes[i]
        kind = node.kind
        if kind is K.VARIABLE:
            return fin(node.weight * np.asarray(columns[node.var], dtype=np.float64))
        if kind is K.CONSTANT:
            return np.full(n, _finite(node.weight * node.value))
        if kind is K.IF_THEN_ELSE:
            then_i = ends[i + 1]
            return np.where(ev(i + 1) > 0, ev(then_i), ev(ends[then_i]))
        a = ev(i + 1)
        if ARITY[kind] == 1:
            if kind is K.SINE:
                return fin(np.sin(a))
            if kind is K.COSINE:
                return fin(np.cos(a))
            return fin(np.tan(a))
        b = ev(ends[i + 1])
        if kind is K.ADDITION:
            r = a + b
        elif kind is K.SUBTRACTION:
            r = a - b
        elif kind is K.MULTIPLICATION:
            r = a * b
        elif kind is K.DIVISION:
            small = np.abs(b) < PROTECTED_DIV_EPS
            r = np.where(small, 1.0, a / np.where(small, 1.0, b))
        elif kind is K.GREATER_THAN:
            return np.where(a > b, 1.0, -1.0)
        else:
            return np.where(a < b, 1.0, -1.0)
        return fin(r)

    with np.errstate(all="ignore"):
        out = ev(0)
    return np.broadcast_to(out, (n,)).astype(np.float64, copy=True)


# --- random generation --------------------------------------------------------

def random_terminal(rng: np.random.Generator, variables: Sequence[str]) -> Node:
    if rng.random() < 0.5:
        name = variables[int(rng.integers(len(variables)))]
        return variable(name, rng.uniform(*WEIGHT_RANGE))
    return constant(rng.uniform(*CONSTANT_RANGE), rng.uniform(*WEIGHT_RANGE))


def generate_random(rng: np.random.Generator, limits: TreeLimits, variables: Sequence[str]) -> ExprTree:
    """Grow a random tree toward a uniformly drawn target length.

    Open argument slots are filled in random order; at each slot a symbol is
    drawn uniformly from those that still allow the tree to be completed
    within the target length and the depth limit.
    """
    if not variables:
        raise ValueError("variable universe is empty")
    L = limits.max_length
    target = int(rng.integers(min(3, L), L + 1))
    symbols = FUNCTIONS + TERMINALS

    # node: [kind, children]; slot: (parent or None, child index, level)
    root: list = [None, []]
    slots = [(None, 0, 1)]
    placed = 0
    while slots:
        parent, ci, lvl = slots.pop(int(rng.integers(len(slots))))
        open_after = len(slots)
        allowed = []
        for s in symbols:
            a = ARITY[s]
            if a and lvl + 1 > limits.max_depth:
                continue
            if placed + 1 + open_after + a > target:
                continue
            allowed.append(s)
        funcs_ok = [s for s in allowed if ARITY[s]]
        if open_after == 0 and placed + 1 < target and funcs_ok:
            allowed = funcs_ok
        kind = allowed[int(rng.integers(len(allowed)))]
        node = [random_terminal(rng, variables) if kind in TERMINALS else Node(kind), []]
        if parent is None:
            root = node
        else:
            parent[1][ci] = node
        node[1] = [None] * ARITY[kind]
        for c in range(ARITY[kind]):
            slots.append((node, c, lvl + 1))
        placed += 1

    out: list[Node] = []
    stack = [root]
    while stack:
        nd = stack.pop()
        out.append(nd[0])
        stack.extend(reversed(nd[1]))
    return ExprTree(tuple(out))


# --- text format ------------------------------------------------------------

class StrategySyntaxError(ValueError):
    def __init__(self, message: str, position: int, line: int | None = None):
        self.position = position
        self.line = line
        where = f"line {line}, " if line is not None else ""
        super().__init__(f"{where}position {position}: {message}")


def format_float(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def serialize(tree: ExprTree) -> str:
    """Canonical prefix form, e.g. ``(mul (var USD.JPY.C w=1.5) (const 0.25 w=-2))``."""
    parts: list[str] = []
    nodes, ends = tree.nodes, tree._ends

    def emit(i: int) -> None:
        node = nodes[i]
        if node.kind is K.VARIABLE:
            parts.append(f"(var {node.var} w={format_float(node.weight)})")
            return
        if node.kind is K.CONSTANT:
            parts.append(f"(const {format_float(node.value)} w={format_float(node.weight)})")
            return
        parts.append(f"({node.kind.value}")
        j = i + 1
        for _ in range(ARITY[node.kind]):
            parts.append(" ")
            emit(j)
            j = ends[j]
        parts.append(")")

    emit(0)
    return "".join(parts)


def _tokenize(text: str):
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            yield ch, i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            yield text[i:j], i
            i = j


def _number(tok: str, pos: int, line) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise StrategySyntaxError(f"expected a number, got {tok!r}", pos, line) from None
    if not math.isfinite(x):
        raise StrategySyntaxError(f"non-finite number {tok!r}", pos, line)
    return x


def deserialize(text: str, limits: TreeLimits | None = TreeLimits(),
                variables: Iterable[str] | None = None, *, line: int | None = None) -> ExprTree:
    """Parse one serialized tree; positions in errors are 0-based columns."""
    toks = list(_tokenize(text))
    nodes: list[Node] = []
    k = 0

    def peek():
        return toks[k] if k < len(toks) else (None, len(text))

    def take(expected: str | None = None):
        nonlocal k
        tok, pos = peek()
        if tok is None:
            raise StrategySyntaxError("unexpected end of input", pos, line)
        if expected is not None and tok != expected:
            raise StrategySyntaxError(f"expected {expected!r}, got {tok!r}", pos, line)
        k += 1
        return tok, pos

    def weight() -> float:
        tok, pos = peek()
        if tok is not None and tok.startswith("w="):
            take()
            return _number(tok[2:], pos + 2, line)
        return 1.0

    def expr() -> None:
        take("(")
        sym, pos = take()
        kind = BY_SYMBOL.get(sym)
        if kind is None:
            raise StrategySyntaxError(f"unknown symbol {sym!r}", pos, line)
        if kind is K.VARIABLE:
            name, npos = take()
            if name in "()":
                raise StrategySyntaxError("expected a variable name", npos, line)
            nodes.append(variable(name, weight()))
        elif kind is K.CONSTANT:
            tok, vpos = take()
            nodes.append(constant(_number(tok, vpos, line), weight()))
        else:
            nodes.append(Node(kind))
            count = 0
            while peek()[0] == "(":
                expr()
                count += 1
            if count != ARITY[kind]:
                raise StrategySyntaxError(
                    f"{sym} takes {ARITY[kind]} arguments, got {count}", pos, line)
        take(")")

    expr()
    if k != len(toks):
        raise StrategySyntaxError(f"trailing input {toks[k][0]!r}", toks[k][1], line)
    tree = ExprTree(tuple(nodes))
    if limits is not None or variables is not None:
        try:
            validate(tree, limits or TreeLimits(10 ** 9, 10 ** 9), variables)
        except TreeError as exc:
            raise StrategySyntaxError(str(exc), 0, line) from None
    return tree


def read_strategies(path_or_text, limits: TreeLimits | None = TreeLimits(),
                    variables: Iterable[str] | None = None) -> list[tuple[int, ExprTree]]:
    """Parse a strategy file: one tree per line, ``#`` comments and blanks skipped.

    Returns ``(line_number, tree)`` pairs.
    """
    from pathlib import Path

    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text
                                          and not path_or_text.lstrip().startswith("(")):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = path_or_text
    variables = None if variables is None else list(variables)
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        out.append((lineno, deserialize(s, limits, variables, line=lineno)))
    return out


# --- structure analysis -------------------------------------------------------

def structure_stats(trees: Sequence[ExprTree], instruments: Sequence[str] | None = None) -> dict:
    """Length / variable-count moments and variable usage frequencies.

    Frequencies are pooled over all Variable nodes in the sample.  Passing
    ``instruments`` reports unused instruments with frequency 0.
    """
    if not trees:
        raise ValueError("structure_stats needs at least one tree")
    lengths = np.array([len(t) for t in trees], dtype=float)
    nvars = np.array([len(t.variables()) for t in trees], dtype=float)
    inst_count: Counter = Counter()
    field_count: Counter = Counter()
    var_count: Counter = Counter()
    for t in trees:
        for name in t.variables():
            inst, _, fld = name.rpartition(".")
            inst_count[inst] += 1
            field_count[fld] += 1
            var_count[name] += 1
    total = sum(inst_count.values())
    insts = list(instruments) if instruments is not None else sorted(inst_count)
    fields = ["O", "H", "L", "C"] if total or instruments is not None else []

    def freq(counter, keys):
        return {k: (counter[k] / total if total else 0.0) for k in keys}

    return {
        "trees": len(trees),
        "length_mean": float(lengths.mean()),
        "length_sd": float(lengths.std()),
        "variables_mean": float(nvars.mean()),
        "variables_sd": float(nvars.std()),
        "variable_nodes": total,
        "instrument_frequency": freq(inst_count, insts),
        "field_frequency": freq(field_count, fields),
        "variable_frequency": freq(var_count, sorted(var_count)),
    }
