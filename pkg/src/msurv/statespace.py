"""State spaces, transition graphs and composable block partitions.

States are the integers ``1..s``. A transition graph lists the allowed
direct jumps; absorbing states are exactly those with no outgoing edge.
A partition groups states into blocks, and every ordered block pair with at
least one cross edge carries its own dislocation measure.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs or partitions."""


@dataclass(frozen=True)
class TransitionGraph:
    s: int
    edges: frozenset
    labels: tuple = ()
    name: str = "custom"

    def __post_init__(self):
        if self.s < 2:
            raise GraphError(f"need at least two states, got s={self.s}")
        for e in self.edges:
            i, k = e
            if not (1 <= i <= self.s and 1 <= k <= self.s):
                raise GraphError(f"edge {e} references a state outside 1..{self.s}")
            if i == k:
                raise GraphError(f"self-loop {e} is not allowed")
        if self.labels and len(self.labels) != self.s:
            raise GraphError("labels must name every state")
        if not self.absorbing:
            raise GraphError("graph has no absorbing state")
        absorbing = set(self.absorbing)
        for i in range(1, self.s + 1):
            if i in absorbing:
                continue
            if not (self.reachable_from(i) & absorbing):
                raise GraphError(f"state {i} cannot reach an absorbing state")

    @property
    def states(self) -> range:
        return range(1, self.s + 1)

    @property
    def absorbing(self) -> tuple:
        out = {i for i, _ in self.edges}
        return tuple(i for i in self.states if i not in out)

    def is_absorbing(self, i: int) -> bool:
        return not self.successors(i)

    def successors(self, i: int) -> tuple:
        return tuple(sorted(k for (a, k) in self.edges if a == i))

    def has_edge(self, i: int, k: int) -> bool:
        return (i, k) in self.edges

    def sorted_edges(self) -> list:
        return sorted(self.edges)

    def reachable_from(self, i: int) -> set:
        seen = {i}
        queue = deque([i])
        while queue:
            a = queue.popleft()
            for b in self.successors(a):
                if b not in seen:
                    seen.add(b)
                    queue.append(b)
        return seen

    def shortest_path(self, a: int, b: int) -> list | None:
        """States visited on a shortest directed path from ``a`` to ``b``."""
        if a == b:
            return [a]
        prev = {a: None}
        queue = deque([a])
        while queue:
            x = queue.popleft()
            for y in self.successors(x):
                if y in prev:
                    continue
                prev[y] = x
                if y == b:
                    path = [y]
                    while prev[path[-1]] is not None:
                        path.append(prev[path[-1]])
                    return path[::-1]
                queue.append(y)
        return None

    def label(self, i: int) -> str:
        return self.labels[i - 1] if self.labels else str(i)


def _graph(s, edges, labels=(), name="custom") -> TransitionGraph:
    return TransitionGraph(s, frozenset((int(a), int(b)) for a, b in edges), tuple(labels), name)


def _comorbidity(n_conditions: int) -> TransitionGraph:
    # state = bitmask of acquired conditions + 1; the last state is death
    n_sets = 2 ** n_conditions
    dead = n_sets + 1
    edges = []
    labels = []
    for mask in range(n_sets):
        have = [k + 1 for k in range(n_conditions) if mask >> k & 1]
        labels.append("{" + ",".join(map(str, have)) + "}")
        for k in range(n_conditions):
            if not mask >> k & 1:
                edges.append((mask + 1, (mask | 1 << k) + 1))
        edges.append((mask + 1, dead))
    labels.append("Dead")
    return _graph(dead, edges, labels, f"comorbidity({n_conditions})")


def _competing_risks(n_causes: int) -> TransitionGraph:
    edges = [(1, k + 2) for k in range(n_causes)]
    labels = ["Alive"] + [f"Cause{k + 1}" for k in range(n_causes)]
    return _graph(n_causes + 1, edges, labels, f"competing_risks({n_causes})")


BUILTINS = (
    "survival",
    "illness_death",
    "bidirectional_illness_death",
    "competing_risks(L)",
    "comorbidity(L)",
    "cav",
)

_PARAM_RE = re.compile(r"^(competing_risks|comorbidity)\s*[(:]\s*(\d+)\s*\)?$")


def build_graph(spec, s: int | None = None, labels: Sequence[str] = ()) -> TransitionGraph:
    """Build a validated graph from a builtin name or an explicit edge list.

    Parameterised builtins are written ``competing_risks(3)`` or
    ``comorbidity:2``. An edge list needs ``s`` unless it can be inferred from
    the largest state index.
    """
    if isinstance(spec, TransitionGraph):
        return spec
    if isinstance(spec, str):
        name = spec.strip().lower()
        if name == "survival":
            return _graph(2, [(1, 2)], ("Alive", "Dead"), name)
        if name == "illness_death":
            return _graph(3, [(1, 2), (1, 3), (2, 3)], ("Healthy", "Ill", "Dead"), name)
        if name == "bidirectional_illness_death":
            return _graph(3, [(1, 2), (2, 1), (1, 3), (2, 3)], ("Healthy", "Ill", "Dead"), name)
        if name == "cav":
            edges = [(1, 2), (2, 1), (2, 3), (3, 2), (1, 4), (2, 4), (3, 4)]
            return _graph(4, edges, ("NoCAV", "Mild", "Severe", "Dead"), name)
        m = _PARAM_RE.match(name)
        if m:
            size = int(m.group(2))
            if size < 1:
                raise GraphError(f"{m.group(1)} needs at least one component")
            if m.group(1) == "competing_risks":
                return _competing_risks(size)
            if size > 10:
                raise GraphError("comorbidity graphs are limited to 10 conditions")
            return _comorbidity(size)
        raise GraphError(f"unknown builtin graph {spec!r}; choose from {', '.join(BUILTINS)}")
    edges = []
    for e in spec:
        if len(e) != 2:
            raise GraphError(f"malformed edge {e!r}")
        edges.append((int(e[0]), int(e[1])))
    if s is None:
        s = max((max(e) for e in edges), default=0)
    return _graph(s, edges, labels)


@dataclass(frozen=True)
class Partition:
    blocks: tuple
    representatives: tuple = ()

    def __post_init__(self):
        blocks = tuple(tuple(sorted(int(i) for i in b)) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not self.representatives:
            object.__setattr__(self, "representatives", tuple(b[0] for b in blocks if b))
        else:
            object.__setattr__(self, "representatives", tuple(int(i) for i in self.representatives))
        if any(len(b) == 0 for b in blocks):
            raise GraphError("partition blocks must be non-empty")
        if len(self.representatives) != len(blocks):
            raise GraphError("need exactly one representative per block")
        for b, rep in zip(blocks, self.representatives):
            if rep not in b:
                raise GraphError(f"representative {rep} is not in block {b}")

    @classmethod
    def singletons(cls, s: int) -> "Partition":
        return cls(tuple((i,) for i in range(1, s + 1)))

    def block_of(self, i: int) -> int:
        """1-based index of the block containing state ``i``."""
        for j, b in enumerate(self.blocks, start=1):
            if i in b:
                return j
        raise GraphError(f"state {i} is not covered by the partition")


@dataclass(frozen=True)
class PairSpec:
    """Cross-edge structure of one ordered block pair ``(j, j')``."""

    key: tuple
    sources: tuple
    edges: tuple
    reference: int
    dests: dict = field(hash=False, compare=False, default_factory=dict)


@dataclass(frozen=True)
class BlockStructure:
    """Validation report: a graph, a partition and every block pair's edges."""

    graph: TransitionGraph
    partition: Partition
    pairs: tuple
    edge_pair: dict = field(hash=False, compare=False, default_factory=dict)

    @property
    def s(self) -> int:
        return self.graph.s

    def pair(self, key) -> PairSpec:
        for p in self.pairs:
            if p.key == tuple(key):
                return p
        raise KeyError(f"block pair {key} has no cross edges")

    def pair_index(self, key) -> int:
        for n, p in enumerate(self.pairs):
            if p.key == tuple(key):
                return n
        raise KeyError(f"block pair {key} has no cross edges")

    def summary(self) -> str:
        lines = [f"graph {self.graph.name}: s={self.s}, absorbing={list(self.graph.absorbing)}"]
        for j, b in enumerate(self.partition.blocks, start=1):
            lines.append(f"  B{j} = {list(b)} (representative {self.partition.representatives[j - 1]})")
        for p in self.pairs:
            lines.append(f"  pair {p.key}: sources {list(p.sources)}, edges {list(p.edges)}, gamma fixed at {p.reference}")
        return "\n".join(lines)


def validate(graph: TransitionGraph, partition: Partition | None = None) -> BlockStructure:
    """Check a partition against a graph and tabulate cross edges per block pair.

    The log-risk fixed at 1 belongs to the block representative when it is a
    source for the pair, otherwise to the lowest-numbered source.
    """
    if partition is None:
        partition = Partition.singletons(graph.s)
    covered = [i for b in partition.blocks for i in b]
    if sorted(covered) != list(graph.states):
        raise GraphError(f"partition must cover states 1..{graph.s} exactly once, got {sorted(covered)}")
    absorbing = set(graph.absorbing)
    for b in partition.blocks:
        kinds = {i in absorbing for i in b}
        if len(kinds) > 1:
            raise GraphError(f"block {list(b)} mixes absorbing and non-absorbing states")
    block = {i: partition.block_of(i) for i in graph.states}
    grouped: dict = {}
    for i, k in graph.sorted_edges():
        grouped.setdefault((block[i], block[k]), []).append((i, k))
    pairs = []
    edge_pair = {}
    for key in sorted(grouped):
        edges = tuple(grouped[key])
        sources = tuple(sorted({i for i, _ in edges}))
        rep = partition.representatives[key[0] - 1]
        reference = rep if rep in sources else sources[0]
        dests = {l: tuple(m for a, m in edges if a == l) for l in sources}
        pairs.append(PairSpec(key, sources, edges, reference, dests))
        for e in edges:
            edge_pair[e] = len(pairs) - 1
    return BlockStructure(graph, partition, tuple(pairs), edge_pair)


def configuration_of(states: Iterable[int], s: int) -> np.ndarray:
    """Count units per state; entry ``i-1`` holds the number in state ``i``."""
    y = np.asarray(list(states), dtype=np.int64)
    if y.size and (y.min() < 1 or y.max() > s):
        raise ValueError(f"states must lie in 1..{s}")
    return np.bincount(y - 1, minlength=s).astype(np.int64) if y.size else np.zeros(s, dtype=np.int64)

