"""Random DAG wiring, path enumeration and betweenness-based path ranking.

Generated graphs are undirected Erdős–Rényi or Watts–Strogatz samples oriented
from lower to higher node index, so every generated edge ``(i, j)`` has
``i < j``. Hand-built topologies may use any acyclic labelling.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, CogniSNNError, FormatError, InvalidArgumentError

DEFAULT_PATH_CAP = 1_000_000
MAX_REGENERATIONS = 100


class ConsistencyError(CogniSNNError):
    """A score map does not cover a path it is asked to score."""


@dataclass(frozen=True)
class DagTopology:
    n: int
    edges: tuple[tuple[int, int], ...]
    generator: str = "CUSTOM"
    seed: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError(f"topology needs at least one node, got {self.n}")
        edges = tuple(sorted({(int(i), int(j)) for i, j in self.edges}))
        if len(edges) != len(self.edges):
            raise InvalidArgumentError("duplicate edges in topology")
        for i, j in edges:
            if not (0 <= i < self.n and 0 <= j < self.n) or i == j:
                raise InvalidArgumentError(f"invalid edge ({i}, {j}) for {self.n} nodes")
        object.__setattr__(self, "edges", edges)
        if len(self.topological_order()) != self.n:
            raise InvalidArgumentError("edge set contains a cycle")

    @cached_property
    def predecessors(self) -> dict[int, tuple[int, ...]]:
        preds: dict[int, list[int]] = {v: [] for v in range(self.n)}
        for i, j in self.edges:
            preds[j].append(i)
        return {v: tuple(sorted(p)) for v, p in preds.items()}

    @cached_property
    def successors(self) -> dict[int, tuple[int, ...]]:
        succ: dict[int, list[int]] = {v: [] for v in range(self.n)}
        for i, j in self.edges:
            succ[i].append(j)
        return {v: tuple(sorted(s)) for v, s in succ.items()}

    @property
    def sources(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.n) if not self.predecessors[v])

    @property
    def sinks(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.n) if not self.successors[v])

    def topological_order(self) -> list[int]:
        """Kahn's algorithm, always releasing the smallest ready node first."""
        indeg = [0] * self.n
        succ: dict[int, list[int]] = {v: [] for v in range(self.n)}
        for i, j in self.edges:
            indeg[j] += 1
            succ[i].append(j)
        ready = [v for v in range(self.n) if indeg[v] == 0]
        order: list[int] = []
        while ready:
            ready.sort()
            v = ready.pop(0)
            order.append(v)
            for w in succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    ready.append(w)
        return order

    def relabel(self, mapping: Sequence[int]) -> "DagTopology":
        """Same structure with node ``v`` renamed ``mapping[v]``."""
        if sorted(mapping) != list(range(self.n)):
            raise InvalidArgumentError("relabel mapping must be a permutation of the node ids")
        return DagTopology(self.n, tuple((mapping[i], mapping[j]) for i, j in self.edges),
                           self.generator, self.seed)

    def to_text(self) -> str:
        lines = [f"N {self.n}"]
        lines += [f"E {i} {j}" for i, j in self.edges]
        lines.append(f"SEED {'none' if self.seed is None else self.seed}")
        lines.append(f"GEN {self.generator}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DagTopology":
        n = None
        edges: list[tuple[int, int]] = []
        seed = None
        generator = "CUSTOM"
        for lineno, raw in enumerate(text.splitlines(), start=1):
            parts = raw.split()
            if not parts:
                continue
            try:
                key = parts[0]
                if key == "N" and len(parts) == 2:
                    n = int(parts[1])
                elif key == "E" and len(parts) == 3:
                    edges.append((int(parts[1]), int(parts[2])))
                elif key == "SEED" and len(parts) == 2:
                    seed = None if parts[1] == "none" else int(parts[1])
                elif key == "GEN" and len(parts) >= 2:
                    generator = raw.split(None, 1)[1].strip()
                else:
                    raise FormatError(f"unrecognized topology line {raw!r}", lineno)
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"bad number in topology line {raw!r}", lineno) from exc
        if n is None:
            raise FormatError("topology text has no 'N' header", 0)
        try:
            return cls(n, tuple(edges), generator, seed)
        except InvalidArgumentError as exc:
            raise FormatError(str(exc), 0) from exc


def chain(n: int) -> DagTopology:
    return DagTopology(n, tuple((i, i + 1) for i in range(n - 1)), "CHAIN")


def orient(n: int, undirected: Iterable[tuple[int, int]], generator: str, seed: int | None) -> DagTopology:
    """Point every edge from lower to higher index and re-attach isolated nodes."""
    edges = {(min(a, b), max(a, b)) for a, b in undirected if a != b}
    touched = {v for e in edges for v in e}
    if n > 1:
        for v in range(n):
            if v not in touched:
                edges.add((v - 1, v) if v > 0 else (0, 1))
    return DagTopology(n, tuple(sorted(edges)), generator, seed)


def generate_er(n: int, p: float, seed: int) -> DagTopology:
    if n < 2:
        raise InvalidArgumentError(f"ER generator needs n >= 2, got {n}")
    if not 0 < p <= 1:
        raise InvalidArgumentError(f"ER edge probability must lie in (0, 1], got {p}")
    for attempt in range(MAX_REGENERATIONS):
        rng = np.random.default_rng(seed + attempt)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        draws = rng.random(len(pairs))
        edges = [pair for pair, u in zip(pairs, draws) if u < p]
        if edges:
            return orient(n, edges, f"ER(p={p!r})", seed + attempt)
    raise InvalidArgumentError(f"ER({n}, {p}) produced no edges in {MAX_REGENERATIONS} attempts")


def generate_ws(n: int, k: int, p_rewire: float, seed: int) -> DagTopology:
    if not (n > k >= 2 and k % 2 == 0):
        raise InvalidArgumentError(f"WS generator needs n > k >= 2 with k even, got n={n}, k={k}")
    if not 0 <= p_rewire <= 1:
        raise InvalidArgumentError(f"rewiring probability must lie in [0, 1], got {p_rewire}")
    for attempt in range(MAX_REGENERATIONS):
        rng = np.random.default_rng(seed + attempt)
        adjacency: dict[int, set[int]] = {v: set() for v in range(n)}
        for u in range(n):
            for offset in range(1, k // 2 + 1):
                w = (u + offset) % n
                adjacency[u].add(w)
                adjacency[w].add(u)
        # rewire lattice edges ring by ring, keeping the u endpoint
        for offset in range(1, k // 2 + 1):
            for u in range(n):
                v = (u + offset) % n
                if v not in adjacency[u] or rng.random() >= p_rewire:
                    continue
                candidates = [w for w in range(n) if w != u and w not in adjacency[u]]
                if not candidates:
                    continue
                w = candidates[int(rng.integers(len(candidates)))]
                adjacency[u].discard(v)
                adjacency[v].discard(u)
                adjacency[u].add(w)
                adjacency[w].add(u)
        edges = [(u, w) for u in range(n) for w in adjacency[u] if u < w]
        if edges:
            return orient(n, edges, f"WS(k={k},p={p_rewire!r})", seed + attempt)
    raise InvalidArgumentError(f"WS({n}, {k}, {p_rewire}) produced no edges")


# --- paths -------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Path:
    nodes: tuple[int, ...]

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.nodes[:-1], self.nodes[1:]))

    @property
    def length(self) -> int:
        return len(self.nodes) - 1


def enumerate_paths(topology: DagTopology, cap: int = DEFAULT_PATH_CAP) -> list[Path]:
    """All source-to-sink paths, depth-first with ascending child order."""
    succ = topology.successors
    paths: list[Path] = []
    for source in topology.sources:
        stack = [(source,)]
        while stack:
            prefix = stack.pop()
            children = succ[prefix[-1]]
            if not children:
                paths.append(Path(prefix))
                if len(paths) > cap:
                    raise CapacityError(cap)
                continue
            for child in reversed(children):
                stack.append(prefix + (child,))
    return paths


# --- betweenness -------------------------------------------------------------

def _brandes(topology: DagTopology) -> tuple[dict[int, float], dict[tuple[int, int], float]]:
    """Unnormalized node and edge betweenness over all ordered pairs (unit lengths)."""
    succ = topology.successors
    node_score = dict.fromkeys(range(topology.n), 0.0)
    edge_score = dict.fromkeys(topology.edges, 0.0)
    for s in range(topology.n):
        order: list[int] = []
        preds: dict[int, list[int]] = {v: [] for v in range(topology.n)}
        sigma = dict.fromkeys(range(topology.n), 0)
        dist = dict.fromkeys(range(topology.n), -1)
        sigma[s], dist[s] = 1, 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = dict.fromkeys(range(topology.n), 0.0)
        for w in reversed(order):
            for v in preds[w]:
                share = sigma[v] / sigma[w] * (1.0 + delta[w])
                edge_score[(v, w)] += share
                delta[v] += share
            if w != s:
                node_score[w] += delta[w]
    return node_score, edge_score


def node_betweenness(topology: DagTopology) -> dict[int, float]:
    return _brandes(topology)[0]


def edge_betweenness(topology: DagTopology) -> dict[tuple[int, int], float]:
    return _brandes(topology)[1]


def path_betweenness(path: Path, node_scores: dict, edge_scores: dict) -> float:
    """Sum of the node scores plus the edge scores along ``path``."""
    try:
        terms = [node_scores[v] for v in path.nodes] + [edge_scores[e] for e in path.edges]
    except KeyError as exc:
        raise ConsistencyError(f"no betweenness score for {exc.args[0]!r} on path {path.nodes}") from exc
    return math.fsum(terms)


@dataclass(frozen=True)
class PathRanking:
    """Paths with scores, highest score first; equal scores in lexicographic node order."""

    paths: tuple[Path, ...]
    scores: tuple[float, ...]
    node_scores: dict = field(default_factory=dict, compare=False)
    edge_scores: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.paths)

    def to_text(self) -> str:
        lines = ["rank score nodes"]
        for rank, (path, score) in enumerate(zip(self.paths, self.scores), start=1):
            lines.append(f"{rank} {score!r} {'-'.join(map(str, path.nodes))}")
        return "\n".join(lines) + "\n"


def rank_paths(topology: DagTopology, cap: int = DEFAULT_PATH_CAP) -> PathRanking:
    nodes, edges = _brandes(topology)
    scored = [(path_betweenness(p, nodes, edges), p) for p in enumerate_paths(topology, cap)]
    scored.sort(key=lambda item: (-item[0], item[1].nodes))
    return PathRanking(tuple(p for _, p in scored), tuple(s for s, _ in scored), nodes, edges)


def select_critical_paths(ranking: PathRanking, k: int, similar: bool) -> list[Path]:
    """The ``k`` highest-scoring paths for similar tasks, else the ``k`` lowest."""
    if not 1 <= k <= len(ranking):
        raise InvalidArgumentError(f"K must lie in [1, {len(ranking)}], got {k}")
    if similar:
        return list(ranking.paths[:k])
    ascending = sorted(zip(ranking.scores, ranking.paths), key=lambda item: (item[0], item[1].nodes))
    return [p for _, p in ascending[:k]]

