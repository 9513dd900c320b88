"""Static topology, per-node load vectors, the on-disk graph format and
deterministic generators."""

from __future__ import annotations

import enum
import pathlib
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

from .errors import InvalidParameter, ParseError, ValidationError

Load = Union[int, Fraction]


class LoadMode(enum.Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


def _bfs_distances(adjacency, source):
    dist = [-1] * len(adjacency)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@dataclass(frozen=True)
class Graph:
    """Undirected, connected, simple graph on nodes ``0..node_count-1``.

    Adjacency lists are sorted ascending; the diameter is computed once at
    construction since topology never changes.
    """

    node_count: int
    adjacency: tuple[tuple[int, ...], ...]
    diameter: int = field(init=False, compare=False)

    def __post_init__(self):
        if self.node_count < 1 or len(self.adjacency) != self.node_count:
            raise ValidationError("adjacency does not match node_count")
        for u, nbrs in enumerate(self.adjacency):
            if list(nbrs) != sorted(set(nbrs)):
                raise ValidationError(f"adjacency of {u} is not sorted/unique")
            for v in nbrs:
                if not 0 <= v < self.node_count:
                    raise ValidationError(f"node id {v} out of range")
                if v == u:
                    raise ValidationError(f"self-loop at node {u}")
                if u not in self.adjacency[v]:
                    raise ValidationError(f"edge {u}-{v} is not symmetric")
        object.__setattr__(self, "diameter", diameter(self))

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        if node_count < 1:
            raise ValidationError("graph needs at least one node")
        nbrs: list[set[int]] = [set() for _ in range(node_count)]
        for u, v in edges:
            if not (0 <= u < node_count and 0 <= v < node_count):
                raise ValidationError(f"edge {u} {v} references unknown node")
            if u == v:
                raise ValidationError(f"self-loop at node {u}")
            if v in nbrs[u]:
                raise ValidationError(f"duplicate edge {u} {v}")
            nbrs[u].add(v)
            nbrs[v].add(u)
        return cls(node_count, tuple(tuple(sorted(s)) for s in nbrs))

    def neighbors(self, u: int) -> tuple[int, ...]:
        return self.adjacency[u]

    def edges(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as ``(u, v)`` with ``u < v``."""
        return [(u, v) for u in range(self.node_count) for v in self.adjacency[u] if u < v]

    def directed_edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u in range(self.node_count) for v in self.adjacency[u]]


def diameter(g: Graph) -> int:
    """Exact maximum eccentricity via BFS from every node.

    Raises ValidationError when the graph is disconnected.
    """
    best = 0
    for s in range(g.node_count):
        dist = _bfs_distances(g.adjacency, s)
        if min(dist) < 0:
            raise ValidationError("graph is not connected")
        best = max(best, max(dist))
    return best


@dataclass(frozen=True)
class LoadVector:
    mode: LoadMode
    values: tuple

    def __post_init__(self):
        vals = []
        for i, x in enumerate(self.values):
            if self.mode is LoadMode.DISCRETE:
                if isinstance(x, Fraction):
                    if x.denominator != 1:
                        raise ValidationError(f"non-integer discrete load at node {i}")
                    x = int(x)
                if isinstance(x, bool) or not isinstance(x, int):
                    raise ValidationError(f"discrete load at node {i} must be an int")
            else:
                if isinstance(x, float):
                    raise ValidationError("continuous loads must be exact (int or Fraction)")
                x = Fraction(x)
            if x < 0:
                raise ValidationError(f"negative load at node {i}")
            vals.append(x)
        object.__setattr__(self, "values", tuple(vals))

    @classmethod
    def discrete(cls, values: Iterable[int]) -> "LoadVector":
        return cls(LoadMode.DISCRETE, tuple(values))

    @classmethod
    def continuous(cls, values: Iterable[Load]) -> "LoadVector":
        return cls(LoadMode.CONTINUOUS, tuple(values))

    def replace(self, values: Iterable[Load]) -> "LoadVector":
        return LoadVector(self.mode, tuple(values))

    def total(self) -> Load:
        return sum(self.values, Fraction(0) if self.mode is LoadMode.CONTINUOUS else 0)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)


# --------------------------------------------------------------------- file I/O


def _format_load(x: Load) -> str:
    if isinstance(x, Fraction) and x.denominator != 1:
        return f"{x.numerator}/{x.denominator}"
    return str(int(x))


def serialize(g: Graph, loads: LoadVector) -> str:
    lines = [f"n {g.node_count}", f"mode {loads.mode.value}"]
    lines += [f"node {i} {_format_load(x)}" for i, x in enumerate(loads)]
    lines += [f"edge {u} {v}" for u, v in g.edges()]
    return "\n".join(lines) + "\n"


def _parse_load(tok: str, line_no: int) -> Load:
    try:
        if "/" in tok:
            num, den = tok.split("/")
            return Fraction(int(num), int(den))
        return int(tok)
    except (ValueError, ZeroDivisionError):
        raise ParseError(f"bad load value {tok!r}", line_no) from None


def parse_graph(text: str, mode: LoadMode | None = None) -> tuple[Graph, LoadVector]:
    """Parse the line-oriented graph format.

    ``mode`` overrides the optional ``mode`` header; without either, the
    vector is continuous iff some load is written as ``p/q``.
    """
    n = None
    declared_mode = None
    loads: dict[int, Load] = {}
    edges: list[tuple[int, int]] = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        key, args = toks[0], toks[1:]
        try:
            if key == "n" and len(args) == 1:
                if n is not None:
                    raise ParseError("repeated 'n' line", line_no)
                n = int(args[0])
            elif key == "mode" and len(args) == 1:
                declared_mode = LoadMode(args[0])
            elif key == "node" and len(args) == 2:
                idx = int(args[0])
                if idx in loads:
                    raise ValidationError(f"node {idx} declared twice")
                loads[idx] = _parse_load(args[1], line_no)
            elif key == "edge" and len(args) == 2:
                edges.append((int(args[0]), int(args[1])))
            else:
                raise ParseError(f"unrecognised line {raw.strip()!r}", line_no)
        except ValueError as exc:
            if isinstance(exc, InvalidParameter):
                raise
            raise ParseError(str(exc), line_no) from None
    if n is None:
        raise ParseError("missing 'n' line")
    if sorted(loads) != list(range(n)):
        raise ValidationError("node ids must be exactly 0..n-1")
    mode = mode or declared_mode
    values = [loads[i] for i in range(n)]
    if mode is None:
        has_fraction = any(isinstance(x, Fraction) for x in values)
        mode = LoadMode.CONTINUOUS if has_fraction else LoadMode.DISCRETE
    lv = LoadVector(mode, tuple(values))
    return Graph.from_edges(n, edges), lv


def load_graph(path, mode: LoadMode | None = None) -> tuple[Graph, LoadVector]:
    return parse_graph(pathlib.Path(path).read_text(), mode)


def save_graph(path, g: Graph, loads: LoadVector) -> None:
    pathlib.Path(path).write_text(serialize(g, loads))


# ------------------------------------------------------------------ generators


@dataclass(frozen=True)
class Path:
    n: int


@dataclass(frozen=True)
class Cycle:
    n: int


@dataclass(frozen=True)
class Star:
    n: int


@dataclass(frozen=True)
class RandomConnected:
    n: int
    edge_prob: float
    seed: int


@dataclass(frozen=True)
class Uniform:
    max: int
    seed: int


@dataclass(frozen=True)
class Explicit:
    values: Sequence[Load]


@dataclass(frozen=True)
class PointMass:
    node: int
    amount: Load
    base: Load = 0


_SEED_MASK = (1 << 64) - 1


def _topology(kind) -> Graph:
    n = kind.n
    if n < 2:
        raise InvalidParameter("generators need n >= 2")
    if isinstance(kind, Path):
        return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])
    if isinstance(kind, Cycle):
        if n < 3:
            raise InvalidParameter("a simple cycle needs n >= 3")
        return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])
    if isinstance(kind, Star):
        return Graph.from_edges(n, [(0, i) for i in range(1, n)])
    if isinstance(kind, RandomConnected):
        if not 0.0 <= kind.edge_prob <= 1.0:
            raise InvalidParameter("edge_prob must lie in [0, 1]")
        rng = random.Random(kind.seed & _SEED_MASK)
        edges = {(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < kind.edge_prob}
        # Augment: join components in order of their smallest member.
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for u, v in edges:
            parent[find(u)] = find(v)
        roots = sorted({find(x) for x in range(n)}, key=lambda r: min(i for i in range(n) if find(i) == r))
        members = {r: [i for i in range(n) if find(i) == r] for r in roots}
        for a, b in zip(roots, roots[1:]):
            u = rng.choice(members[a])
            v = rng.choice(members[b])
            edges.add((min(u, v), max(u, v)))
        return Graph.from_edges(n, sorted(edges))
    raise InvalidParameter(f"unknown topology {kind!r}")


def generate(kind, load_init, mode: LoadMode = LoadMode.DISCRETE) -> tuple[Graph, LoadVector]:
    """Build a graph and its initial loads deterministically."""
    g = _topology(kind)
    n = g.node_count
    if isinstance(load_init, Uniform):
        if load_init.max < 0:
            raise InvalidParameter("Uniform max must be >= 0")
        rng = random.Random(load_init.seed & _SEED_MASK)
        values = [rng.randint(0, load_init.max) for _ in range(n)]
    elif isinstance(load_init, Explicit):
        values = list(load_init.values)
        if len(values) != n:
            raise InvalidParameter(f"expected {n} explicit loads, got {len(values)}")
    elif isinstance(load_init, PointMass):
        if not 0 <= load_init.node < n:
            raise InvalidParameter("PointMass node out of range")
        values = [load_init.base] * n
        values[load_init.node] = load_init.amount
    else:
        raise InvalidParameter(f"unknown load init {load_init!r}")
    try:
        return g, LoadVector(mode, tuple(values))
    except ValidationError as exc:
        raise InvalidParameter(str(exc)) from None


def path_fixture(n: int) -> list[int]:
    """Loads ``0,1,1,2,2,...,n-1,n-1,n`` for a path of 2n nodes."""
    return [0] + [i for i in range(1, n) for _ in (0, 1)] + [n]
