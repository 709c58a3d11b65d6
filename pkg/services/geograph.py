"""Geometric graphs, k-hop neighborhoods, subset enumeration and the lattice
construction behind sum-pooling universality.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from math import comb
from typing import Iterator, Sequence

import numpy as np

from services.errors import ShapeError

logger = logging.getLogger(__name__)

PointSet = tuple[tuple[float, ...], ...]


@dataclass(frozen=True, eq=False)
class GeometricGraph:
    positions: np.ndarray  # (M, n)
    vector_features: np.ndarray  # (M, r, n)
    scalar_features: np.ndarray  # (M, s)
    edges: tuple[tuple[int, int], ...] = ()
    edge_attrs: np.ndarray | None = None  # (len(edges), e), aligned with edges

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ShapeError(f"positions must be (M, n), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ShapeError("positions must be finite")
        m, n = pos.shape
        vec = np.asarray(self.vector_features, dtype=np.float64)
        if vec.ndim == 2:
            vec = vec[:, None, :]
        if vec.ndim != 3 or vec.shape[0] != m or vec.shape[2] != n:
            raise ShapeError(f"vector features must be ({m}, r, {n}), got {vec.shape}")
        sca = np.asarray(self.scalar_features, dtype=np.float64)
        if sca.ndim == 1:
            sca = sca[:, None]
        if sca.ndim != 2 or sca.shape[0] != m:
            raise ShapeError(f"scalar features must be ({m}, s), got {sca.shape}")
        edges = []
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ShapeError(f"self-loop at node {a}")
            if not (0 <= a < m and 0 <= b < m):
                raise ShapeError(f"edge ({a}, {b}) outside {m} nodes")
            edges.append((min(a, b), max(a, b)))
        attrs = None
        if self.edge_attrs is not None:
            attrs = np.asarray(self.edge_attrs, dtype=np.float64)
            if attrs.ndim == 1:
                attrs = attrs[:, None]
            if attrs.shape[0] != len(edges):
                raise ShapeError(f"{attrs.shape[0]} edge attributes for {len(edges)} edges")
        order = sorted(range(len(edges)), key=edges.__getitem__)
        edges = [edges[i] for i in order]
        if len(set(edges)) != len(edges):
            raise ShapeError("duplicate edge")
        if attrs is not None:
            attrs = attrs[order]
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "vector_features", vec)
        object.__setattr__(self, "scalar_features", sca)
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "edge_attrs", attrs)

    @classmethod
    def complete(cls, positions, vector_features=None, scalar_features=None, edge_attrs=None) -> GeometricGraph:
        pos = np.asarray(positions, dtype=np.float64)
        m, n = pos.shape
        edges = tuple(itertools.combinations(range(m), 2))
        return cls(
            positions=pos,
            vector_features=np.zeros((m, 0, n)) if vector_features is None else vector_features,
            scalar_features=np.zeros((m, 0)) if scalar_features is None else scalar_features,
            edges=edges,
            edge_attrs=edge_attrs,
        )

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def num_vector_features(self) -> int:
        return self.vector_features.shape[1]

    @property
    def num_scalar_features(self) -> int:
        return self.scalar_features.shape[1]

    @property
    def edge_dim(self) -> int:
        return 0 if self.edge_attrs is None else self.edge_attrs.shape[1]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(nbrs) for nbrs in adj]

    def edge_lookup(self) -> dict[tuple[int, int], np.ndarray]:
        if self.edge_attrs is None:
            return {}
        out = {}
        for (a, b), attr in zip(self.edges, self.edge_attrs):
            out[(a, b)] = attr
            out[(b, a)] = attr
        return out

    def transformed(self, q: np.ndarray, g: np.ndarray | None = None) -> GeometricGraph:
        """Apply x -> Q x + g to positions and Q to vector features."""
        q = np.asarray(q, dtype=np.float64)
        shift = np.zeros(self.dim) if g is None else np.asarray(g, dtype=np.float64)
        return GeometricGraph(
            positions=self.positions @ q.T + shift,
            vector_features=self.vector_features @ q.T,
            scalar_features=self.scalar_features,
            edges=self.edges,
            edge_attrs=self.edge_attrs,
        )

    def permuted(self, perm: Sequence[int]) -> GeometricGraph:
        """Node i of the result is node perm[i] of this graph."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.shape[0])
        return GeometricGraph(
            positions=self.positions[perm],
            vector_features=self.vector_features[perm],
            scalar_features=self.scalar_features[perm],
            edges=tuple((int(inv[a]), int(inv[b])) for a, b in self.edges),
            edge_attrs=self.edge_attrs,
        )


@dataclass(frozen=True)
class NeighborhoodIndex:
    k: int
    lists: tuple[tuple[int, ...], ...] = field(default_factory=tuple)

    def __getitem__(self, i: int) -> tuple[int, ...]:
        return self.lists[i]

    def __len__(self) -> int:
        return len(self.lists)


def bfs_distances(adj: Sequence[Sequence[int]], source: int, max_depth: int | None = None) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if max_depth is not None and dist[u] >= max_depth:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def k_hop(graph: GeometricGraph, k: int) -> NeighborhoodIndex:
    if k < 1:
        raise ShapeError(f"hop radius must be >= 1, got {k}")
    adj = graph.adjacency()
    lists = []
    for i in range(graph.num_nodes):
        reach = bfs_distances(adj, i, max_depth=k)
        lists.append(tuple(sorted(j for j in reach if j != i)))
    return NeighborhoodIndex(k=k, lists=tuple(lists))


def diameter(graph: GeometricGraph) -> int:
    """Longest shortest path; disconnected pairs are ignored."""
    adj = graph.adjacency()
    return max((max(bfs_distances(adj, i).values()) for i in range(graph.num_nodes)), default=0)


def enumerate_subsets(neigh: Sequence[int], d: int, limit: int | None = None) -> Iterator[tuple[int, ...]]:
    """d-subsets of a sorted neighbor list in lexicographic order, truncated at limit."""
    if d < 1:
        raise ShapeError(f"subset order must be >= 1, got {d}")
    subsets = itertools.combinations(sorted(neigh), d)
    if limit is None:
        return subsets
    total = _binomial(len(neigh), d)
    if total > limit:
        logger.warning("truncating %d subsets of order %d to %d", total, d, limit)
    return itertools.islice(subsets, limit)


def _binomial(n: int, k: int) -> int:
    return comb(n, k) if 0 <= k <= n else 0


def as_point_set(points) -> PointSet:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    return tuple(sorted({tuple(float(c) for c in p) for p in pts}))


def hausdorff_distance(a, b) -> float:
    """max of both directed sup-inf distances under the infinity norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ShapeError("Hausdorff distance needs nonempty point sets")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    dist = np.max(np.abs(a[:, None, :] - b[None, :, :]), axis=-1)
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))


# ---------------------------------------------------------------------------
# lattice construction


def lattice_axis(resolution: int) -> np.ndarray:
    """The K equidistant values (2i - 1) / (2K) in [0, 1]."""
    if resolution < 1:
        raise ShapeError(f"resolution must be >= 1, got {resolution}")
    return (2.0 * np.arange(1, resolution + 1) - 1.0) / (2.0 * resolution)


def lattice_points(resolution: int, d: int) -> np.ndarray:
    """All K^d lattice points, lexicographic order, shape (K^d, d)."""
    axis = lattice_axis(resolution)
    return np.array(list(itertools.product(axis, repeat=d)), dtype=np.float64).reshape(-1, d)


def snap_to_lattice(z, resolution: int) -> np.ndarray:
    """Nearest lattice point of each row of z."""
    z = np.asarray(z, dtype=np.float64)
    idx = np.clip(np.floor(z * resolution), 0, resolution - 1)
    return (2.0 * idx + 1.0) / (2.0 * resolution)


def universality_bump(c, resolution: int, z) -> float:
    """delta_c(z): 1 at c, in (0, 1] inside the open inf-ball B(c, 1/(2K)), 0 outside."""
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    radius = 1.0 / (2.0 * resolution)
    depth = max(0.0, radius - float(np.max(np.abs(z - c))))
    return float(-np.expm1(-depth) / -np.expm1(-radius))


def universality_phi_m(z, resolution: int) -> np.ndarray:
    """Stack of delta_c(z) over every lattice point c."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    lattice = lattice_points(resolution, z.shape[0])
    radius = 1.0 / (2.0 * resolution)
    depth = np.maximum(0.0, radius - np.max(np.abs(lattice - z), axis=1))
    return -np.expm1(-depth) / -np.expm1(-radius)


def universality_tau(vec, resolution: int, d: int) -> PointSet:
    """Lattice points whose entry in vec is strictly positive."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    lattice = lattice_points(resolution, d)
    if vec.shape[0] != lattice.shape[0]:
        raise ShapeError(f"expected {lattice.shape[0]} lattice entries, got {vec.shape[0]}")
    return as_point_set(lattice[vec > 0])


def random_geometric_graph(rng: np.random.Generator, num_nodes: int, n: int, *, edge_prob: float = 0.5,
                           vector_features: int = 0, scalar_features: int = 0,
                           edge_dim: int = 0) -> GeometricGraph:
    edges = tuple(p for p in itertools.combinations(range(num_nodes), 2) if rng.random() < edge_prob)
    return GeometricGraph(
        positions=rng.standard_normal((num_nodes, n)),
        vector_features=rng.standard_normal((num_nodes, vector_features, n)),
        scalar_features=rng.standard_normal((num_nodes, scalar_features)),
        edges=edges,
        edge_attrs=rng.standard_normal((len(edges), edge_dim)) if edge_dim else None,
    )
