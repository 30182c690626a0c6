"""Keypoint graphs, universe graphs and their product (assignment) graph."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import Delaunay, QhullError


class GraphError(ValueError):
    pass


Edge = tuple[int, int]


def _canonical(edges) -> list[Edge]:
    return sorted({(min(a, b), max(a, b)) for a, b in edges if a != b})


def _jitter_duplicates(points: np.ndarray, seed: int) -> np.ndarray:
    _, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    if np.all(counts == 1):
        return points
    rng = np.random.default_rng(seed)
    out = points.copy()
    seen: set[int] = set()
    for i, group in enumerate(inverse):
        if group in seen:
            out[i] += rng.uniform(-1e-9, 1e-9, size=points.shape[1])
        seen.add(group)
    return out


def _path_edges(points: np.ndarray) -> list[Edge]:
    order = np.lexsort(points.T[::-1])
    return _canonical(zip(order[:-1].tolist(), order[1:].tolist()))


def _simplex_edges(simplices: np.ndarray) -> list[Edge]:
    k = simplices.shape[1]
    edges = set()
    for a, b in combinations(range(k), 2):
        for i, j in zip(simplices[:, a].tolist(), simplices[:, b].tolist()):
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def delaunay_2d(points, seed: int = 0) -> list[Edge]:
    """Delaunay edges of a 2-D point set as sorted ``(i, j)`` pairs with ``i < j``.

    Two points give their single edge; an all-collinear set falls back to the
    path through the points in lexicographic coordinate order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GraphError(f"expected m x 2 coordinates, got {pts.shape}")
    m = len(pts)
    if m < 2:
        raise GraphError(f"need at least 2 points for a graph, got {m}")
    if m == 2:
        return [(0, 1)]
    pts = _jitter_duplicates(pts, seed)
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        return _path_edges(pts)
    try:
        tri = Delaunay(pts)
    except QhullError:
        return _path_edges(pts)
    return _simplex_edges(tri.simplices)


def edges_3d(points, seed: int = 0) -> list[Edge]:
    """Edges of the 3-D Delaunay tetrahedralisation.

    Coplanar input is triangulated in its best-fit plane instead.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GraphError(f"expected d x 3 coordinates, got {pts.shape}")
    d = len(pts)
    if d < 2:
        raise GraphError(f"need at least 2 points for a graph, got {d}")
    if d == 2:
        return [(0, 1)]
    pts = _jitter_duplicates(pts, seed)
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    planar = centered @ vt[:2].T
    if d < 4 or sv[2] <= 1e-9 * sv[0]:
        return delaunay_2d(planar, seed)
    try:
        tet = Delaunay(pts)
    except QhullError:
        return delaunay_2d(planar, seed)
    return _simplex_edges(tet.simplices)


@dataclass
class Graph2D:
    nodes: np.ndarray  # m x 2
    edges: list[Edge]

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        _validate(self.nodes, self.edges, 2)

    @property
    def node_attributes(self) -> np.ndarray:
        return self.nodes

    @property
    def edge_attributes(self) -> np.ndarray:
        """``n x 4`` rows of (lower-index endpoint, higher-index endpoint)."""
        return _edge_attributes(self.nodes, self.edges)

    @classmethod
    def from_points(cls, points, seed: int = 0) -> "Graph2D":
        return cls(points, delaunay_2d(points, seed))


@dataclass
class UniverseGraph3D:
    nodes: np.ndarray  # d x 3
    edges: list[Edge]

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        _validate(self.nodes, self.edges, 3)

    @property
    def node_attributes(self) -> np.ndarray:
        return self.nodes

    @property
    def edge_attributes(self) -> np.ndarray:
        return _edge_attributes(self.nodes, self.edges)

    @classmethod
    def from_points(cls, points, seed: int = 0) -> "UniverseGraph3D":
        return cls(points, edges_3d(points, seed))


def _validate(nodes: np.ndarray, edges: list[Edge], dim: int) -> None:
    if nodes.ndim != 2 or nodes.shape[1] != dim:
        raise GraphError(f"nodes must be n x {dim}, got {nodes.shape}")
    seen = set()
    n = len(nodes)
    for a, b in edges:
        if a == b:
            raise GraphError(f"self-loop at node {a}")
        if not (0 <= a < n and 0 <= b < n):
            raise GraphError(f"edge ({a}, {b}) out of range for {n} nodes")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise GraphError(f"duplicate edge {key}")
        seen.add(key)


def _edge_attributes(nodes: np.ndarray, edges: list[Edge]) -> np.ndarray:
    if not edges:
        return np.zeros((0, 2 * nodes.shape[1]))
    e = np.array([(min(a, b), max(a, b)) for a, b in edges])
    return np.hstack([nodes[e[:, 0]], nodes[e[:, 1]]])


@dataclass
class AssignmentGraph:
    """Product of a keypoint graph and a universe graph.

    Node ``p = i * d + k`` pairs keypoint ``i`` with universe point ``k``.
    Each undirected edge is stored once as ``(p, q)`` with ``p < q``;
    ``edge_pairs`` keeps the 2-D endpoints ``(i, j)`` and the universe
    endpoints ``(k, l)`` so that ``p = (i, k)`` and ``q = (j, l)``.
    """

    m: int
    d: int
    edges: np.ndarray  # n x 2 assignment node ids
    pairs_2d: np.ndarray  # n x 2 keypoint ids (i, j)
    pairs_3d: np.ndarray  # n x 2 universe ids (k, l), aligned with pairs_2d
    points_2d: np.ndarray  # m x 2
    points_3d: np.ndarray  # d x 3

    @property
    def n_nodes(self) -> int:
        return self.m * self.d

    @property
    def node_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.d)

    @property
    def node_cols(self) -> np.ndarray:
        return np.tile(np.arange(self.d), self.m)

    def index_map(self) -> np.ndarray:
        """``n_nodes x 2`` array of (row, column) of X for every node."""
        return np.stack([self.node_rows, self.node_cols], axis=1)

    @property
    def node_attributes(self) -> np.ndarray:
        """``m*d x 5`` rows ``(v_i, u_k)``."""
        return np.hstack([self.points_2d[self.node_rows], self.points_3d[self.node_cols]])

    @property
    def edge_attributes(self) -> np.ndarray:
        """``n x 10`` rows ``(v_i, v_j, u_k, u_l)``."""
        if len(self.edges) == 0:
            return np.zeros((0, 10))
        i, j = self.pairs_2d.T
        k, l = self.pairs_3d.T
        return np.hstack(
            [self.points_2d[i], self.points_2d[j], self.points_3d[k], self.points_3d[l]]
        )


def build_assignment_graph(g2: Graph2D, g3: UniverseGraph3D) -> AssignmentGraph:
    m, d = len(g2.nodes), len(g3.nodes)
    if m == 0 or d == 0:
        raise GraphError("assignment graph needs non-empty node sets")
    e2 = np.array(_canonical(g2.edges), dtype=np.intp).reshape(-1, 2)
    e3 = np.array(_canonical(g3.edges), dtype=np.intp).reshape(-1, 2)
    if len(e2) and len(e3):
        i = np.repeat(e2[:, 0], len(e3))
        j = np.repeat(e2[:, 1], len(e3))
        a = np.tile(e3[:, 0], len(e2))
        b = np.tile(e3[:, 1], len(e2))
        # every (2-D edge, 3-D edge) pair yields the straight and the crossed product edge
        pi = np.concatenate([i, i])
        pj = np.concatenate([j, j])
        pk = np.concatenate([a, b])
        pl = np.concatenate([b, a])
        edges = np.stack([pi * d + pk, pj * d + pl], axis=1)
    else:
        pi = pj = pk = pl = np.zeros(0, dtype=np.intp)
        edges = np.zeros((0, 2), dtype=np.intp)
    return AssignmentGraph(
        m=m,
        d=d,
        edges=edges,
        pairs_2d=np.stack([pi, pj], axis=1),
        pairs_3d=np.stack([pk, pl], axis=1),
        points_2d=g2.nodes,
        points_3d=g3.nodes,
    )
