"""Cosine kNN graphs in biomarker space with Gaussian, row-normalized weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_zero_vector_warned = False


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class KnnGraph:
    """Directed kNN graph stored as fixed-width neighbor arrays.

    ``indices[i]`` lists the out-neighbors of node ``i`` in ascending
    distance order, ``raw_weights`` the Gaussian similarities and
    ``weights`` the row-normalized ones.  For a bipartite (query -> ref)
    graph ``n_targets`` differs from ``n_nodes`` and ``directed`` is still
    true; ``bipartite`` tells the two apart.
    """

    indices: np.ndarray
    distances: np.ndarray
    raw_weights: np.ndarray
    weights: np.ndarray
    k: int
    sigma: float
    n_targets: int
    bipartite: bool = False
    directed: bool = True

    @property
    def n_nodes(self) -> int:
        return self.indices.shape[0]

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        return [(int(j), float(p)) for j, p in zip(self.indices[i], self.weights[i])]

    def dense(self) -> np.ndarray:
        """Row-stochastic transition matrix (n_nodes x n_targets)."""
        out = np.zeros((self.n_nodes, self.n_targets))
        rows = np.repeat(np.arange(self.n_nodes), self.indices.shape[1])
        out[rows, self.indices.ravel()] = self.weights.ravel()
        return out


@dataclass(frozen=True)
class SymmetricGraph:
    """Undirected edge list ``(u, v, weight)`` with ``u < v``."""

    edges: list[tuple[int, int, float]]
    n_nodes: int

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.edges:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        u, v, w = zip(*self.edges)
        return np.asarray(u, int), np.asarray(v, int), np.asarray(w, float)


def _warn_zero_vector() -> None:
    global _zero_vector_warned
    if not _zero_vector_warned:
        log.warning("zero biomarker vector encountered; using cosine distance 1 for its pairs")
        _zero_vector_warned = True


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos(a, b)``; a zero vector is treated as orthogonal to everything."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise GraphError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        _warn_zero_vector()
        return 1.0
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 2.0))


def cosine_distance_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if (nx == 0).any() or (ny == 0).any():
        _warn_zero_vector()
    ux = np.divide(x, nx[:, None], out=np.zeros_like(x), where=nx[:, None] > 0)
    uy = np.divide(y, ny[:, None], out=np.zeros_like(y), where=ny[:, None] > 0)
    return np.clip(1.0 - ux @ uy.T, 0.0, 2.0)


def gaussian_weight(d, sigma: float):
    if not sigma > 0:
        raise GraphError(f"sigma must be positive, got {sigma}")
    return np.exp(-np.square(d) / sigma**2)


# distances are ranked on this grid so that pairs at the same true distance
# tie exactly however their last bits were rounded
TIE_SCALE = 1e12


def rank_key(dist: np.ndarray) -> np.ndarray:
    return np.round(dist * TIE_SCALE)


def _select(dist: np.ndarray, k: int, sigma: float, n_targets: int, bipartite: bool) -> KnnGraph:
    # stable sort: equal keys keep ascending target index
    order = np.argsort(rank_key(dist), axis=1, kind="stable")[:, :k]
    d = np.take_along_axis(dist, order, axis=1)
    w = gaussian_weight(d, sigma)
    p = w / w.sum(axis=1, keepdims=True)
    return KnnGraph(
        indices=order,
        distances=d,
        raw_weights=w,
        weights=p,
        k=k,
        sigma=float(sigma),
        n_targets=n_targets,
        bipartite=bipartite,
    )


def build_knn_graph(points: np.ndarray, k: int, sigma: float) -> KnnGraph:
    """Each node links to its ``k`` cosine-nearest other nodes (exact search)."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n < 2:
        raise GraphError("need at least 2 nodes")
    if not 1 <= k <= n - 1:
        raise GraphError(f"k must lie in [1, {n - 1}], got {k}")
    gaussian_weight(0.0, sigma)
    dist = cosine_distance_matrix(points, points)
    np.fill_diagonal(dist, np.inf)
    return _select(dist, k, sigma, n, bipartite=False)


def build_cross_knn(queries: np.ndarray, refs: np.ndarray, k: int, sigma: float) -> KnnGraph:
    """Link each query row to its ``k`` cosine-nearest reference rows."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    r = refs.shape[0]
    if not 1 <= k <= r:
        raise GraphError(f"k must lie in [1, {r}], got {k}")
    gaussian_weight(0.0, sigma)
    dist = cosine_distance_matrix(queries, refs)
    return _select(dist, k, sigma, r, bipartite=True)


def symmetrize(g: KnnGraph, use_normalized: bool = False) -> SymmetricGraph:
    """Union of directed edges; a pair present both ways keeps the larger weight.

    By default the pre-normalization Gaussian weight is used, which is
    symmetric in the endpoints.  ``use_normalized`` switches to the
    row-normalized weights instead.
    """
    if g.bipartite:
        raise GraphError("cannot symmetrize a bipartite graph")
    source = g.weights if use_normalized else g.raw_weights
    best: dict[tuple[int, int], float] = {}
    for i in range(g.n_nodes):
        for j, w in zip(g.indices[i], source[i]):
            key = (i, int(j)) if i < j else (int(j), i)
            w = float(w)
            if w > best.get(key, -np.inf):
                best[key] = w
    edges = [(u, v, w) for (u, v), w in sorted(best.items()) if w > 0]
    return SymmetricGraph(edges=edges, n_nodes=g.n_nodes)


def write_graph(path: str | Path, g: KnnGraph) -> None:
    """Text export: header ``n,k,sigma,directed`` then ``src,dst,weight`` lines."""
    lines = [f"{g.n_nodes},{g.k},{g.sigma:.9g},{int(g.directed)}"]
    for i in range(g.n_nodes):
        lines.extend(f"{i},{int(j)},{p:.9g}" for j, p in zip(g.indices[i], g.weights[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph_edges(path: str | Path) -> tuple[dict[str, float], list[tuple[int, int, float]]]:
    """Parse a graph export into its header fields and edge triples."""
    lines = Path(path).read_text(encoding="utf-8").split()
    n, k, sigma, directed = lines[0].split(",")
    header = {"n": int(n), "k": int(k), "sigma": float(sigma), "directed": bool(int(directed))}
    edges = []
    for line in lines[1:]:
        s, d, w = line.split(",")
        edges.append((int(s), int(d), float(w)))
    return header, edges
