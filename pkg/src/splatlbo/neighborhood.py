"""Mutual k-nearest-neighbor graphs over splat centers and outlier filtering.

Two metrics are supported. ``"euclidean"`` ranks candidates by the distance
between centers. ``"mahalanobis"`` ranks the candidates of splat ``i`` by
the Mahalanobis distance of each candidate *center* to the distribution of
splat ``i``. The resulting directed lists are not symmetric; an undirected
edge is kept only when both endpoints list each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .splat_io import GaussianSplat, SplatSet, covariance_of, covariances

logger = logging.getLogger(__name__)

METRICS = ("mahalanobis", "euclidean")
CHOLESKY_EPS = 1e-9
FLAT_RATIO = 1e4
BRUTE_FORCE_BELOW = 2000


class NeighborhoodError(ValueError):
    pass


def _regularized_cholesky(cov):
    """Lower Cholesky factor; retries once with eps*tr/3 added to the diagonal."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    reg = cov + CHOLESKY_EPS * np.trace(cov) / 3.0 * np.eye(3)
    try:
        return np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise NeighborhoodError("covariance is singular even after regularization") from None


def cholesky_factors(splats: SplatSet) -> np.ndarray:
    """Lower Cholesky factors of all splat covariances, shape (n, 3, 3).

    Near-flat splats (scale ratio above 1e4) are regularized up front the
    same way a failed factorization is.
    """
    covs = covariances(splats)
    ratio = splats.scales.max(axis=1) / splats.scales.min(axis=1)
    flat = ratio > FLAT_RATIO
    if np.any(flat):
        tr = np.trace(covs[flat], axis1=1, axis2=2)
        covs[flat] += (CHOLESKY_EPS * tr / 3.0)[:, None, None] * np.eye(3)
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        return np.stack([_regularized_cholesky(c) for c in covs])


def mahalanobis_distance(p, splat: GaussianSplat) -> float:
    """sqrt((p - mu)^T Sigma^-1 (p - mu)) through a Cholesky solve."""
    L = _regularized_cholesky(covariance_of(splat))
    z = linalg.solve_triangular(L, np.asarray(p, dtype=float) - splat.mean, lower=True)
    return float(np.sqrt(z @ z))


def _distances_to_all(i, points, chol, metric, candidates=None):
    pts = points if candidates is None else points[candidates]
    diff = pts - points[i]
    if metric == "euclidean":
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    z = linalg.solve_triangular(chol[i], diff.T, lower=True, check_finite=False)
    return np.sqrt(np.einsum("ij,ij->j", z, z))


def _select_k(idx, dist, k):
    # k smallest by (distance, index)
    order = np.lexsort((idx, dist))[:k]
    return idx[order], dist[order]


class _KnnSearch:
    """Shared state for repeated kNN queries over one splat set."""

    def __init__(self, splats, k, metric, brute_force_below=BRUTE_FORCE_BELOW):
        if metric not in METRICS:
            raise NeighborhoodError(f"unknown metric {metric!r}")
        n = len(splats)
        if k < 1 or k >= n:
            raise NeighborhoodError(f"k={k} must satisfy 1 <= k < n={n}")
        self.points = np.asarray(splats.means)
        self.k = k
        self.metric = metric
        self.chol = cholesky_factors(splats) if metric == "mahalanobis" else None
        self.brute = n < brute_force_below
        self.tree = None if self.brute else cKDTree(self.points)
        if metric == "mahalanobis":
            # largest standard deviation of each (possibly regularized) factor
            self.max_std = np.sqrt(np.linalg.eigvalsh(self.chol @ np.swapaxes(self.chol, 1, 2))[:, -1])

    def query(self, i):
        if self.brute:
            return self._query_brute(i)
        return self._query_tree(i)

    def _query_brute(self, i):
        d = _distances_to_all(i, self.points, self.chol, self.metric)
        d[i] = np.inf
        kth = np.partition(d, self.k - 1)[self.k - 1]
        cand = np.flatnonzero(d <= kth)
        return _select_k(cand, d[cand], self.k)

    def _query_tree(self, i):
        n = len(self.points)
        m = min(self.k + 1, n)
        eu, idx = self.tree.query(self.points[i], k=m)
        keep = idx != i
        idx = idx[keep][: self.k]
        if self.metric == "euclidean":
            radius = eu[keep][: self.k].max()
        else:
            # every center closer than the current k-th Mahalanobis value lies
            # in this Euclidean ball
            dm = _distances_to_all(i, self.points, self.chol, self.metric, idx)
            radius = dm.max() * self.max_std[i]
        radius = radius * (1 + 1e-9) + 1e-300
        cand = np.asarray(self.tree.query_ball_point(self.points[i], radius), dtype=np.intp)
        cand = cand[cand != i]
        d = _distances_to_all(i, self.points, self.chol, self.metric, cand)
        return _select_k(cand, d, self.k)


def knn(splats: SplatSet, i: int, k: int, metric="mahalanobis",
        brute_force_below=BRUTE_FORCE_BELOW):
    """The k nearest other splats of splat ``i``.

    Returns ``(indices, distances)`` sorted ascending by distance, ties broken
    by the smaller index.
    """
    search = _KnnSearch(splats, k, metric, brute_force_below)
    if not 0 <= i < len(splats):
        raise NeighborhoodError(f"query index {i} out of range")
    return search.query(i)


def knn_all(splats: SplatSet, k: int, metric="mahalanobis",
            brute_force_below=BRUTE_FORCE_BELOW):
    """kNN lists of every splat, as ``(n, k)`` index and distance arrays."""
    search = _KnnSearch(splats, k, metric, brute_force_below)
    n = len(splats)
    nbr = np.empty((n, k), dtype=np.intp)
    dist = np.empty((n, k))
    for i in range(n):
        nbr[i], dist[i] = search.query(i)
    return nbr, dist


@dataclass(frozen=True)
class NeighborGraph:
    """Mutual kNN graph with component labels.

    Attributes
    ----------
    n : int
    neighbors : ndarray, shape (n, k)
        Directed k-nearest lists (ascending distance).
    neighbor_dist : ndarray, shape (n, k)
    edges : ndarray, shape (m, 2)
        Mutual pairs with ``i < j``, lexicographically sorted.
    edge_dist : ndarray, shape (m,)
        Mean of the two directed distances of each edge.
    component_label : ndarray, shape (n,)
        Dense labels, 0 for the largest component.
    metric : str
    k : int
    """

    n: int
    neighbors: np.ndarray
    neighbor_dist: np.ndarray
    edges: np.ndarray
    edge_dist: np.ndarray
    component_label: np.ndarray
    metric: str
    k: int

    @property
    def n_components(self):
        return int(self.component_label.max()) + 1 if self.n else 0

    def component_sizes(self):
        return np.bincount(self.component_label, minlength=self.n_components)

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency of the mutual edges."""
        i, j = self.edges.T
        data = np.ones(2 * len(i))
        return sparse.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(self.n, self.n))

    def adjacency_lists(self):
        adj = self.adjacency()
        return [adj.indices[adj.indptr[v]:adj.indptr[v + 1]] for v in range(self.n)]


def mutual_edges(neighbors, neighbor_dist):
    """Pairs (i < j) where each vertex is in the other's list, with mean distance."""
    n, k = neighbors.shape
    rows = np.repeat(np.arange(n), k)
    cols = neighbors.ravel()
    directed = sparse.csr_matrix((neighbor_dist.ravel() + 1.0, (rows, cols)), shape=(n, n))
    # +1 keeps zero distances (coincident centers) as stored entries
    both = directed.multiply(directed.T > 0).tocoo()
    sel = both.row < both.col
    i, j = both.row[sel], both.col[sel]
    d_ij = np.asarray(directed[i, j]).ravel() - 1.0
    d_ji = np.asarray(directed[j, i]).ravel() - 1.0
    order = np.lexsort((j, i))
    edges = np.column_stack([i[order], j[order]]).astype(np.intp)
    return edges, 0.5 * (d_ij + d_ji)[order]


def label_components(n, edges):
    """Dense component labels ordered by size (desc), then smallest vertex."""
    i, j = np.asarray(edges, dtype=np.intp).reshape(-1, 2).T
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, raw = csgraph.connected_components(adj, directed=False)
    sizes = np.bincount(raw)
    first = np.full(len(sizes), n)
    np.minimum.at(first, raw, np.arange(n))
    order = np.lexsort((first, -sizes))
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    return relabel[raw]


def build_graph(splats: SplatSet, k=8, metric="mahalanobis",
                brute_force_below=BRUTE_FORCE_BELOW) -> NeighborGraph:
    """Mutual kNN graph over splat centers with component labels."""
    n = len(splats)
    if n < k + 1:
        raise NeighborhoodError(f"need at least k+1={k + 1} splats, got {n}")
    nbr, dist = knn_all(splats, k, metric, brute_force_below)
    edges, edge_dist = mutual_edges(nbr, dist)
    labels = label_components(n, edges)
    logger.debug("graph: n=%d k=%d metric=%s edges=%d components=%d",
                 n, k, metric, len(edges), labels.max() + 1)
    return NeighborGraph(n, nbr, dist, edges, edge_dist, labels, metric, k)


def retained_indices(graph: NeighborGraph, keep=1):
    if keep < 1:
        raise ValueError("keep must be a positive integer")
    return np.flatnonzero(graph.component_label < keep)


def prune_components(splats: SplatSet, graph: NeighborGraph, keep=1) -> SplatSet:
    """Keep the splats of the ``keep`` largest components, in original order."""
    if graph.n != len(splats):
        raise ValueError("graph was not built over this splat set")
    return splats.subset(retained_indices(graph, keep))


def filter_largest_component(splats: SplatSet, graph: NeighborGraph):
    """Largest-component filter; returns the set and an old->new index map.

    Dropped splats map to -1.
    """
    kept = retained_indices(graph, 1)
    index_map = np.full(len(splats), -1, dtype=np.intp)
    index_map[kept] = np.arange(len(kept))
    return prune_components(splats, graph, 1), index_map


def write_edges_csv(graph: NeighborGraph, path):
    with open(path, "w") as fh:
        fh.write("i,j,distance\n")
        for (i, j), d in zip(graph.edges, graph.edge_dist):
            fh.write(f"{i},{j},{float(d)!r}\n")


def write_labels_csv(graph: NeighborGraph, path):
    with open(path, "w") as fh:
        fh.write("index,component\n")
        for i, c in enumerate(graph.component_label):
            fh.write(f"{i},{c}\n")
