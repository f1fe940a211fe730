"""Geodesic distances with the heat method, plus a Dijkstra reference.

The heat step solves ``(M + t W) u = delta`` with ``t = c h^2`` (``h`` the
mean edge length). The normalized negative gradient of ``u`` is then
integrated back with a Poisson solve ``W phi = -div X``, where ``div`` is the
usual cotan-weighted integrated divergence. The Poisson kernel is handled
with a bordered system that fixes the mass-weighted mean of ``phi``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .laplacian import LaplacianPair, TriangleSoup, cotan_from_lengths, face_lengths
from .splat_io import TriangleMesh

logger = logging.getLogger(__name__)

AREA_EPS_REL = 1e-14


class HeatError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScalarField:
    """Per-vertex values on a representation with ``n`` vertices."""

    values: np.ndarray
    n: int
    domain: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if len(values) != self.n:
            raise ValueError(f"field has {len(values)} values for {self.n} vertices")
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.n


def face_gradient(face, values, positions):
    """Gradient of the linear interpolant of ``values`` on one triangle."""
    return face_gradients(np.asarray(face).reshape(1, 3), values, positions)[0]


def face_gradients(faces, values, positions):
    """Per-face gradients ``sum_i u_i (n x e_i) / (2A)``; zero on degenerate faces."""
    p = np.asarray(positions, dtype=float)
    f = np.asarray(faces)
    u = np.asarray(values, dtype=float)
    p0, p1, p2 = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
    N = np.cross(p1 - p0, p2 - p0)
    twice_area = np.linalg.norm(N, axis=1)
    scale = np.max(face_lengths(p, f), axis=1) ** 2
    ok = twice_area > AREA_EPS_REL * scale
    nrm = np.zeros_like(N)
    nrm[ok] = N[ok] / twice_area[ok, None]
    # e_i is the edge opposite vertex i, counterclockwise
    g = (u[f[:, 0], None] * np.cross(nrm, p2 - p1)
         + u[f[:, 1], None] * np.cross(nrm, p0 - p2)
         + u[f[:, 2], None] * np.cross(nrm, p1 - p0))
    g[ok] /= twice_area[ok, None]
    g[~ok] = 0.0
    return g


def integrated_divergence(soup, X, positions):
    """Integrated divergence of a per-face vector field at every vertex.

    Vertex ``i`` of a face with other corners ``j, k`` receives
    ``1/2 (cot_k (p_j - p_i) . X + cot_j (p_k - p_i) . X)``.
    """
    faces = soup.faces if isinstance(soup, TriangleSoup) else np.asarray(soup)
    n = soup.n if isinstance(soup, TriangleSoup) else len(positions)
    p = np.asarray(positions, dtype=float)
    X = np.asarray(X, dtype=float)
    L = face_lengths(p, faces)
    twice_area = np.linalg.norm(np.cross(p[faces[:, 1]] - p[faces[:, 0]],
                                         p[faces[:, 2]] - p[faces[:, 0]]), axis=1)
    ok = twice_area > AREA_EPS_REL * np.max(L, axis=1) ** 2
    cot = np.zeros_like(L)
    if np.any(ok):
        l0, l1, l2 = L[ok].T
        cot[ok] = np.column_stack([cotan_from_lengths(l0, l1, l2),
                                   cotan_from_lengths(l1, l2, l0),
                                   cotan_from_lengths(l2, l0, l1)])
    div = np.zeros(n)
    for c in range(3):
        j, k = (c + 1) % 3, (c + 2) % 3
        pi, pj, pk = p[faces[:, c]], p[faces[:, j]], p[faces[:, k]]
        contrib = 0.5 * (cot[:, k] * np.einsum("ij,ij->i", pj - pi, X)
                         + cot[:, j] * np.einsum("ij,ij->i", pk - pi, X))
        np.add.at(div, faces[:, c], contrib)
    return div


def _soup_components(soup, n):
    f = soup.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, labels = csgraph.connected_components(adj, directed=False)
    return labels


class HeatSolver:
    """Heat-method distances with factorizations shared across queries.

    Parameters
    ----------
    lap : LaplacianPair
    soup : TriangleSoup
        Faces consistent with ``lap``; its mean edge length sets ``t``.
    positions : ndarray, shape (n, 3)
    c : float
        Time-step factor, ``t = c * h**2``.
    """

    def __init__(self, lap: LaplacianPair, soup: TriangleSoup, positions, c=1.0):
        self.lap = lap
        self.soup = soup
        self.positions = np.asarray(positions, dtype=float)
        n = lap.n
        if soup.n != n or len(self.positions) != n:
            raise HeatError("operator, soup and positions disagree on vertex count")
        h = soup.mean_edge_length()
        self.t = c * h * h
        try:
            self._heat = splu((lap.M + self.t * lap.W).tocsc())
        except RuntimeError as exc:
            raise HeatError(f"heat factorization failed: {exc}") from None
        self.labels = _soup_components(soup, n)
        self._poisson = {}

    def _poisson_factor(self, comp):
        if comp not in self._poisson:
            idx = np.flatnonzero(self.labels == comp)
            Wc = self.lap.W[idx][:, idx]
            m = self.lap.mass[idx][:, None]
            A = sparse.bmat([[Wc, sparse.csr_matrix(m)],
                             [sparse.csr_matrix(m.T), None]], format="csc")
            try:
                self._poisson[comp] = (idx, splu(A))
            except RuntimeError as exc:
                raise HeatError(f"Poisson factorization failed: {exc}") from None
        return self._poisson[comp]

    def heat(self, sources):
        delta = np.zeros(self.lap.n)
        delta[np.asarray(sources)] = 1.0
        return self._heat.solve(delta)

    def distance(self, sources) -> ScalarField:
        """Distance to the nearest of ``sources``.

        Vertices in components without a source are set to ``inf`` and
        reported in the log.
        """
        sources = np.atleast_1d(np.asarray(sources, dtype=np.intp))
        n = self.lap.n
        if len(sources) == 0:
            raise HeatError("no source vertices given")
        if sources.min() < 0 or sources.max() >= n:
            raise HeatError("source index out of range")
        u = self.heat(sources)
        grad = face_gradients(self.soup.faces, u, self.positions)
        norm = np.linalg.norm(grad, axis=1)
        X = np.zeros_like(grad)
        nz = norm > 0
        X[nz] = -grad[nz] / norm[nz, None]
        div = integrated_divergence(self.soup, X, self.positions)

        phi = np.full(n, np.inf)
        for comp in np.unique(self.labels[sources]):
            idx, lu = self._poisson_factor(comp)
            sol = lu.solve(np.concatenate([-div[idx], [0.0]]))[:-1]
            local = sources[self.labels[sources] == comp]
            sol = sol - sol[np.searchsorted(idx, local)].min()
            phi[idx] = np.maximum(sol, 0.0)
        unreachable = int(np.isinf(phi).sum())
        if unreachable:
            logger.warning("%d vertices unreachable from the sources", unreachable)
        return ScalarField(phi, n, "heat")


def heat_distance(lap, soup, positions, sources, c=1.0) -> ScalarField:
    """One-shot :class:`HeatSolver` query."""
    return HeatSolver(lap, soup, positions, c).distance(sources)


def dijkstra_distance(soup, positions, sources) -> ScalarField:
    """Shortest paths along soup (or mesh) edges with Euclidean weights."""
    if isinstance(soup, TriangleMesh):
        positions = soup.vertices if positions is None else positions
        soup = TriangleSoup.from_mesh(soup)
    p = np.asarray(positions, dtype=float)
    e = soup.edges()
    w = np.linalg.norm(p[e[:, 0]] - p[e[:, 1]], axis=1)
    graph = sparse.csr_matrix((w, (e[:, 0], e[:, 1])), shape=(soup.n, soup.n))
    d = csgraph.dijkstra(graph, directed=False, indices=np.atleast_1d(sources), min_only=True)
    return ScalarField(d, soup.n, "dijkstra")


def geodesic_error(distances, exact, area, normalized=False):
    """Mean over sources of the summed absolute distance error over sqrt(area).

    ``distances`` and ``exact`` are sequences of per-source fields. The sum
    over vertices is not divided by their count unless ``normalized``.
    """
    distances = [np.asarray(d, dtype=float) for d in distances]
    exact = [np.asarray(d, dtype=float) for d in exact]
    if len(distances) != len(exact) or not distances:
        raise ValueError("need matching, nonempty lists of per-source fields")
    total = 0.0
    for d, e in zip(distances, exact):
        if d.shape != e.shape:
            raise ValueError(f"field length mismatch: {d.shape} vs {e.shape}")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
            raise ValueError("distance field contains unreachable (infinite) vertices")
        s = np.abs(d - e).sum()
        total += s / len(d) if normalized else s
    return total / (len(distances) * np.sqrt(area))
