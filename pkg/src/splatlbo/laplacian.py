"""Weak-form Laplace-Beltrami operators on triangle soups, meshes and splats.

The operator is the pencil (W, M): ``W`` is the cotan stiffness matrix with
the sign chosen so that it is positive semidefinite, ``M`` the lumped mass.
Eigenvalues of ``W x = lam M x`` are therefore nonnegative and
``M^-1 W`` acts as ``-Laplacian``.

On splat scenes the connectivity comes from a union of local Delaunay
triangulations computed in each splat's tangent plane. The union is a
triangle soup: edges may be shared by more than two faces, and every face
contributes its cotan weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import io as spio
from scipy import sparse
from scipy.spatial import cKDTree

from .delaunay import fan_triangles, incident_triangles
from .neighborhood import NeighborGraph, build_graph
from .splat_io import SplatSet, TriangleMesh, _sign_normalize, covariance_normals, write_mesh_ply

logger = logging.getLogger(__name__)

MOLLIFY_REL = 1e-6
ISOLATED_MASS_REL = 1e-12


class LaplacianError(RuntimeError):
    pass


@dataclass(frozen=True)
class LaplacianPair:
    """Stiffness ``W`` (CSR, symmetric PSD) and lumped mass vector."""

    W: sparse.csr_matrix
    mass: np.ndarray
    isolated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def M(self) -> sparse.csr_matrix:
        return sparse.diags(self.mass, format="csr")

    @property
    def area(self):
        return float(self.mass.sum())

    def apply(self, f):
        """``M^-1 W f``, i.e. minus the Laplacian of ``f``."""
        f = np.asarray(f, dtype=float)
        Wf = self.W @ f
        return Wf / (self.mass[:, None] if Wf.ndim == 2 else self.mass)


@dataclass(frozen=True)
class TriangleSoup:
    """Faces over point indices plus intrinsic lengths.

    ``edge_lengths[f, c]`` is the length of the edge opposite corner ``c``
    of face ``f``.
    """

    faces: np.ndarray
    edge_lengths: np.ndarray
    n: int
    isolated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh):
        faces = np.asarray(mesh.faces, dtype=np.intp)
        used = np.zeros(mesh.n_vertices, dtype=bool)
        used[faces.ravel()] = True
        return cls(faces, face_lengths(mesh.vertices, faces), mesh.n_vertices,
                   np.flatnonzero(~used))

    def edges(self):
        """Unique undirected edges ``(i < j)``."""
        f = self.faces
        e = np.concatenate([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def mean_edge_length(self):
        f = self.faces
        e = np.concatenate([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]])
        e.sort(axis=1)
        _, first = np.unique(e, axis=0, return_index=True)
        return float(self.edge_lengths.T.ravel()[first].mean())


def face_lengths(points, faces):
    p = np.asarray(points, dtype=float)
    f = np.asarray(faces)
    return np.column_stack([
        np.linalg.norm(p[f[:, 1]] - p[f[:, 2]], axis=1),
        np.linalg.norm(p[f[:, 2]] - p[f[:, 0]], axis=1),
        np.linalg.norm(p[f[:, 0]] - p[f[:, 1]], axis=1),
    ])


# ---------------------------------------------------------------------------
# tangent planes and local triangulations

def tangent_frame(normal):
    """Right-handed orthonormal ``(t1, t2, n)`` with t1 from the least aligned axis."""
    n = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("normal must have unit length")
    n = n / np.linalg.norm(n)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    t1 = axis - (axis @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2, n


def local_triangulation(i, neighbors, points, frame):
    """Delaunay triangles incident to ``i`` in the tangent plane ``frame``.

    Points are projected with absolute coordinates ``(p . t1, p . t2)`` so
    that vertices sharing a frame see bit-identical configurations. Falls
    back to an angular fan when the projection is degenerate.
    Returns counterclockwise global triples starting with ``i``; an empty
    list marks ``i`` as isolated.
    """
    t1, t2, _ = frame
    nbr = np.sort(np.asarray(neighbors, dtype=np.intp))
    nbr = nbr[nbr != i]
    if len(nbr) < 2:
        return []
    ids = np.concatenate([[i], nbr])
    P = np.asarray(points, dtype=float)[ids]
    xy = np.column_stack([P @ t1, P @ t2])
    tris = incident_triangles(xy, ids)
    if not tris:
        tris = fan_triangles(xy, ids)
    return tris


def pca_normals(points, k=8):
    """Smallest principal direction of each point's Euclidean k-neighborhood."""
    points = np.asarray(points, dtype=float)
    k = min(k + 1, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nb = points[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, evecs = np.linalg.eigh(cov)
    normals = _sign_normalize(evecs[:, :, 0])
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _neighbor_lists(graph, n):
    if isinstance(graph, NeighborGraph):
        if graph.n != n:
            raise ValueError("graph and points have different vertex counts")
        return graph.adjacency_lists()
    lists = list(graph)
    if len(lists) != n:
        raise ValueError("neighbor lists and points have different lengths")
    return lists


def mollify(lengths, mean_length):
    """Clamp short lengths and inflate each face to a strict triangle inequality."""
    eps = MOLLIFY_REL * mean_length
    delta = MOLLIFY_REL * mean_length
    L = np.maximum(np.asarray(lengths, dtype=float), eps)
    slack = L.sum(axis=1) - 2.0 * L.max(axis=1)  # (sum of two smaller) - largest
    raise_by = np.maximum(0.0, delta - slack)
    return L + raise_by[:, None]


def build_soup(points, graph, normals) -> TriangleSoup:
    """Union of per-vertex tangent-plane Delaunay triangulations.

    ``points`` may be a :class:`SplatSet` or an ``(n, 3)`` array; ``graph``
    a :class:`NeighborGraph` (mutual edges are used) or per-vertex neighbor
    lists. Faces are de-duplicated irrespective of rotation; the first
    occurrence keeps its orientation. Lengths are 3D distances, mollified.
    """
    if isinstance(points, SplatSet):
        points = points.means
    points = np.asarray(points, dtype=float)
    n = len(points)
    normals = np.asarray(normals, dtype=float).reshape(n, 3)
    lists = _neighbor_lists(graph, n)

    seen = {}
    for i in range(n):
        tris = local_triangulation(i, lists[i], points, tangent_frame(normals[i]))
        for tri in tris:
            key = tuple(sorted(tri))
            if key not in seen:
                seen[key] = tri
    faces = np.array(list(seen.values()), dtype=np.intp).reshape(-1, 3)
    used = np.zeros(n, dtype=bool)
    used[faces.ravel()] = True
    isolated = np.flatnonzero(~used)
    if len(isolated):
        logger.warning("%d vertices have no incident triangle", len(isolated))
    if len(faces) == 0:
        return TriangleSoup(faces, np.zeros((0, 3)), n, isolated)
    raw = face_lengths(points, faces)
    soup = TriangleSoup(faces, raw, n, isolated)
    return TriangleSoup(faces, mollify(raw, soup.mean_edge_length()), n, isolated)


# ---------------------------------------------------------------------------
# cotan assembly

def triangle_area(a, b, c):
    """Heron's formula in Kahan's cancellation-free ordering."""
    s = np.sort(np.stack(np.broadcast_arrays(a, b, c), axis=-1).astype(float), axis=-1)
    z, y, x = s[..., 0], s[..., 1], s[..., 2]
    prod = (x + (y + z)) * (z - (x - y)) * (z + (x - y)) * (x + (y - z))
    return 0.25 * np.sqrt(np.maximum(prod, 0.0))


def cotan_from_lengths(a, b, c):
    """Cotangent of the angle opposite side ``a``."""
    area = triangle_area(a, b, c)
    if np.any(area <= 0):
        raise LaplacianError("zero-area triangle in cotan computation")
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    return (b * b + c * c - a * a) / (4.0 * area)


def _corner_cotans(lengths):
    l0, l1, l2 = lengths.T
    return np.column_stack([
        cotan_from_lengths(l0, l1, l2),
        cotan_from_lengths(l1, l2, l0),
        cotan_from_lengths(l2, l0, l1),
    ])


def _voronoi_mass(lengths, cot, area):
    l2 = lengths ** 2
    # mixed Voronoi areas per corner; edge opposite c1 runs from c to c2
    out = np.empty_like(lengths)
    for c in range(3):
        c1, c2 = (c + 1) % 3, (c + 2) % 3
        out[:, c] = (l2[:, c1] * cot[:, c1] + l2[:, c2] * cot[:, c2]) / 8.0
    obtuse = cot < 0
    any_obtuse = obtuse.any(axis=1)
    out[any_obtuse] = np.where(obtuse[any_obtuse], area[any_obtuse, None] / 2,
                               area[any_obtuse, None] / 4)
    return out


def assemble(soup: TriangleSoup, n=None, clamp=False, mass="barycentric") -> LaplacianPair:
    """Cotan stiffness and lumped mass of a triangle soup.

    Each face adds ``-cot(opposite)/2`` to the entry of every one of its
    edges, so edges shared by more than two faces accumulate all of them.
    With ``clamp`` positive off-diagonals are zeroed. ``mass`` is
    ``"barycentric"`` (a third of each incident area) or ``"voronoi"``.
    """
    n = soup.n if n is None else n
    if len(soup.faces) == 0:
        raise LaplacianError("empty triangle soup")
    f = soup.faces
    lengths = soup.edge_lengths
    cot = _corner_cotans(lengths)
    area = triangle_area(*lengths.T)

    # corner c is opposite edge (c+1, c+2)
    i = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = -0.5 * cot.T.ravel()
    # accumulate each edge once in the upper triangle, then mirror: exact symmetry
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    upper = sparse.coo_matrix((w, (lo, hi)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    off = (upper + upper.T).tocsr()
    if clamp:
        off.data = np.minimum(off.data, 0.0)
    W = (off - sparse.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()
    W.sort_indices()

    if mass == "barycentric":
        per_corner = np.repeat(area[:, None] / 3.0, 3, axis=1)
    elif mass == "voronoi":
        per_corner = _voronoi_mass(lengths, cot, area)
    else:
        raise ValueError(f"unknown mass lumping {mass!r}")
    m = np.bincount(f.ravel(), weights=per_corner.ravel(), minlength=n)
    used = np.zeros(n, dtype=bool)
    used[f.ravel()] = True
    isolated = np.flatnonzero(~used)
    if len(isolated):
        m[isolated] = ISOLATED_MASS_REL * m[used].mean()
    return LaplacianPair(W, m, isolated)


def mesh_laplacian(mesh: TriangleMesh, clamp=False, mass="barycentric") -> LaplacianPair:
    """Cotan operator of a triangle mesh with its own Euclidean edge lengths."""
    return assemble(TriangleSoup.from_mesh(mesh), mesh.n_vertices, clamp=clamp, mass=mass)


def splat_normals(splats: SplatSet, normal_source="covariance", k=8):
    """Per-splat normals from the covariance or from a PCA of the neighborhood.

    Isotropic splats have no distinguished covariance direction; they fall
    back to the PCA normal.
    """
    if normal_source == "pca":
        return pca_normals(splats.means, k)
    if normal_source != "covariance":
        raise ValueError(f"unknown normal source {normal_source!r}")
    normals, degenerate = covariance_normals(splats)
    if np.any(degenerate):
        logger.info("%d splats have degenerate covariance normals; using PCA",
                    int(degenerate.sum()))
        normals[degenerate] = pca_normals(splats.means, k)[degenerate]
    return normals


def splat_laplacian(splats: SplatSet, k=8, metric="mahalanobis", normal_source="covariance",
                    normal_k=None, clamp=False, mass="barycentric", graph=None):
    """Graph, normals, soup and operator of a splat scene.

    Returns ``(LaplacianPair, NeighborGraph, TriangleSoup)``.
    """
    if graph is None:
        graph = build_graph(splats, k, metric)
    normals = splat_normals(splats, normal_source, k if normal_k is None else normal_k)
    soup = build_soup(splats.means, graph, normals)
    lap = assemble(soup, len(splats), clamp=clamp, mass=mass)
    return lap, graph, soup


def write_matrix_market(lap: LaplacianPair, w_path, m_path):
    """``W`` as symmetric coordinate Matrix Market; ``M`` as its diagonal entries."""
    spio.mmwrite(w_path, lap.W.tocoo(), symmetry="symmetric")
    spio.mmwrite(m_path, sparse.diags(lap.mass).tocoo(), symmetry="symmetric")


def read_matrix_market(w_path, m_path) -> LaplacianPair:
    W = sparse.csr_matrix(spio.mmread(w_path))
    M = sparse.csr_matrix(spio.mmread(m_path))
    return LaplacianPair(W, M.diagonal().copy())


def write_soup_ply(soup: TriangleSoup, points, path):
    if isinstance(points, SplatSet):
        points = points.means
    write_mesh_ply(path, points, soup.faces)
