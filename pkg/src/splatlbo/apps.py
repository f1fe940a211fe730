"""Applications and evaluation metrics on top of the operator.

Covers cross-representation projection, eigenfunction comparison, mean
curvature, functional-map correspondences, spectral smoothing and an
end-to-end evaluation of a splat scene against a reference mesh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .laplacian import LaplacianPair

logger = logging.getLogger(__name__)

REPEATED_GAP_REL = 1e-6


@dataclass(frozen=True)
class Correspondence:
    """Map from every source vertex to a target vertex index."""

    map: np.ndarray
    source_n: int
    target_n: int

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.intp).ravel()
        if len(m) != self.source_n:
            raise ValueError("map length differs from source_n")
        if len(m) and (m.min() < 0 or m.max() >= self.target_n):
            raise ValueError("map entry outside [0, target_n)")
        object.__setattr__(self, "map", m)

    def accuracy(self, other: "Correspondence"):
        return float(np.mean(self.map == other.map))


@dataclass(frozen=True)
class FunctionalMap:
    C: np.ndarray

    @property
    def k(self):
        return self.C.shape[0]


def _nearest_rows(tree, queries, data_n):
    """Nearest tree point per query; exact distance ties go to the smaller index."""
    kk = min(4, data_n)
    dist, idx = tree.query(queries, k=kk)
    dist = dist.reshape(len(queries), kk)
    idx = idx.reshape(len(queries), kk)
    tie = dist <= dist[:, :1]
    return np.where(tie, idx, np.iinfo(np.intp).max).min(axis=1)


def project_representation(source_points, target_points) -> Correspondence:
    """Euclidean-nearest target point for every source point."""
    src = np.asarray(source_points, dtype=float).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=float).reshape(-1, 3)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("both point sets must be nonempty")
    return Correspondence(_nearest_rows(cKDTree(tgt), src, len(tgt)), len(src), len(tgt))


def eigenfunction_distance(f, f_other, mass):
    """Plain and mass-weighted L2 distance between unit-normalized functions.

    ``f_other`` is flipped first if its M-inner product with ``f`` is
    negative. The weighted norm is ``sqrt(f^T M f)``. Returns ``(l2, l2w)``.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(f_other, dtype=float)
    mass = np.asarray(mass, dtype=float)
    if f.shape != g.shape:
        raise ValueError("functions must live on the same vertex set")
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    wf, wg = np.sqrt(f @ (mass * f)), np.sqrt(g @ (mass * g))
    if min(nf, ng, wf, wg) == 0:
        raise ValueError("zero-norm function")
    if f @ (mass * g) < 0:
        g = -g
    d = f / nf - g / ng
    dw = f / wf - g / wg
    return float(np.linalg.norm(d)), float(np.sqrt(dw @ (mass * dw)))


def repeated_groups(eigenvalues, gap_rel=REPEATED_GAP_REL):
    """Flag eigenvalues that sit in a numerically repeated group."""
    vals = np.asarray(eigenvalues, dtype=float)
    scale = max(np.abs(vals).max(), 1e-300)
    close = np.abs(np.diff(vals)) < gap_rel * scale
    flag = np.zeros(len(vals), dtype=bool)
    flag[:-1] |= close
    flag[1:] |= close
    return flag


def eigenfunction_distances(Phi, Phi_other, mass, indices=range(1, 11), eigenvalues=None):
    """:func:`eigenfunction_distance` column by column.

    Returns a dict with per-function ``l2`` and ``l2w`` lists, their means
    and, when ``eigenvalues`` are given, which functions belong to a
    repeated-eigenvalue group (their individual values are basis dependent).
    """
    indices = [i for i in indices if i < min(Phi.shape[1], Phi_other.shape[1])]
    l2, l2w = [], []
    for i in indices:
        a, b = eigenfunction_distance(Phi[:, i], Phi_other[:, i], mass)
        l2.append(a)
        l2w.append(b)
    out = {"indices": list(indices), "l2": l2, "l2w": l2w,
           "l2_mean": float(np.mean(l2)) if l2 else None,
           "l2w_mean": float(np.mean(l2w)) if l2w else None}
    if eigenvalues is not None:
        flags = repeated_groups(eigenvalues)
        out["repeated"] = [bool(flags[i]) for i in indices]
    return out


def subspace_angles(Phi, Phi_other, mass):
    """Principal angles between two eigenbases in the M inner product."""
    w = np.sqrt(np.asarray(mass, dtype=float))[:, None]
    return linalg.subspace_angles(w * Phi, w * Phi_other)


def mean_curvature_vector(lap: LaplacianPair, positions):
    """``M^-1 W p / 2``; equals ``H n`` with outward ``n`` on a sphere."""
    return 0.5 * lap.apply(np.asarray(positions, dtype=float))


def mean_curvature(lap: LaplacianPair, positions, normals=None):
    """Unsigned ``|H|``, or signed ``H`` projected on ``normals`` when given."""
    Hn = mean_curvature_vector(lap, positions)
    if normals is None:
        return np.linalg.norm(Hn, axis=1)
    return np.einsum("ij,ij->i", Hn, np.asarray(normals, dtype=float))


def curvature_l1_error(H, H_gt):
    return float(np.mean(np.abs(np.asarray(H) - np.asarray(H_gt))))


def functional_map(Phi_s, Phi_t, mass_t, corr: Correspondence, k=None) -> FunctionalMap:
    """``C = Phi_t^T M_t Pi Phi_s`` for a source-to-target correspondence.

    ``Pi[t, i] = 1`` when source ``i`` maps to target ``t``; targets hit by
    no source contribute zero rows.
    """
    k = min(Phi_s.shape[1], Phi_t.shape[1]) if k is None else k
    if k > Phi_s.shape[1] or k > Phi_t.shape[1]:
        raise ValueError(f"k={k} exceeds available eigenvectors")
    if corr.source_n != Phi_s.shape[0] or corr.target_n != Phi_t.shape[0]:
        raise ValueError("correspondence does not match the bases")
    pulled = np.zeros((corr.target_n, k))
    np.add.at(pulled, corr.map, Phi_s[:, :k])
    C = Phi_t[:, :k].T @ (np.asarray(mass_t)[:, None] * pulled)
    return FunctionalMap(C)


def spectral_nn_correspondence(Phi_s, Phi_t, fmap) -> Correspondence:
    """Target whose spectral row is nearest to each aligned source row ``Phi_s C^T``."""
    C = fmap.C if isinstance(fmap, FunctionalMap) else np.asarray(fmap)
    k = C.shape[0]
    aligned = Phi_s[:, :k] @ C.T
    target = np.ascontiguousarray(Phi_t[:, :k])
    idx = _nearest_rows(cKDTree(target), aligned, len(target))
    return Correspondence(idx, len(Phi_s), len(Phi_t))


def sample_vertices(n, samples=1000, seed=0):
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(samples, n), replace=False))


def correspondence_error(corr_pred, corr_gt, target_distance, area_t, samples=1000, seed=0):
    """Geodesic distance on the target between predicted and true images.

    ``target_distance(j)`` returns the distance field from target vertex
    ``j``. Errors are divided by ``sqrt(area_t)``. Returns
    ``(sampled_source_indices, errors)``.
    """
    pred = corr_pred.map if isinstance(corr_pred, Correspondence) else np.asarray(corr_pred)
    gt = corr_gt.map if isinstance(corr_gt, Correspondence) else np.asarray(corr_gt)
    if pred.shape != gt.shape:
        raise ValueError("correspondences cover different source sets")
    picked = sample_vertices(len(gt), samples, seed)
    errors = np.empty(len(picked))
    cache = {}
    for s, i in enumerate(picked):
        j = int(gt[i])
        if j not in cache:
            cache[j] = np.asarray(target_distance(j), dtype=float)
        d = cache[j][pred[i]]
        if not np.isfinite(d):
            raise ValueError(f"target vertices {j} and {pred[i]} are not connected")
        errors[s] = d
    return picked, errors / np.sqrt(area_t)


def spectral_smoothing(spec, fields, k_smooth=500):
    """Low-pass filter ``v <- Phi (Phi^T M v)`` over the first ``k_smooth`` modes."""
    Phi = spec.eigenvectors
    if k_smooth > Phi.shape[1]:
        raise ValueError(f"k_smooth={k_smooth} exceeds the {Phi.shape[1]} computed modes")
    v = np.asarray(fields, dtype=float)
    if v.shape[0] != Phi.shape[0]:
        raise ValueError("field length does not match the basis")
    Phi = Phi[:, :k_smooth]
    return Phi @ (Phi.T @ (spec.mass[:, None] * v if v.ndim == 2 else spec.mass * v))


def smooth_splats(splats, spec, k_smooth=500):
    """Splat set with low-pass filtered centers; other fields untouched."""
    return splats.with_means(spectral_smoothing(spec, splats.means, k_smooth))


def write_correspondence_csv(corr: Correspondence, path):
    with open(path, "w") as fh:
        fh.write("source_index,target_index\n")
        for i, j in enumerate(corr.map):
            fh.write(f"{i},{j}\n")


def read_correspondence_csv(path, source_n=None, target_n=None) -> Correspondence:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    order = np.argsort(data[:, 0])
    src, tgt = data[order, 0], data[order, 1]
    n = int(src.max()) + 1 if source_n is None else source_n
    if len(src) != n or np.any(src != np.arange(n)):
        raise ValueError(f"{path}: correspondence must list every source index once")
    return Correspondence(tgt, n, int(tgt.max()) + 1 if target_n is None else target_n)


def write_functional_map_csv(fmap: FunctionalMap, path):
    np.savetxt(path, fmap.C, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# end-to-end evaluation against a reference mesh

def evaluate_representation(mesh_gt, splats, K=100, k=8, metric="mahalanobis",
                            normal_source="covariance", keep=1, n_sources=100,
                            n_samples=1000, heat_c=1.0, seed=0, n_eigenfunctions=10,
                            geodesic_reference="dijkstra"):
    """Metric suite of a splat scene against a ground-truth mesh.

    Every quantity on the splats is pulled back to the mesh by nearest-center
    projection. Returns a JSON-serializable dict with the eigenvalue error,
    eigenfunction L2/L2w, geodesic error (raw and vertex-normalized),
    curvature L1 error and correspondence-error statistics.
    """
    from .heat import HeatSolver, dijkstra_distance, geodesic_error
    from .laplacian import TriangleSoup, mesh_laplacian, splat_laplacian
    from .neighborhood import build_graph, prune_components
    from .spectral import eigenvalue_error, smallest_eigenpairs

    graph = build_graph(splats, k, metric)
    filtered = prune_components(splats, graph, keep)
    lap_s, _, soup_s = splat_laplacian(filtered, k, metric, normal_source)
    lap_g = mesh_laplacian(mesh_gt)
    soup_g = TriangleSoup.from_mesh(mesh_gt)
    area = lap_g.area
    K = min(K, lap_g.n - 1, lap_s.n - 1)
    spec_g = smallest_eigenpairs(lap_g, K, seed=seed)
    spec_s = smallest_eigenpairs(lap_s, K, seed=seed)
    ev_err = eigenvalue_error(spec_s, spec_g, area)

    proj = project_representation(mesh_gt.vertices, filtered.means)
    pulled = spec_s.eigenvectors[proj.map]
    ef = eigenfunction_distances(spec_g.eigenvectors, pulled, lap_g.mass,
                                 range(1, n_eigenfunctions + 1), spec_g.eigenvalues)

    heat_g = HeatSolver(lap_g, soup_g, mesh_gt.vertices, heat_c)
    heat_s = HeatSolver(lap_s, soup_s, filtered.means, heat_c)
    srcs = sample_vertices(mesh_gt.n_vertices, n_sources, seed)
    exact, approx = [], []
    for src in srcs:
        if geodesic_reference == "dijkstra":
            exact.append(dijkstra_distance(soup_g, mesh_gt.vertices, [src]).values)
        else:
            exact.append(heat_g.distance([src]).values)
        approx.append(heat_s.distance([proj.map[src]]).values[proj.map])
    finite = [np.all(np.isfinite(a)) for a in approx]
    if not all(finite):
        logger.warning("%d sources reach only part of the splat scene", finite.count(False))
    pairs = [(a, e) for a, e, ok in zip(approx, exact, finite) if ok]
    e_geo = geodesic_error([p[0] for p in pairs], [p[1] for p in pairs], area) if pairs else None
    e_geo_n = (geodesic_error([p[0] for p in pairs], [p[1] for p in pairs], area,
                              normalized=True) if pairs else None)

    # unsigned: splat normals carry no consistent orientation
    H_g = mean_curvature(lap_g, mesh_gt.vertices)
    H_s = mean_curvature(lap_s, filtered.means)[proj.map]
    curv = curvature_l1_error(H_s, H_g)

    fmap = functional_map(spec_g.eigenvectors, spec_s.eigenvectors, lap_s.mass, proj)
    pred = spectral_nn_correspondence(spec_g.eigenvectors, spec_s.eigenvectors, fmap)
    _, corr_err = correspondence_error(pred, proj, lambda j: heat_s.distance([j]).values,
                                       lap_s.area, n_samples, seed)
    return {
        "n_splats": len(splats),
        "n_retained": len(filtered),
        "n_mesh_vertices": mesh_gt.n_vertices,
        "surface_area": area,
        "K": K,
        "eigenvalue_error": ev_err.tolist(),
        "eigenvalue_error_mean": float(ev_err.mean()),
        "eigenfunction_l2": ef["l2"],
        "eigenfunction_l2w": ef["l2w"],
        "eigenfunction_l2_mean": ef["l2_mean"],
        "eigenfunction_l2w_mean": ef["l2w_mean"],
        "eigenfunction_repeated": ef.get("repeated"),
        "geodesic_reference": geodesic_reference,
        "E_geo": e_geo,
        "E_geo_vertex_normalized": e_geo_n,
        "curvature_l1": curv,
        "E_corr_mean": float(corr_err.mean()),
        "E_corr_median": float(np.median(corr_err)),
        "E_corr_max": float(corr_err.max()),
    }
