"""Smallest generalized eigenpairs of (W, M) and spectrum diagnostics."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .laplacian import LaplacianPair

logger = logging.getLogger(__name__)

SHIFT_REL = 1e-8
ZERO_TOL_REL = 1e-6
ZERO_ABS_REL = 1e-10
DRIFT_EPS = 1e-12
EXTRA_MIN = 10
EXTRA_REL = 0.5


class SpectralError(RuntimeError):
    """Eigen solve failure; ``converged`` counts the pairs that did converge."""

    def __init__(self, message, converged=0):
        super().__init__(message)
        self.converged = converged


@dataclass(frozen=True)
class Spectrum:
    """Ascending eigenvalues with M-orthonormal eigenvectors (columns).

    ``scale`` is the operator's typical eigenvalue magnitude
    ``mean(diag W) / mean(mass)``; it lets round-off eigenvalues be
    recognized even when every computed one is numerically zero.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    scale: float = None

    @property
    def K(self):
        return len(self.eigenvalues)

    def residuals(self, W):
        """Per-pair ``||W phi - lam M phi||``."""
        R = W @ self.eigenvectors - self.mass[:, None] * self.eigenvectors * self.eigenvalues
        return np.linalg.norm(R, axis=0)

    def orthonormality_error(self):
        G = self.eigenvectors.T @ (self.mass[:, None] * self.eigenvectors)
        return float(np.abs(G - np.eye(self.K)).max())

    def truncate(self, K):
        return Spectrum(self.eigenvalues[:K], self.eigenvectors[:, :K], self.mass, self.scale)


def _fix_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


def _m_orthonormalize(vecs, mass):
    G = vecs.T @ (mass[:, None] * vecs)
    G = 0.5 * (G + G.T)
    L = np.linalg.cholesky(G)
    return linalg.solve_triangular(L, vecs.T, lower=True).T


def _operator_scale(lap):
    return float(lap.W.diagonal().mean() / lap.mass.mean())


def dense_eigenpairs(lap: LaplacianPair, K=None):
    """All (or the first K) eigenpairs by a dense generalized solve."""
    n = lap.n
    K = n if K is None else K
    vals, vecs = linalg.eigh(lap.W.toarray(), np.diag(lap.mass), subset_by_index=[0, K - 1])
    return Spectrum(vals, _fix_signs(vecs), lap.mass, _operator_scale(lap))


def smallest_eigenpairs(lap: LaplacianPair, K=100, seed=0, tol=1e-10, maxiter=None) -> Spectrum:
    """The K smallest eigenpairs of ``W x = lam M x``.

    Uses shift-invert Lanczos (ARPACK) around the tiny negative shift
    ``-1e-8 * mean(diag W)``, which keeps the factorized matrix positive
    definite despite the constant kernel. The start vector is drawn from a
    seeded generator, and each eigenvector's largest-magnitude entry is made
    positive. A single Krylov start vector can skip copies of exactly
    repeated eigenvalues (symmetric meshes), so ``K + max(10, K/2)`` pairs
    are computed and the smallest K kept. Requests that would need
    ``n - 1`` or more pairs go to a dense solver.
    """
    n = lap.n
    if K < 1 or K > n:
        raise ValueError(f"K={K} must satisfy 1 <= K <= n={n}")
    # extra pairs guard against Lanczos skipping copies of repeated eigenvalues
    k_solve = K + max(EXTRA_MIN, int(EXTRA_REL * K))
    if k_solve >= n - 1:
        return dense_eigenpairs(lap, K)
    diag_mean = float(lap.W.diagonal().mean())
    if diag_mean <= 0:
        raise SpectralError("stiffness matrix has an empty diagonal")
    sigma = -SHIFT_REL * diag_mean
    v0 = np.random.default_rng(seed).standard_normal(n)
    maxiter = 50 * K if maxiter is None else maxiter
    try:
        vals, vecs = eigsh(lap.W.tocsc(), k=k_solve, M=sparse.diags(lap.mass, format="csc"),
                           sigma=sigma, which="LM", v0=v0, tol=tol, maxiter=maxiter)
    except ArpackNoConvergence as exc:
        got = len(exc.eigenvalues)
        raise SpectralError(f"Lanczos did not converge ({got} of {k_solve} requested pairs)",
                            converged=got) from None
    except RuntimeError as exc:
        raise SpectralError(f"factorization failed: {exc}") from None
    order = np.argsort(vals)[:K]
    vals, vecs = vals[order], vecs[:, order]
    vecs = _fix_signs(_m_orthonormalize(vecs, lap.mass))
    return Spectrum(vals, vecs, lap.mass, _operator_scale(lap))


def count_zero_eigenvalues(spec, tol_rel=ZERO_TOL_REL) -> int:
    """Number of eigenvalues below ``tol_rel`` times the largest computed one.

    For a :class:`Spectrum` the threshold is at least ``1e-10 * scale`` so
    that a spectrum made only of round-off values is detected.
    """
    vals = np.asarray(getattr(spec, "eigenvalues", spec), dtype=float)
    threshold = tol_rel * vals.max()
    scale = getattr(spec, "scale", None)
    if scale is not None:
        threshold = max(threshold, ZERO_ABS_REL * scale)
    count = int(np.sum(vals < threshold))
    if count == len(vals) or vals.max() <= 0:
        raise SpectralError("all computed eigenvalues are numerically zero; increase K")
    return count


def eigenvalue_error(spec, spec_gt, area):
    """Area-normalized eigenvalue differences ``S |lam_i - lam_gt_i|``."""
    a = np.asarray(getattr(spec, "eigenvalues", spec), dtype=float)
    b = np.asarray(getattr(spec_gt, "eigenvalues", spec_gt), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"spectra have different lengths: {len(a)} vs {len(b)}")
    return area * np.abs(a - b)


# ---------------------------------------------------------------------------
# training-convergence monitoring

def spectrum_drift(prev, curr, zero_tol_rel=ZERO_TOL_REL, eps=DRIFT_EPS):
    """max_i |curr_i - prev_i| / (prev_i + eps) over the nonzero part of ``prev``.

    Kernel eigenvalues are pure round-off and are skipped.
    """
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    m = min(len(prev), len(curr))
    prev, curr = prev[:m], curr[:m]
    use = prev >= zero_tol_rel * prev.max()
    return float(np.max(np.abs(curr[use] - prev[use]) / (prev[use] + eps)))


def stability_flags(drifts, drift_tol=0.01, consecutive=2):
    """Per-entry flag: the last ``consecutive`` drifts are all below ``drift_tol``.

    ``None`` drifts (first checkpoint, failures) break the run.
    """
    flags = []
    run = 0
    for d in drifts:
        run = run + 1 if d is not None and d < drift_tol else 0
        flags.append(run >= consecutive)
    return flags


def monitor_spectra(spectra, drift_tol=0.01, consecutive=2):
    """Drift and stability records for an ordered list of eigenvalue arrays."""
    drifts = [None]
    for prev, curr in zip(spectra[:-1], spectra[1:]):
        drifts.append(None if prev is None or curr is None else spectrum_drift(prev, curr))
    return drifts, stability_flags(drifts, drift_tol, consecutive)


def monitor_checkpoints(paths, K=100, k=8, metric="mahalanobis", normal_source="covariance",
                        drift_tol=0.01, consecutive=2, keep=1, seed=0, opacity_min=0.0):
    """Spectrum of every checkpoint and its drift from the previous one.

    Each checkpoint is filtered to its ``keep`` largest components before
    the operator is built. Failing checkpoints are recorded with an
    ``error`` message and do not stop the run.
    """
    from .laplacian import splat_laplacian
    from .neighborhood import build_graph, prune_components
    from .splat_io import read_splat_ply

    paths = [os.fspath(p) for p in paths]
    if len(paths) < 2:
        raise ValueError("monitoring needs at least two checkpoints")
    records = []
    spectra = []
    for path in paths:
        rec = {"path": path, "eigenvalues": None, "drift": None, "stable": False}
        try:
            splats = read_splat_ply(path, opacity_min=opacity_min)
            graph = build_graph(splats, k, metric)
            filtered = prune_components(splats, graph, keep)
            lap, _, _ = splat_laplacian(filtered, k, metric, normal_source)
            spec = smallest_eigenpairs(lap, min(K, len(filtered)), seed=seed)
            rec["eigenvalues"] = spec.eigenvalues.tolist()
            rec["n_splats"] = len(splats)
            rec["n_retained"] = len(filtered)
            spectra.append(spec.eigenvalues)
        except Exception as exc:  # noqa: BLE001 - recorded, monitoring continues
            logger.warning("checkpoint %s failed: %s", path, exc)
            rec["error"] = str(exc)
            spectra.append(None)
        records.append(rec)
    drifts, flags = monitor_spectra(spectra, drift_tol, consecutive)
    for rec, d, s in zip(records, drifts, flags):
        rec["drift"] = d
        rec["stable"] = s
    return records


# ---------------------------------------------------------------------------
# export

def write_spectrum_csv(spec: Spectrum, path):
    with open(path, "w") as fh:
        fh.write("index,eigenvalue\n")
        for i, v in enumerate(spec.eigenvalues):
            fh.write(f"{i},{float(v)!r}\n")


def read_spectrum_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def write_eigenvectors(spec: Spectrum, path):
    """Dense eigenvectors: ``.csv`` as text, anything else as raw LE doubles.

    Raw output gets a ``<path>.json`` sidecar with shape and layout.
    """
    path = os.fspath(path)
    vecs = np.ascontiguousarray(spec.eigenvectors, dtype="<f8")
    if path.lower().endswith(".csv"):
        np.savetxt(path, vecs, delimiter=",", fmt="%.17g")
        return
    vecs.tofile(path)
    with open(path + ".json", "w") as fh:
        json.dump({"shape": list(vecs.shape), "dtype": "float64", "byteorder": "little",
                   "order": "C", "columns": "eigenvectors"}, fh)


def read_eigenvectors(path):
    path = os.fspath(path)
    if path.lower().endswith(".csv"):
        return np.loadtxt(path, delimiter=",", ndmin=2)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    return np.fromfile(path, dtype="<f8").reshape(meta["shape"])
