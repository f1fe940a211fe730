"""Local 2D Delaunay triangulations around a center point.

Only the triangles incident to the center are needed, and neighborhoods are
small (tens of points), so triangles are found by testing every candidate
pair of neighbors against the empty-circumcircle criterion. Predicates are
evaluated in floating point with a static error bound and re-evaluated in
exact rational arithmetic when the bound is inconclusive. Exactly
cocircular configurations are resolved by a symbolic perturbation of the
lifted coordinate that favors the lowest global index, so every vertex of a
scene resolves a given tie the same way.

Neighboring vertices project into their own tangent frames, so a quad that
is cocircular in space (a grid cell, say) reaches them with round-off of a
few ulps in different directions. Incircle determinants below a small
relative tolerance are therefore treated as exact ties; otherwise the
vertices around such a quad would pick different diagonals. Candidate
triangles whose orientation is equally close to zero count as collinear
and are dropped, for the same reason.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

_EPS = np.finfo(float).eps / 2
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS
# incircle determinants within this fraction of their magnitude bound are ties
COCIRCULAR_REL = 1e-10
COLLINEAR_REL = 1e-10


def orient2d_exact(a, b, c):
    """Sign of det[[ax, ay, 1], [bx, by, 1], [cx, cy, 1]] (>0: counterclockwise)."""
    ax, ay = map(Fraction, a)
    bx, by = map(Fraction, b)
    cx, cy = map(Fraction, c)
    det = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (det > 0) - (det < 0)


def orient2d(a, b, c):
    a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
    l = (a[0] - c[0]) * (b[1] - c[1])
    r = (a[1] - c[1]) * (b[0] - c[0])
    det = l - r
    if abs(det) > _CCW_BOUND * (abs(l) + abs(r)):
        return 1 if det > 0 else -1
    return orient2d_exact(a, b, c)


def _incircle_det_exact(a, b, c, d):
    ax, ay = map(Fraction, a)
    bx, by = map(Fraction, b)
    cx, cy = map(Fraction, c)
    dx, dy = map(Fraction, d)
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    return (alift * (bdx * cdy - cdx * bdy)
            + blift * (cdx * ady - adx * cdy)
            + clift * (adx * bdy - bdx * ady))


def incircle_sos(pts, ids):
    """Perturbed incircle sign for four points; never returns 0 for distinct points.

    ``pts`` are the coordinates of a, b, c, d and ``ids`` their global
    indices. Positive means d lies inside the circle through a, b, c when
    those are counterclockwise. Ties are broken as if each lifted coordinate
    were raised by an infinitesimal that is largest for the smallest index.
    """
    det = _incircle_det_exact(*pts)
    if det != 0:
        return 1 if det > 0 else -1
    return _perturbed_tie(pts, ids)


def _perturbed_tie(pts, ids):
    a, b, c, d = pts
    # cofactors of the lifted column in the 4x4 form with rows a, b, c, d
    cof = {
        0: orient2d_exact(b, c, d),
        1: -orient2d_exact(a, c, d),
        2: orient2d_exact(a, b, d),
        3: -orient2d_exact(a, b, c),
    }
    for row in sorted(range(4), key=lambda r: ids[r]):
        if cof[row] != 0:
            return cof[row]
    return 0


def _incircle_filtered(a, b, c, d):
    """Vectorized float incircle; returns (det, errbound) over broadcast inputs."""
    adx, ady = a[..., 0] - d[..., 0], a[..., 1] - d[..., 1]
    bdx, bdy = b[..., 0] - d[..., 0], b[..., 1] - d[..., 1]
    cdx, cdy = c[..., 0] - d[..., 0], c[..., 1] - d[..., 1]
    bdxcdy, cdxbdy = bdx * cdy, cdx * bdy
    cdxady, adxcdy = cdx * ady, adx * cdy
    adxbdy, bdxady = adx * bdy, bdx * ady
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady)
    perm = ((np.abs(bdxcdy) + np.abs(cdxbdy)) * alift
            + (np.abs(cdxady) + np.abs(adxcdy)) * blift
            + (np.abs(adxbdy) + np.abs(bdxady)) * clift)
    return det, _ICC_BOUND * perm


def _unique_points(xy, ids):
    """Drop points that coincide with an earlier one (the center is row 0)."""
    keep = []
    seen = set()
    for r in range(len(xy)):
        key = (float(xy[r, 0]), float(xy[r, 1]))
        if key in seen:
            continue
        seen.add(key)
        keep.append(r)
    return xy[keep], ids[keep]


def incident_triangles(xy, ids):
    """Delaunay triangles incident to point 0 of a small planar point set.

    Parameters
    ----------
    xy : ndarray, shape (m, 2)
        Row 0 is the center, the other rows its neighbors.
    ids : ndarray, shape (m,)
        Global indices used for tie-breaking and for the output.

    Returns
    -------
    list of (int, int, int)
        Counterclockwise global-index triples starting with ``ids[0]``.
        Empty when no nondegenerate triangle exists.
    """
    xy = np.asarray(xy, dtype=float)
    ids = np.asarray(ids)
    xy, ids = _unique_points(xy, ids)
    m = len(xy)
    if m < 3:
        return []
    c = xy[0]
    ia, ib = np.triu_indices(m - 1, k=1)
    ia += 1
    ib += 1
    # orientation of (center, a, b)
    l = (c[0] - xy[ib, 0]) * (xy[ia, 1] - xy[ib, 1])
    r = (c[1] - xy[ib, 1]) * (xy[ia, 0] - xy[ib, 0])
    det = l - r
    sure = np.abs(det) > COLLINEAR_REL * (np.abs(l) + np.abs(r))
    orient = np.where(sure, np.sign(det), 0).astype(int)
    valid = orient != 0
    ia, ib, orient = ia[valid], ib[valid], orient[valid]
    # make every candidate counterclockwise
    a = np.where(orient > 0, ia, ib)
    b = np.where(orient > 0, ib, ia)
    if len(a) == 0:
        return []

    tri_a = xy[a][:, None, :]
    tri_b = xy[b][:, None, :]
    d = xy[None, :, :]
    det, bound = _incircle_filtered(np.broadcast_to(c, tri_a.shape), tri_a, tri_b, d)
    member = np.zeros(det.shape, dtype=bool)
    member[:, 0] = True
    member[np.arange(len(a)), a] = True
    member[np.arange(len(a)), b] = True
    tie_tol = np.maximum(bound, COCIRCULAR_REL / _ICC_BOUND * bound)
    inside = (det > tie_tol) & ~member
    unsure = (np.abs(det) <= tie_tol) & ~member

    out = []
    for t in range(len(a)):
        if inside[t].any():
            continue
        empty = True
        for q in np.flatnonzero(unsure[t]):
            pts = (c, xy[a[t]], xy[b[t]], xy[q])
            if _perturbed_tie(pts, (ids[0], ids[a[t]], ids[b[t]], ids[q])) > 0:
                empty = False
                break
        if empty:
            out.append((int(ids[0]), int(ids[a[t]]), int(ids[b[t]])))
    return out


def fan_triangles(xy, ids):
    """Fan around point 0 over angularly sorted, de-duplicated neighbors."""
    xy = np.asarray(xy, dtype=float)
    ids = np.asarray(ids)
    xy, ids = _unique_points(xy, ids)
    if len(xy) < 3:
        return []
    rel = xy[1:] - xy[0]
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    rad = np.hypot(rel[:, 0], rel[:, 1])
    order = np.lexsort((ids[1:], rad, ang))
    ring = ids[1:][order]
    tris = [(int(ids[0]), int(ring[j]), int(ring[j + 1])) for j in range(len(ring) - 1)]
    if len(ring) >= 3:
        tris.append((int(ids[0]), int(ring[-1]), int(ring[0])))
    return tris
