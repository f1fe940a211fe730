"""Reading and writing Gaussian splatting checkpoints and triangle meshes.

Checkpoints follow the common 3DGS PLY layout: log-scales in ``scale_*``,
logit opacities in ``opacity``, an unnormalized (w, x, y, z) quaternion in
``rot_*`` and spherical-harmonic color coefficients in ``f_dc_*`` /
``f_rest_*``. Color coefficients are carried along untouched.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "PlyError",
    "GaussianSplat",
    "SplatSet",
    "TriangleMesh",
    "quat_to_rotmat",
    "covariance_of",
    "covariances",
    "normal_of",
    "covariance_normals",
    "read_ply",
    "read_splat_ply",
    "write_splat_ply",
    "read_mesh",
    "write_mesh_ply",
    "read_representation",
    "write_scalar_ply",
    "write_scalar_csv",
    "color_ramp",
]


class PlyError(ValueError):
    """Malformed or incomplete PLY/OFF input."""


@dataclass(frozen=True)
class GaussianSplat:
    """A single anisotropic 3D Gaussian.

    Attributes
    ----------
    mean : ndarray, shape (3,)
    scale : ndarray, shape (3,)
        Standard deviations along the principal axes (decoded, positive).
    rotation : ndarray, shape (4,)
        Unit quaternion in (w, x, y, z) order.
    opacity : float
        Decoded opacity in [0, 1].
    sh : ndarray
        Flat spherical-harmonic payload, preserved verbatim.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float = 1.0
    sh: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float)
        if scale.shape != (3,) or np.any(scale <= 0):
            raise ValueError("scale must be three strictly positive values")
        rot = np.asarray(self.rotation, dtype=float)
        norm = np.linalg.norm(rot)
        if rot.shape != (4,) or norm == 0:
            raise ValueError("rotation must be a nonzero quaternion")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rot / norm)
        object.__setattr__(self, "sh", np.asarray(self.sh, dtype=float).ravel())


QUAT_UNIT_TOL = 4 * float(np.finfo(np.float32).eps)


class SplatSet:
    """Immutable, ordered collection of Gaussian splats stored column-wise.

    Splat indices are stable identifiers: graphs, operators and scalar
    fields built from a set refer to rows of these arrays.

    Parameters
    ----------
    means : array_like, shape (n, 3)
    scales : array_like, shape (n, 3)
        Decoded (positive) standard deviations.
    rotations : array_like, shape (n, 4)
        Quaternions (w, x, y, z); normalized on construction.
    opacities : array_like, shape (n,), optional
        Decoded opacities, default 1.
    sh : array_like, shape (n, m), optional
        Color payload; ``sh_names`` gives the PLY property names.
    source_path : str
        Provenance string.
    """

    def __init__(self, means, scales, rotations, opacities=None, sh=None,
                 sh_names=None, source_path=""):
        means = np.array(means, dtype=float).reshape(-1, 3)
        n = len(means)
        scales = np.array(scales, dtype=float).reshape(n, 3)
        rotations = np.array(rotations, dtype=float).reshape(n, 4)
        if opacities is None:
            opacities = np.ones(n)
        opacities = np.array(opacities, dtype=float).reshape(n)
        if sh is None:
            sh = np.zeros((n, 0))
        sh = np.array(sh, dtype=float).reshape(n, -1)
        if sh_names is None:
            sh_names = _default_sh_names(sh.shape[1])
        if len(sh_names) != sh.shape[1]:
            raise ValueError("sh_names length does not match sh columns")

        if np.any(scales <= 0):
            raise ValueError("all scales must be strictly positive")
        qnorm = np.linalg.norm(rotations, axis=1)
        if np.any(qnorm == 0):
            raise ValueError("zero-length rotation quaternion")
        if np.any((opacities < 0) | (opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")

        self.means = means
        self.scales = scales
        # rows already unit to float32 precision keep their exact bits, so a
        # read/write round trip through a PLY file is byte-stable
        renorm = np.abs(qnorm - 1.0) > QUAT_UNIT_TOL
        rotations[renorm] /= qnorm[renorm, None]
        self.rotations = rotations
        self.opacities = opacities
        self.sh = sh
        self.sh_names = tuple(sh_names)
        self.source_path = str(source_path)
        for arr in (self.means, self.scales, self.rotations, self.opacities, self.sh):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> GaussianSplat:
        return GaussianSplat(self.means[i], self.scales[i], self.rotations[i],
                             float(self.opacities[i]), self.sh[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __repr__(self):
        return f"SplatSet(n={len(self)}, source_path={self.source_path!r})"

    @classmethod
    def from_splats(cls, splats, source_path=""):
        splats = list(splats)
        if not splats:
            raise ValueError("empty splat list")
        sh_len = {len(s.sh) for s in splats}
        if len(sh_len) != 1:
            raise ValueError("splats carry SH payloads of different length")
        return cls(
            [s.mean for s in splats], [s.scale for s in splats],
            [s.rotation for s in splats], [s.opacity for s in splats],
            np.array([s.sh for s in splats]).reshape(len(splats), -1),
            source_path=source_path,
        )

    def subset(self, indices) -> "SplatSet":
        """New set made of the given rows, in the given order."""
        idx = np.asarray(indices, dtype=np.intp)
        return SplatSet(self.means[idx], self.scales[idx], self.rotations[idx],
                        self.opacities[idx], self.sh[idx], self.sh_names,
                        self.source_path)

    def with_means(self, means) -> "SplatSet":
        """Copy with translated centers; every other field is kept as is."""
        return SplatSet(means, self.scales, self.rotations, self.opacities,
                        self.sh, self.sh_names, self.source_path)


@dataclass
class TriangleMesh:
    """Triangle mesh with validated, nondegenerate faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if np.any(bad):
                raise ValueError(f"degenerate face at index {int(np.flatnonzero(bad)[0])}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)


def _default_sh_names(m):
    names = [f"f_dc_{i}" for i in range(min(m, 3))]
    names += [f"f_rest_{i}" for i in range(max(m - 3, 0))]
    return names


# ---------------------------------------------------------------------------
# covariance and normals

def quat_to_rotmat(q):
    """Rotation matrices for (w, x, y, z) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def covariance_of(splat: GaussianSplat) -> np.ndarray:
    """Covariance R diag(scale^2) R^T of one splat."""
    R = quat_to_rotmat(splat.rotation)
    cov = (R * splat.scale ** 2) @ R.T
    return 0.5 * (cov + cov.T)


def covariances(splats: SplatSet) -> np.ndarray:
    """Stacked covariances of a whole set, shape (n, 3, 3)."""
    R = quat_to_rotmat(splats.rotations)
    cov = np.einsum("nij,nj,nkj->nik", R, splats.scales ** 2, R)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def _sign_normalize(v):
    # largest-magnitude component positive, first one on ties
    v = np.atleast_2d(v)
    idx = np.argmax(np.abs(v), axis=1)
    s = np.sign(v[np.arange(len(v)), idx])
    s[s == 0] = 1.0
    return v * s[:, None]


def normal_of(splat: GaussianSplat, degenerate_rtol=1e-9):
    """Unit normal of a splat and a degeneracy flag.

    The normal is the covariance eigenvector of the smallest eigenvalue,
    sign-normalized so its largest-magnitude component is positive. The
    flag is set when the two smallest eigenvalues coincide within
    ``degenerate_rtol`` (the normal direction is then not unique).
    """
    evals, evecs = np.linalg.eigh(covariance_of(splat))
    n = _sign_normalize(evecs[:, 0])[0]
    degenerate = bool(evals[1] - evals[0] <= degenerate_rtol * evals[1])
    return n / np.linalg.norm(n), degenerate


def covariance_normals(splats: SplatSet, degenerate_rtol=1e-9):
    """Vectorized :func:`normal_of`; returns ``(normals, degenerate_mask)``."""
    evals, evecs = np.linalg.eigh(covariances(splats))
    normals = _sign_normalize(evecs[:, :, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    degenerate = evals[:, 1] - evals[:, 0] <= degenerate_rtol * evals[:, 1]
    return normals, degenerate


# ---------------------------------------------------------------------------
# generic PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(fh, path):
    first = fh.readline().strip()
    if first != b"ply":
        raise PlyError(f"{path}: not a PLY file")
    fmt = None
    elements = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyError(f"{path}: header has no end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian",
                                                  "binary_big_endian"):
                raise PlyError(f"{path}: unsupported format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyError(f"{path}: malformed element line {line!r}")
            try:
                elements.append(_Element(parts[1], int(parts[2]), []))
            except ValueError:
                raise PlyError(f"{path}: malformed element count in {line!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before any element")
            try:
                if parts[1] == "list":
                    elements[-1].props.append(
                        (parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (KeyError, IndexError):
                raise PlyError(f"{path}: malformed property line {line!r}") from None
        else:
            raise PlyError(f"{path}: unexpected header line {line!r}")
    if fmt is None:
        raise PlyError(f"{path}: missing format line")
    return fmt, elements


def _read_binary_element(fh, el, endian, path):
    scalar = all(not isinstance(t, tuple) for _, t in el.props)
    if scalar:
        dt = np.dtype([(name, endian + t) for name, t in el.props])
        buf = fh.read(dt.itemsize * el.count)
        if len(buf) != dt.itemsize * el.count:
            raise PlyError(f"{path}: truncated data in element {el.name!r}")
        return np.frombuffer(buf, dtype=dt)
    out = {name: [] for name, _ in el.props}
    for row in range(el.count):
        for name, t in el.props:
            if isinstance(t, tuple):
                cdt = np.dtype(endian + t[0])
                raw = fh.read(cdt.itemsize)
                if len(raw) != cdt.itemsize:
                    raise PlyError(f"{path}: truncated list in {el.name!r} row {row}")
                cnt = int(np.frombuffer(raw, cdt)[0])
                idt = np.dtype(endian + t[1])
                raw = fh.read(idt.itemsize * cnt)
                if len(raw) != idt.itemsize * cnt:
                    raise PlyError(f"{path}: truncated list in {el.name!r} row {row}")
                out[name].append(np.frombuffer(raw, idt).copy())
            else:
                dt = np.dtype(endian + t)
                raw = fh.read(dt.itemsize)
                if len(raw) != dt.itemsize:
                    raise PlyError(f"{path}: truncated data in {el.name!r} row {row}")
                out[name].append(np.frombuffer(raw, dt)[0])
    return out


def _read_ascii_element(fh, el, path):
    scalar = all(not isinstance(t, tuple) for _, t in el.props)
    rows = []
    for row in range(el.count):
        line = fh.readline()
        if not line:
            raise PlyError(f"{path}: truncated ascii data in element {el.name!r}")
        rows.append(line.split())
    if scalar:
        dt = np.dtype([(name, t) for name, t in el.props])
        arr = np.empty(el.count, dtype=dt)
        for row, toks in enumerate(rows):
            if len(toks) < len(el.props):
                raise PlyError(f"{path}: element {el.name!r} row {row} has too few values")
            for (name, t), tok in zip(el.props, toks):
                try:
                    arr[name][row] = float(tok) if t.startswith("f") else int(tok)
                except ValueError:
                    raise PlyError(f"{path}: bad value {tok!r} for property {name!r} "
                                   f"at {el.name} index {row}") from None
        return arr
    out = {name: [] for name, _ in el.props}
    for row, toks in enumerate(rows):
        pos = 0
        for name, t in el.props:
            try:
                if isinstance(t, tuple):
                    cnt = int(toks[pos])
                    out[name].append(np.array(toks[pos + 1:pos + 1 + cnt], dtype=t[1]))
                    pos += 1 + cnt
                else:
                    out[name].append(float(toks[pos]))
                    pos += 1
            except (ValueError, IndexError):
                raise PlyError(f"{path}: malformed {el.name!r} row {row}") from None
    return out


def read_ply(path):
    """Read every element of a PLY file.

    Returns a dict mapping element name to either a structured array
    (elements with scalar properties only) or a dict of per-row lists.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        data = {}
        for el in elements:
            if fmt == "ascii":
                data[el.name] = _read_ascii_element(fh, el, path)
            else:
                endian = "<" if fmt == "binary_little_endian" else ">"
                data[el.name] = _read_binary_element(fh, el, endian, path)
    return data


def _vertex_column(vertex, name, path):
    if isinstance(vertex, dict):
        if name not in vertex:
            raise PlyError(f"{path}: missing required vertex property {name!r}")
        return np.asarray(vertex[name], dtype=float)
    if name not in vertex.dtype.names:
        raise PlyError(f"{path}: missing required vertex property {name!r}")
    return vertex[name].astype(float)


def _check_finite(values, name, path):
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise PlyError(f"{path}: non-finite value in property {name!r} "
                       f"at vertex index {int(np.flatnonzero(bad)[0])}")


def _sh_sort_key(name):
    group = 0 if name.startswith("f_dc_") else 1
    return group, int(name.rsplit("_", 1)[1])


def read_splat_ply(path, opacity_min=0.0) -> SplatSet:
    """Load a 3DGS checkpoint PLY (binary little-endian or ASCII).

    Scales are decoded with ``exp``, opacities with the logistic sigmoid and
    quaternions are normalized. Unknown vertex properties are ignored.
    Splats whose decoded opacity is below ``opacity_min`` are dropped
    (default 0 keeps everything).
    """
    path = os.fspath(path)
    data = read_ply(path)
    if "vertex" not in data:
        raise PlyError(f"{path}: no vertex element")
    vertex = data["vertex"]
    cols = {}
    for name in ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                 "rot_0", "rot_1", "rot_2", "rot_3"):
        cols[name] = _vertex_column(vertex, name, path)
        _check_finite(cols[name], name, path)
    names = vertex.keys() if isinstance(vertex, dict) else vertex.dtype.names
    sh_names = sorted((nm for nm in names if nm.startswith(("f_dc_", "f_rest_"))),
                      key=_sh_sort_key)
    sh = np.column_stack([_vertex_column(vertex, nm, path) for nm in sh_names]) \
        if sh_names else np.zeros((len(cols["x"]), 0))

    means = np.column_stack([cols["x"], cols["y"], cols["z"]])
    scales = np.exp(np.column_stack([cols[f"scale_{i}"] for i in range(3)]))
    rots = np.column_stack([cols[f"rot_{i}"] for i in range(4)])
    qn = np.linalg.norm(rots, axis=1)
    if np.any(qn == 0):
        raise PlyError(f"{path}: zero quaternion in property 'rot_0' at vertex index "
                       f"{int(np.flatnonzero(qn == 0)[0])}")
    opac = 1.0 / (1.0 + np.exp(-cols["opacity"]))
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        bad = int(np.flatnonzero(~(scales > 0) | ~np.isfinite(scales))[0] // 3)
        raise PlyError(f"{path}: scale decodes out of range at vertex index {bad}")

    keep = opac >= opacity_min
    if not np.all(keep):
        logger.info("dropping %d splats with opacity < %g", int((~keep).sum()), opacity_min)
    return SplatSet(means[keep], scales[keep], rots[keep], opac[keep], sh[keep],
                    sh_names, source_path=path)


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p) - np.log1p(-p)


def write_splat_ply(splats: SplatSet, path):
    """Write a set in the binary little-endian 3DGS layout."""
    n = len(splats)
    if n == 0:
        raise ValueError("cannot write an empty splat set")
    names = ["x", "y", "z", "nx", "ny", "nz", *splats.sh_names, "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    dt = np.dtype([(nm, "<f4") for nm in names])
    arr = np.zeros(n, dtype=dt)
    for i, c in enumerate("xyz"):
        arr[c] = splats.means[:, i]
    for j, nm in enumerate(splats.sh_names):
        arr[nm] = splats.sh[:, j]
    arr["opacity"] = _logit(splats.opacities)
    log_scales = np.log(splats.scales)
    for i in range(3):
        arr[f"scale_{i}"] = log_scales[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = splats.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# meshes

def _triangulate_polygons(polys):
    tris = []
    for poly in polys:
        poly = [int(v) for v in poly]
        if len(poly) < 3:
            raise PlyError(f"face with {len(poly)} vertices")
        for j in range(1, len(poly) - 1):
            tris.append((poly[0], poly[j], poly[j + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def _read_off(path):
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or not tokens[0].endswith("OFF"):
        raise PlyError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
        pos += 3 * nv
        polys = []
        for _ in range(nf):
            cnt = int(tokens[pos])
            polys.append(tokens[pos + 1:pos + 1 + cnt])
            if len(polys[-1]) != cnt:
                raise IndexError
            pos += 1 + cnt
    except (ValueError, IndexError):
        raise PlyError(f"{path}: truncated or malformed OFF body") from None
    return verts, _triangulate_polygons(polys)


def read_mesh(path) -> TriangleMesh:
    """Read a triangle mesh from PLY or OFF; polygons are fan-triangulated."""
    path = os.fspath(path)
    if path.lower().endswith(".off"):
        verts, faces = _read_off(path)
    else:
        data = read_ply(path)
        if "vertex" not in data or "face" not in data:
            raise PlyError(f"{path}: mesh PLY needs vertex and face elements")
        v = data["vertex"]
        verts = np.column_stack([_vertex_column(v, c, path) for c in "xyz"])
        face = data["face"]
        key = next((k for k in ("vertex_indices", "vertex_index") if k in face), None)
        if key is None:
            raise PlyError(f"{path}: face element has no vertex_indices list")
        faces = _triangulate_polygons(face[key])
    _check_finite(verts, "xyz", path)
    try:
        return TriangleMesh(verts, faces)
    except ValueError as exc:
        raise PlyError(f"{path}: {exc}") from None


def write_mesh_ply(path, vertices, faces=None, colors=None):
    """Binary little-endian PLY with optional faces and uchar RGB colors."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(len(vertices), dtype=fields)
    for i, c in enumerate("xyz"):
        arr[c] = vertices[:, i]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        arr["red"], arr["green"], arr["blue"] = colors.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(arr)}"]
    header += [f"property {'float' if t == '<f4' else 'uchar'} {nm}" for nm, t in fields]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())
        if faces is not None:
            fdt = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
            farr = np.zeros(len(faces), dtype=fdt)
            farr["n"] = 3
            farr["v"] = faces
            fh.write(farr.tobytes())


def read_representation(path, opacity_min=0.0):
    """Load a file as a :class:`SplatSet` or a :class:`TriangleMesh`.

    OFF files and PLY files with a face element are meshes; PLY files whose
    vertices carry ``scale_0`` are splat checkpoints.
    """
    path = os.fspath(path)
    if path.lower().endswith(".off"):
        return read_mesh(path)
    with open(path, "rb") as fh:
        _, elements = _parse_header(fh, path)
    names = {el.name: [p for p, _ in el.props] for el in elements}
    if "face" in names and any(el.count for el in elements if el.name == "face"):
        return read_mesh(path)
    if "scale_0" in names.get("vertex", []):
        return read_splat_ply(path, opacity_min=opacity_min)
    raise PlyError(f"{path}: neither a mesh nor a splat checkpoint")


# ---------------------------------------------------------------------------
# scalar field export

# viridis anchor colors at t = 0, 0.25, 0.5, 0.75, 1
_RAMP = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=float)


def color_ramp(values):
    """Map values linearly over [min, max] to viridis-style uchar RGB."""
    values = np.asarray(values, dtype=float)
    lo, hi = values.min(), values.max()
    t = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pos = t * (len(_RAMP) - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, len(_RAMP) - 2)
    frac = (pos - i0)[:, None]
    rgb = _RAMP[i0] * (1 - frac) + _RAMP[i0 + 1] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_scalar_ply(rep, values, path):
    """Colored PLY of a scalar field on a mesh, splat set or point array.

    Non-finite values (e.g. unreachable distances) are colored with the
    ramp maximum.
    """
    faces = None
    if isinstance(rep, TriangleMesh):
        points, faces = rep.vertices, rep.faces
    elif isinstance(rep, SplatSet):
        points = rep.means
    else:
        points = np.asarray(rep, dtype=float).reshape(-1, 3)
    values = np.asarray(values, dtype=float).ravel()
    if len(values) != len(points):
        raise ValueError(f"field length {len(values)} does not match "
                         f"{len(points)} vertices")
    finite = np.isfinite(values)
    shown = values.copy()
    if not np.all(finite):
        shown[~finite] = values[finite].max() if np.any(finite) else 0.0
    write_mesh_ply(path, points, faces, color_ramp(shown))


def write_scalar_csv(values, path, header=("index", "value")):
    values = np.asarray(values, dtype=float).ravel()
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")
