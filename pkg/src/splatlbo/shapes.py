"""Synthetic meshes and splat scenes with known geometry."""

from __future__ import annotations

import numpy as np

from .splat_io import SplatSet, TriangleMesh, quat_to_rotmat

_PHI = (1 + 5 ** 0.5) / 2


def icosahedron() -> TriangleMesh:
    v = np.array([
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return TriangleMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)


def icosphere(subdivisions=4, radius=1.0) -> TriangleMesh:
    """Midpoint-subdivided icosahedron projected to a sphere.

    Vertex count is ``10 * 4**subdivisions + 2`` (2562 for 4 levels).
    """
    mesh = icosahedron()
    verts = list(mesh.vertices)
    faces = mesh.faces
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new)
    return TriangleMesh(np.array(verts) * radius, faces)


def grid_mesh(nx=50, ny=None, size=1.0) -> TriangleMesh:
    """Regular ``nx`` by ``ny`` vertex grid on ``[0, size]^2`` in the xy-plane.

    Every cell is split along the same diagonal.
    """
    ny = nx if ny is None else ny
    xs, ys = np.meshgrid(np.linspace(0, size, nx), np.linspace(0, size, ny), indexing="xy")
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return TriangleMesh(verts, faces)


def fibonacci_sphere(n, radius=1.0):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def quat_from_rotmat(R):
    """(w, x, y, z) quaternions of proper rotation matrices, shape (n, 4)."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    q = np.empty((len(R), 4))
    for k, m in enumerate(R):
        tr = np.trace(m)
        if tr > 0:
            s = 2 * np.sqrt(tr + 1)
            q[k] = [s / 4, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2 * np.sqrt(1 + m[0, 0] - m[1, 1] - m[2, 2])
            q[k] = [(m[2, 1] - m[1, 2]) / s, s / 4, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2 * np.sqrt(1 + m[1, 1] - m[0, 0] - m[2, 2])
            q[k] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, s / 4, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2 * np.sqrt(1 + m[2, 2] - m[0, 0] - m[1, 1])
            q[k] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, s / 4]
    return q


def frames_from_normals(normals):
    """Rotations whose third column is the given normal."""
    n = np.asarray(normals, dtype=float)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def disk_splats(points, normals, tangent_scale, normal_scale, opacity=0.9,
                sh_dim=3) -> SplatSet:
    """Flat splats centered at ``points`` with the thin axis along ``normals``."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    rots = quat_from_rotmat(frames_from_normals(normals))
    scales = np.tile([tangent_scale, tangent_scale, normal_scale], (n, 1))
    sh = np.tile(np.linspace(0.1, 0.3, sh_dim), (n, 1))
    return SplatSet(points, scales, rots, np.full(n, opacity), sh)


def isotropic_splats(points, scale, opacity=0.9) -> SplatSet:
    points = np.asarray(points, dtype=float)
    n = len(points)
    return SplatSet(points, np.full((n, 3), scale), np.tile([1.0, 0, 0, 0], (n, 1)),
                    np.full(n, opacity))


def sphere_disk_splats(mesh: TriangleMesh, tangent_rel=1.5, normal_rel=0.05) -> SplatSet:
    """Flat splats on the vertices of a sphere mesh, oriented radially.

    Scales are relative to the mesh's mean edge length.
    """
    v = mesh.vertices
    f = mesh.faces
    h = np.mean(np.linalg.norm(v[f[:, [1, 2, 0]]] - v[f], axis=2))
    normals = v / np.linalg.norm(v, axis=1, keepdims=True)
    return disk_splats(v, normals, tangent_rel * h, normal_rel * h)


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_rotmat(q / np.linalg.norm(q))
