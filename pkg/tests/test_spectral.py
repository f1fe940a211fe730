import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg, sparse

from splatlbo import laplacian, neighborhood, shapes, spectral, splat_io
from splatlbo.laplacian import LaplacianPair

from scenes import (cluster_scene, concat, nonzero, plane_disk_splats, random_soup_points,
                    sphere_splats)


def soup_operator(n=250, seed=0):
    p, normals = random_soup_points(n, seed)
    graph = neighborhood.build_graph(shapes.isotropic_splats(p, 0.01), 8)
    return laplacian.assemble(laplacian.build_soup(p, graph, normals))


def check_spectrum(spec, lap):
    vals = spec.eigenvalues
    assert np.all(np.diff(vals) >= 0)
    assert vals[0] >= -1e-8
    assert spec.orthonormality_error() <= 1e-7
    res = spec.residuals(lap.W)
    Wphi = np.linalg.norm(lap.W @ spec.eigenvectors, axis=0)
    # kernel vectors have W phi ~ 0; their residual is pure round-off
    floor = 1e-6 * abs(lap.W).sum(axis=1).max() * np.abs(spec.eigenvectors).max(axis=0)
    scale = np.maximum(Wphi, floor)
    assert np.all(res <= 1e-7 * scale)


def test_constant_kernel():
    lap = soup_operator()
    spec = spectral.smallest_eigenpairs(lap, 10)
    check_spectrum(spec, lap)
    assert abs(spec.eigenvalues[0]) < 1e-8 * spec.eigenvalues[1]
    phi0 = spec.eigenvectors[:, 0]
    assert np.ptp(phi0) <= 1e-6 * np.abs(phi0).max()


def test_icosphere_groups(icosphere_spectrum, icosphere_lap):
    check_spectrum(icosphere_spectrum, icosphere_lap)
    vals = icosphere_spectrum.eigenvalues
    assert abs(vals[0]) < 1e-8
    for ell, sl in [(1, slice(1, 4)), (2, slice(4, 9)), (3, slice(9, 16))]:
        assert abs(vals[sl].mean() - ell * (ell + 1)) < 0.05 * ell * (ell + 1)


@pytest.mark.parametrize("seed", range(3))
def test_dense_oracle(seed):
    lap = soup_operator(n=int(150 + 50 * seed), seed=seed)
    assert lap.n <= 300
    spec = spectral.smallest_eigenpairs(lap, 20, seed=seed)
    ref = linalg.eigh(lap.W.toarray(), np.diag(lap.mass), eigvals_only=True, subset_by_index=[0, 19])
    assert np.abs(spec.eigenvalues - ref).max() <= 1e-8


def test_dense_path_for_large_k():
    lap = soup_operator(n=60)
    spec = spectral.smallest_eigenpairs(lap, 59)
    assert spec.K == 59
    check_spectrum(spec, lap)


def test_bad_k():
    lap = soup_operator(n=60)
    with pytest.raises(ValueError):
        spectral.smallest_eigenpairs(lap, 0)
    with pytest.raises(ValueError):
        spectral.smallest_eigenpairs(lap, 61)


def test_deterministic_and_sign_fixed():
    lap = soup_operator()
    a = spectral.smallest_eigenpairs(lap, 12)
    b = spectral.smallest_eigenpairs(lap, 12)
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.eigenvectors, b.eigenvectors)
    V = a.eigenvectors
    assert np.all(V[np.abs(V).argmax(axis=0), np.arange(V.shape[1])] > 0)


def test_non_convergence_reports_count():
    lap = soup_operator(n=300)
    with pytest.raises(spectral.SpectralError) as info:
        spectral.smallest_eigenpairs(lap, 40, tol=1e-14, maxiter=1)
    assert "did not converge" in str(info.value)
    assert info.value.converged >= 0


def test_interlacing_sanity():
    lap = soup_operator(n=300, seed=4)
    small = spectral.smallest_eigenpairs(lap, 10).eigenvalues
    large = spectral.smallest_eigenpairs(lap, 30).eigenvalues
    assert np.all(np.abs(large[:10] - small) <= 1e-8 * np.maximum(np.abs(small), small[-1]))


def test_block_diagonal_union():
    a, b = soup_operator(n=120, seed=1), soup_operator(n=150, seed=2)
    W = sparse.block_diag([a.W, b.W], format="csr")
    lap = LaplacianPair(W, np.concatenate([a.mass, b.mass]))
    union = np.sort(np.concatenate([spectral.dense_eigenpairs(a, 15).eigenvalues,
                                    spectral.dense_eigenpairs(b, 15).eigenvalues]))[:15]
    got = spectral.smallest_eigenpairs(lap, 15).eigenvalues
    assert np.abs(got - union).max() <= 1e-8
    assert spectral.count_zero_eigenvalues(got) == 2


def test_rigid_motion_invariance(rng):
    s = sphere_splats(600)
    lap, _, _ = laplacian.splat_laplacian(s)
    base = spectral.smallest_eigenpairs(lap, 12).eigenvalues
    R = shapes.random_rotation(rng)
    moved = s.with_means(s.means @ R.T + np.array([3.0, -2.0, 0.5]))
    # rotate the splat frames along with the centers
    q = np.array([shapes.quat_from_rotmat(R @ splat_io.quat_to_rotmat(r)) for r in s.rotations])
    moved = splat_io.SplatSet(moved.means, moved.scales, q, moved.opacities, moved.sh)
    lap2, _, _ = laplacian.splat_laplacian(moved)
    other = spectral.smallest_eigenpairs(lap2, 12).eigenvalues
    nz = base > 1e-6 * base.max()
    assert np.all(np.abs(other[nz] - base[nz]) <= 1e-6 * base[nz])
    assert np.all(np.abs(other[~nz]) <= 1e-8 * base.max())


@pytest.mark.parametrize("s", [0.1, 7.0])
def test_scale_law_of_spectrum(s):
    p, normals = random_soup_points(250, seed=5)
    graph = neighborhood.build_graph(shapes.isotropic_splats(p, 0.01), 8)
    a = laplacian.assemble(laplacian.build_soup(p, graph, normals))
    b = laplacian.assemble(laplacian.build_soup(s * p, graph, normals))
    la = spectral.smallest_eigenpairs(a, 12).eigenvalues
    lb = spectral.smallest_eigenpairs(b, 12).eigenvalues
    assert_allclose(lb[1:], la[1:] / s ** 2, rtol=1e-6)
    err = spectral.eigenvalue_error(lb * b.area, la * a.area, 1.0)
    assert np.all(err[1:] <= 1e-6 * la[1:] * a.area)


# ---------------------------------------------------------------------------
# zero eigenvalues and component counts

def test_connected_sphere_one_zero(icosphere_spectrum):
    assert spectral.count_zero_eigenvalues(icosphere_spectrum) == 1


def test_two_disjoint_spheres():
    s = concat(sphere_splats(400), sphere_splats(300, 0.7, (5, 0, 0)))
    lap, graph, _ = laplacian.splat_laplacian(s)
    spec = spectral.smallest_eigenpairs(lap, 8)
    assert graph.n_components == 2
    assert spectral.count_zero_eigenvalues(spec) == 2


@pytest.mark.parametrize("seed", range(5))
def test_zero_count_equals_components(seed):
    s, nc = cluster_scene(seed)
    lap, graph, _ = laplacian.splat_laplacian(s)
    spec = spectral.smallest_eigenpairs(lap, nc + 6)
    assert graph.n_components == nc
    assert spectral.count_zero_eigenvalues(spec) == nc


def test_count_all_zero_asks_for_more():
    with pytest.raises(spectral.SpectralError, match="increase K"):
        spectral.count_zero_eigenvalues(np.array([0.0, 0.0, 0.0]))
    s, nc = cluster_scene(1)
    lap, _, _ = laplacian.splat_laplacian(s)
    with pytest.raises(spectral.SpectralError, match="increase K"):
        spectral.count_zero_eigenvalues(spectral.smallest_eigenpairs(lap, nc))


# ---------------------------------------------------------------------------
# eigenvalue error

def test_eigenvalue_error_self_zero(icosphere_spectrum, icosphere_lap):
    err = spectral.eigenvalue_error(icosphere_spectrum, icosphere_spectrum, icosphere_lap.area)
    assert np.all(err == 0)


def test_eigenvalue_error_length_mismatch():
    with pytest.raises(ValueError):
        spectral.eigenvalue_error([0, 1, 2], [0, 1], 1.0)


def test_eigenvalue_error_formula():
    assert_allclose(spectral.eigenvalue_error([0, 2.5], [0, 2.0], 4.0), [0, 2.0])


def test_scaled_geometry_normalized_error_vanishes(icosphere3, icosphere3_lap):
    s = 2.5
    big = laplacian.mesh_laplacian(type(icosphere3)(s * icosphere3.vertices, icosphere3.faces))
    a = spectral.smallest_eigenpairs(icosphere3_lap, 10).eigenvalues * icosphere3_lap.area
    b = spectral.smallest_eigenpairs(big, 10).eigenvalues * big.area
    assert np.all(spectral.eigenvalue_error(a, b, 1.0) <= 1e-6 * np.maximum(a, 1.0))


def test_sphere_splats_vs_mesh_error(icosphere3, icosphere3_lap):
    splats = shapes.sphere_disk_splats(icosphere3)
    lap, _, _ = laplacian.splat_laplacian(splats)
    ours = nonzero(spectral.smallest_eigenpairs(lap, 16).eigenvalues, 10)
    ref = nonzero(spectral.smallest_eigenpairs(icosphere3_lap, 16).eigenvalues, 10)
    err = spectral.eigenvalue_error(ours, ref, icosphere3_lap.area) / ref / icosphere3_lap.area
    assert err.mean() < 0.5


# ---------------------------------------------------------------------------
# monitoring

def test_drift_formula():
    assert spectral.spectrum_drift([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]) == 0.0
    assert spectral.spectrum_drift([1e-20, 1.0, 2.0], [5e-20, 1.1, 2.0]) == pytest.approx(0.1)


def test_stability_flags_need_two_consecutive():
    drifts = [None, 0.5, 0.005, 0.02, 0.004, 0.003, 0.001]
    assert spectral.stability_flags(drifts) == [False, False, False, False, False, True, True]


def write_checkpoint(path, splats):
    splat_io.write_splat_ply(splats, path)
    return path


def test_monitor_repeated_checkpoint(tmp_path):
    s = sphere_splats(300)
    paths = [write_checkpoint(tmp_path / f"c{i}.ply", s) for i in range(3)]
    recs = spectral.monitor_checkpoints(paths, K=10)
    assert recs[0]["drift"] is None
    assert [r["drift"] for r in recs[1:]] == [0.0, 0.0]
    assert [r["stable"] for r in recs] == [False, False, True]


def noisy_sequence(tmp_path, amp0, decay, steps=8, tangent=False):
    base = sphere_splats(400)
    noise = np.random.default_rng(0).normal(size=base.means.shape)
    if tangent:
        n = base.means
        noise -= np.sum(noise * n, axis=1, keepdims=True) * n
    paths = []
    for t in range(steps):
        moved = base.with_means(base.means + amp0 * decay ** t * noise)
        paths.append(write_checkpoint(tmp_path / f"it{t:02d}.ply", moved))
    return paths


def reference_flags(records):
    """Drift and stability recomputed from the recorded eigenvalues."""
    drifts, flags, run = [None], [False], 0
    for prev, curr in zip(records[:-1], records[1:]):
        a, b = np.array(prev["eigenvalues"]), np.array(curr["eigenvalues"])
        keep = a >= 1e-6 * a.max()
        d = np.max(np.abs(b[keep] - a[keep]) / (a[keep] + 1e-12))
        run = run + 1 if d < 0.01 else 0
        drifts.append(d)
        flags.append(run >= 2)
    return drifts, flags


def test_monitor_decaying_noise_below_thickness(tmp_path):
    # noise at 10% of the splat thickness keeps the soup connectivity fixed
    h = np.sqrt(4 * np.pi / 400)
    recs = spectral.monitor_checkpoints(noisy_sequence(tmp_path, 0.1 * 0.05 * h, 0.5), K=12)
    drifts, flags = reference_flags(recs)
    assert all(b <= a for a, b in zip(drifts[1:], drifts[2:]))
    assert_allclose([r["drift"] for r in recs[1:]], drifts[1:], rtol=1e-12)
    assert [r["stable"] for r in recs] == flags
    assert any(flags)


def test_monitor_decaying_tangent_noise(tmp_path):
    # 10% of the sample spacing: connectivity flips make the drift bumpy
    h = np.sqrt(4 * np.pi / 400)
    recs = spectral.monitor_checkpoints(
        noisy_sequence(tmp_path, 0.1 * h, 0.3, tangent=True), K=12)
    drifts, flags = reference_flags(recs)
    assert [r["stable"] for r in recs] == flags
    first = flags.index(True)
    assert drifts[first] < 0.01 and drifts[first - 1] < 0.01
    assert drifts[first - 2] is None or drifts[first - 2] >= 0.01
    assert drifts[-1] < drifts[1]


def test_monitor_unrelated_scenes(tmp_path):
    a = write_checkpoint(tmp_path / "a.ply", sphere_splats(300))
    b = write_checkpoint(tmp_path / "b.ply", plane_disk_splats(18))
    recs = spectral.monitor_checkpoints([a, b, a, b], K=10)
    assert all(r["drift"] > 0.01 for r in recs[1:])
    assert not any(r["stable"] for r in recs)


def test_monitor_records_failures(tmp_path):
    good = write_checkpoint(tmp_path / "g.ply", sphere_splats(300))
    bad = tmp_path / "bad.ply"
    bad.write_text("garbage\n")
    recs = spectral.monitor_checkpoints([good, bad, good, good, good], K=8)
    assert "error" in recs[1] and recs[1]["eigenvalues"] is None
    assert recs[2]["drift"] is None
    assert [r["stable"] for r in recs] == [False, False, False, False, True]


def test_monitor_needs_two():
    with pytest.raises(ValueError):
        spectral.monitor_checkpoints(["x.ply"])


# ---------------------------------------------------------------------------
# export

def test_spectrum_csv_round_trip(tmp_path, icosphere_spectrum):
    spectral.write_spectrum_csv(icosphere_spectrum, tmp_path / "s.csv")
    assert np.array_equal(spectral.read_spectrum_csv(tmp_path / "s.csv"), icosphere_spectrum.eigenvalues)


@pytest.mark.parametrize("name", ["v.csv", "v.bin"])
def test_eigenvector_round_trip(tmp_path, icosphere_spectrum, name):
    spectral.write_eigenvectors(icosphere_spectrum, tmp_path / name)
    back = spectral.read_eigenvectors(tmp_path / name)
    assert np.array_equal(back, icosphere_spectrum.eigenvectors)
    if name.endswith(".bin"):
        meta = json.loads((tmp_path / (name + ".json")).read_text())
        assert meta["shape"] == list(icosphere_spectrum.eigenvectors.shape)
        assert meta["byteorder"] == "little"
