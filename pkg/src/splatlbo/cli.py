"""Command-line interface.

Every subcommand prints a JSON summary on stdout and logs to stderr.
Exit status is 0 on success, 1 on usage errors and 2 when the pipeline
fails; outputs written by a failing command are removed.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import apps, heat, laplacian, neighborhood, spectral, splat_io

logger = logging.getLogger("splatlbo")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    k_neighbors: int = 8
    metric: str = "mahalanobis"
    normal_source: str = "covariance"
    K_eigen: int = 100
    k_smooth: int = 500
    heat_c: float = 1.0
    seed: int = 0
    keep_components: int = 1
    opacity_min: float = 0.0
    zero_tol: float = spectral.ZERO_TOL_REL
    drift_tol: float = 0.01
    stable_consecutive: int = 2
    samples: int = 1000
    n_sources: int = 100

    def validate(self):
        for name in ("k_neighbors", "K_eigen", "k_smooth", "keep_components",
                     "stable_consecutive", "samples", "n_sources"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be a positive integer")
        if self.metric not in neighborhood.METRICS:
            raise UsageError(f"metric must be one of {neighborhood.METRICS}")
        if self.normal_source not in ("covariance", "pca"):
            raise UsageError("normal_source must be 'covariance' or 'pca'")
        if self.heat_c <= 0:
            raise UsageError("heat_c must be positive")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw):
    typ = type(getattr(RunConfig(), name))
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {name}") from None


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _FIELDS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def make_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# shared pipeline pieces

@dataclass
class Operator:
    rep: object
    lap: laplacian.LaplacianPair
    soup: laplacian.TriangleSoup
    positions: np.ndarray


def _require(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")


def load(path, cfg):
    _require(path)
    return splat_io.read_representation(path, opacity_min=cfg.opacity_min)


def build_operator(rep, cfg, prefilter=False) -> Operator:
    if isinstance(rep, splat_io.TriangleMesh):
        return Operator(rep, laplacian.mesh_laplacian(rep),
                        laplacian.TriangleSoup.from_mesh(rep), rep.vertices)
    if prefilter:
        graph = neighborhood.build_graph(rep, cfg.k_neighbors, cfg.metric)
        rep = neighborhood.prune_components(rep, graph, cfg.keep_components)
    lap, _, soup = laplacian.splat_laplacian(rep, cfg.k_neighbors, cfg.metric,
                                             cfg.normal_source)
    return Operator(rep, lap, soup, np.asarray(rep.means))


def _n_eigen(op, K):
    return max(1, min(K, op.lap.n))


def vertex_normals(mesh):
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    vn = np.zeros_like(v)
    for c in range(3):
        np.add.at(vn, f[:, c], fn)
    return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)


# ---------------------------------------------------------------------------
# commands

def cmd_filter(args, cfg, outputs):
    _require(args.input)
    splats = splat_io.read_splat_ply(args.input, opacity_min=cfg.opacity_min)
    graph = neighborhood.build_graph(splats, cfg.k_neighbors, cfg.metric)
    kept = neighborhood.prune_components(splats, graph, cfg.keep_components)
    outputs.append(args.output)
    splat_io.write_splat_ply(kept, args.output)
    return {"total": len(splats), "retained": len(kept),
            "components": graph.n_components,
            "component_sizes": graph.component_sizes().tolist()}


def cmd_laplacian(args, cfg, outputs):
    rep = load(args.input, cfg)
    op = build_operator(rep, cfg, args.prefilter)
    outputs += [args.W, args.M]
    laplacian.write_matrix_market(op.lap, args.W, args.M)
    if args.soup:
        outputs.append(args.soup)
        laplacian.write_soup_ply(op.soup, op.positions, args.soup)
    if isinstance(op.rep, splat_io.SplatSet) and (args.edges or args.labels):
        graph = neighborhood.build_graph(op.rep, cfg.k_neighbors, cfg.metric)
        if args.edges:
            outputs.append(args.edges)
            neighborhood.write_edges_csv(graph, args.edges)
        if args.labels:
            outputs.append(args.labels)
            neighborhood.write_labels_csv(graph, args.labels)
    return {"n": op.lap.n, "nnz": int(op.lap.W.nnz), "faces": int(len(op.soup.faces)),
            "isolated": int(len(op.lap.isolated)), "area": op.lap.area}


def cmd_spectrum(args, cfg, outputs):
    rep = load(args.input, cfg)
    op = build_operator(rep, cfg, args.prefilter)
    spec = spectral.smallest_eigenpairs(op.lap, _n_eigen(op, cfg.K_eigen), seed=cfg.seed)
    outputs.append(args.output)
    spectral.write_spectrum_csv(spec, args.output)
    if args.vectors:
        outputs.append(args.vectors)
        if not args.vectors.lower().endswith(".csv"):
            outputs.append(args.vectors + ".json")
        spectral.write_eigenvectors(spec, args.vectors)
    try:
        zeros = spectral.count_zero_eigenvalues(spec, cfg.zero_tol)
    except spectral.SpectralError:
        zeros = None
    return {"n": op.lap.n, "K": spec.K, "zero_eigenvalues": zeros,
            "eigenvalues": spec.eigenvalues.tolist()}


def cmd_geodesic(args, cfg, outputs):
    rep = load(args.input, cfg)
    op = build_operator(rep, cfg, args.prefilter)
    if args.method == "heat":
        field = heat.heat_distance(op.lap, op.soup, op.positions, args.source, cfg.heat_c)
    else:
        field = heat.dijkstra_distance(op.soup, op.positions, args.source)
    outputs.append(args.output)
    splat_io.write_scalar_csv(field.values, args.output)
    if args.ply:
        outputs.append(args.ply)
        splat_io.write_scalar_ply(op.rep, field.values, args.ply)
    finite = np.isfinite(field.values)
    return {"n": op.lap.n, "sources": list(args.source), "method": args.method,
            "unreachable": int((~finite).sum()),
            "max_distance": float(field.values[finite].max())}


def cmd_curvature(args, cfg, outputs):
    rep = load(args.input, cfg)
    op = build_operator(rep, cfg, args.prefilter)
    normals = None
    if args.signed:
        if isinstance(op.rep, splat_io.TriangleMesh):
            normals = vertex_normals(op.rep)
        else:
            normals = laplacian.splat_normals(op.rep, cfg.normal_source, cfg.k_neighbors)
    H = apps.mean_curvature(op.lap, op.positions, normals)
    outputs.append(args.output)
    splat_io.write_scalar_csv(H, args.output)
    if args.ply:
        outputs.append(args.ply)
        splat_io.write_scalar_ply(op.rep, H, args.ply)
    return {"n": op.lap.n, "signed": bool(args.signed), "median": float(np.median(H)),
            "mean": float(np.mean(H))}


def cmd_smooth(args, cfg, outputs):
    rep = load(args.input, cfg)
    op = build_operator(rep, cfg, args.prefilter)
    k = min(cfg.k_smooth, op.lap.n)
    spec = spectral.smallest_eigenpairs(op.lap, k, seed=cfg.seed)
    outputs.append(args.output)
    if isinstance(op.rep, splat_io.SplatSet):
        out = apps.smooth_splats(op.rep, spec, k)
        splat_io.write_splat_ply(out, args.output)
        moved = np.linalg.norm(out.means - op.rep.means, axis=1)
    else:
        v = apps.spectral_smoothing(spec, op.rep.vertices, k)
        splat_io.write_mesh_ply(args.output, v, op.rep.faces)
        moved = np.linalg.norm(v - op.rep.vertices, axis=1)
    return {"n": op.lap.n, "k_smooth": k, "max_displacement": float(moved.max()),
            "mean_displacement": float(moved.mean())}


def cmd_match_eval(args, cfg, outputs):
    src = build_operator(load(args.source, cfg), cfg)
    tgt = build_operator(load(args.target, cfg), cfg)
    _require(args.gt)
    gt = apps.read_correspondence_csv(args.gt, src.lap.n, tgt.lap.n)
    K = min(_n_eigen(src, cfg.K_eigen), _n_eigen(tgt, cfg.K_eigen))
    spec_s = spectral.smallest_eigenpairs(src.lap, K, seed=cfg.seed)
    spec_t = spectral.smallest_eigenpairs(tgt.lap, K, seed=cfg.seed)
    fmap = apps.functional_map(spec_s.eigenvectors, spec_t.eigenvectors, tgt.lap.mass, gt)
    pred = apps.spectral_nn_correspondence(spec_s.eigenvectors, spec_t.eigenvectors, fmap)
    solver = heat.HeatSolver(tgt.lap, tgt.soup, tgt.positions, cfg.heat_c)
    picked, err = apps.correspondence_error(pred, gt, lambda j: solver.distance([j]).values,
                                            tgt.lap.area, cfg.samples, cfg.seed)
    outputs.append(args.output)
    with open(args.output, "w") as fh:
        fh.write("source_index,error\n")
        for i, e in zip(picked, err):
            fh.write(f"{i},{float(e)!r}\n")
    if args.fmap:
        outputs.append(args.fmap)
        apps.write_functional_map_csv(fmap, args.fmap)
    if args.pred:
        outputs.append(args.pred)
        apps.write_correspondence_csv(pred, args.pred)
    return {"k": K, "samples": len(err), "E_corr_mean": float(err.mean()),
            "E_corr_median": float(np.median(err)), "E_corr_max": float(err.max()),
            "exact_match_rate": pred.accuracy(gt)}


def cmd_monitor(args, cfg, outputs):
    paths = []
    for pattern in args.checkpoints:
        hits = sorted(glob.glob(pattern))
        paths += hits if hits else [pattern]
    if len(paths) < 2:
        raise UsageError("monitor needs at least two checkpoints")
    records = spectral.monitor_checkpoints(
        paths, K=cfg.K_eigen, k=cfg.k_neighbors, metric=cfg.metric,
        normal_source=cfg.normal_source, drift_tol=cfg.drift_tol,
        consecutive=cfg.stable_consecutive, keep=cfg.keep_components, seed=cfg.seed,
        opacity_min=cfg.opacity_min)
    lines = [json.dumps({k: r.get(k) for k in ("path", "eigenvalues", "drift", "stable",
                                                "error") if k in r}) for r in records]
    if args.output:
        outputs.append(args.output)
        with open(args.output, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")
    first_stable = next((i for i, r in enumerate(records) if r["stable"]), None)
    return {"checkpoints": len(records), "failed": sum("error" in r for r in records),
            "first_stable_index": first_stable}


def cmd_evaluate(args, cfg, outputs):
    _require(args.mesh)
    _require(args.splats)
    mesh = splat_io.read_mesh(args.mesh)
    splats = splat_io.read_splat_ply(args.splats, opacity_min=cfg.opacity_min)
    result = apps.evaluate_representation(
        mesh, splats, K=cfg.K_eigen, k=cfg.k_neighbors, metric=cfg.metric,
        normal_source=cfg.normal_source, keep=cfg.keep_components, n_sources=cfg.n_sources,
        n_samples=cfg.samples, heat_c=cfg.heat_c, seed=cfg.seed)
    if args.output:
        outputs.append(args.output)
        with open(args.output, "w") as fh:
            json.dump(result, fh, indent=2)
    return result


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _add_config_flags(p):
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    g.add_argument("--metric", choices=neighborhood.METRICS)
    g.add_argument("--normal-source", dest="normal_source", choices=("covariance", "pca"))
    g.add_argument("--K-eigen", "--k-eigen", dest="K_eigen", type=int)
    g.add_argument("--k-smooth", dest="k_smooth", type=int)
    g.add_argument("--heat-c", dest="heat_c", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--keep-components", dest="keep_components", type=int)
    g.add_argument("--opacity-min", dest="opacity_min", type=float)
    g.add_argument("--zero-tol", dest="zero_tol", type=float)
    g.add_argument("--drift-tol", dest="drift_tol", type=float)
    g.add_argument("--stable-consecutive", dest="stable_consecutive", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--n-sources", dest="n_sources", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="splatlbo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        _add_config_flags(p)
        return p

    p = add("filter", cmd_filter, "keep the largest mutual-kNN components of a checkpoint")
    p.add_argument("input")
    p.add_argument("output")

    p = add("laplacian", cmd_laplacian, "assemble W and M and write Matrix Market files")
    p.add_argument("input")
    p.add_argument("--W", required=True)
    p.add_argument("--M", required=True)
    p.add_argument("--soup", help="write the triangle soup as PLY")
    p.add_argument("--edges", help="graph edge list CSV (splats only)")
    p.add_argument("--labels", help="component label CSV (splats only)")

    p = add("spectrum", cmd_spectrum, "smallest eigenpairs of the operator")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="eigenvalue CSV")
    p.add_argument("--vectors", help="eigenvectors (.csv, or raw doubles + .json sidecar)")

    p = add("geodesic", cmd_geodesic, "distance from source vertices")
    p.add_argument("input")
    p.add_argument("--source", type=int, action="append", required=True)
    p.add_argument("--method", choices=("heat", "dijkstra"), default="heat")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ply", help="colored PLY of the field")

    p = add("curvature", cmd_curvature, "mean curvature from the operator")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--signed", action="store_true", help="project on vertex/splat normals")
    p.add_argument("--ply")

    p = add("smooth", cmd_smooth, "spectral low-pass filter of positions")
    p.add_argument("input")
    p.add_argument("output")

    p = add("match-eval", cmd_match_eval, "functional-map correspondence error")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--gt", required=True, help="ground-truth source_index,target_index CSV")
    p.add_argument("-o", "--output", required=True, help="per-sample error CSV")
    p.add_argument("--fmap", help="functional map CSV")
    p.add_argument("--pred", help="recovered correspondence CSV")

    p = add("monitor", cmd_monitor, "spectrum drift over training checkpoints")
    p.add_argument("checkpoints", nargs="+", help="ordered paths or glob patterns")
    p.add_argument("-o", "--output", help="JSON lines file (default: stdout)")

    p = add("evaluate", cmd_evaluate, "full metric suite of a checkpoint against a mesh")
    p.add_argument("mesh")
    p.add_argument("splats")
    p.add_argument("-o", "--output", help="JSON result file")

    for name in ("laplacian", "spectrum", "geodesic", "curvature", "smooth"):
        sub.choices[name].add_argument(
            "--prefilter", action="store_true",
            help="prune to the kept components before building the operator")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.DEBUG if args.verbose else logging.INFO)
    outputs = []
    try:
        cfg = make_config(args)
        summary = args.func(args, cfg, outputs)
    except UsageError as exc:
        logger.error("%s", exc)
        _remove(outputs)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported via exit status
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        _remove(outputs)
        return 2
    if args.command != "monitor" or args.output:
        print(json.dumps(summary))
    else:
        logger.info("summary: %s", json.dumps(summary))
    return 0


def _remove(paths):
    for p in paths:
        try:
            os.remove(p)
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
