"""Command line interface: ``condrecon <verb> [options]``.

Verbs
-----
generate     synthesize data for a config or preset
reconstruct  split Bregman reconstruction from generated data
segment      K-means segmentation of a reconstruction
lcurve       lambda sweep and corner selection
verify       audit existing outputs

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bregman import split_bregman
from .config import (
    PRESETS,
    build_experiment,
    config_hash,
    derive_seed,
    load_config,
    load_preset,
    truth_indicator,
    validate,
)
from .errors import (
    ConfigError,
    MeshingError,
    NearSingularSystemError,
    NoCornerError,
    ReconstructionError,
    SegmentationError,
)
from .fieldio import atomic_write, field_csv, read_field, write_field, write_json
from .forward import Observation, assemble, solve, synthesize_data
from .lcurve import corner, sweep
from .mesh import RectGrid, dump_trimesh, load_trimesh
from .optsmooth import make_setting
from .segment import phase_accuracy, segment_field

log = logging.getLogger("condrecon")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class ValidationFailure(Exception):
    """Inputs on disk are missing or inconsistent."""


# ---------------------------------------------------------------------------
# helpers


def _config_from_args(args) -> dict:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both", "arguments")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required", "arguments")
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
        cfg = validate(cfg)
    return cfg


def _require(path: Path) -> Path:
    if not path.exists():
        raise ValidationFailure(f"required file {path} is missing")
    return path


def _load_data(cfg, data_dir: Path):
    """Rebuild the experiment on the stored domain and check the config hash."""
    meta = json.loads(_require(data_dir / "data.json").read_text())
    h = config_hash(cfg)
    if meta.get("config_hash") != h:
        raise ValidationFailure(
            f"config hash {h[:12]} does not match the data in {data_dir} ({str(meta.get('config_hash'))[:12]})")
    domain = None
    if cfg["discretization"]["kind"] == "fem":
        domain = load_trimesh(_require(data_dir / "mesh.txt").read_text())
    exp = build_experiment(cfg, domain)
    rows = list(csv.reader(io.StringIO(_require(data_dir / "z.csv").read_text())))
    if rows[0] != ["index", "value"]:
        raise ValidationFailure("z.csv must have the header index,value")
    idx = np.array([int(r[0]) for r in rows[1:]])
    vals = np.array([float(r[1]) for r in rows[1:]])
    disc = exp.problem.discretization
    if not np.array_equal(idx, disc.observed):
        raise ValidationFailure("observation points in z.csv do not match the problem")
    z = Observation(vals, idx, disc.obs_weights, meta.get("provenance", {}))
    return exp, z, meta


def _observation_csv(z: Observation) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["index", "value"])
    for i, v in zip(z.indices.tolist(), z.values.tolist()):
        wr.writerow([i, repr(float(v))])
    return buf.getvalue()


def _gradient_csv(vec) -> str:
    g = np.asarray(vec, dtype=float).reshape(2, -1).T
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["point", "gx", "gy"])
    for k, (a, b) in enumerate(g.tolist()):
        wr.writerow([k, repr(a), repr(b)])
    return buf.getvalue()


def _split_options(rc: dict) -> dict:
    return dict(
        tol=rc["tol"],
        max_iter=rc["max_iter"],
        tv=rc["tv"],
        threshold_rule=rc["threshold_rule"],
        inner=dict(rc.get("inner", {})),
    )


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    exp = build_experiment(cfg)
    u = solve(assemble(exp.q_true, exp.problem))
    z = synthesize_data(exp.q_true, exp.problem)
    if not isinstance(exp.domain, RectGrid):
        atomic_write(out / "mesh.txt", dump_trimesh(exp.domain))
    atomic_write(out / "config.yaml", yaml.safe_dump(cfg, sort_keys=True))
    write_field(out / "kappa_true.csv", exp.domain, np.exp(exp.q_true))
    write_field(out / "u_clean.csv", exp.domain, u)
    write_field(out / "truth_labels.csv", exp.domain, exp.truth_labels)
    atomic_write(out / "z.csv", _observation_csv(z))
    meta = {
        "config_hash": config_hash(cfg),
        "provenance": z.provenance,
        "points": int(exp.domain.size),
        "observations": int(len(z.values)),
    }
    if exp.mesh_quality is not None:
        meta["min_triangle_quality"] = exp.mesh_quality
    write_json(out / "data.json", meta)
    print(f"generated {cfg.get('name', 'experiment')}: {exp.domain.size} points, "
          f"{len(z.values)} observations -> {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    data_dir = Path(args.data) if args.data else out
    exp, z, _ = _load_data(cfg, data_dir)
    rc = cfg["reconstruction"]
    setting = make_setting(exp.problem, weighted=rc["norms"] == "weighted")
    t0 = time.perf_counter()
    run_log = []

    def progress(state, diag):
        rep = diag.inner[-1]
        entry = {"k": state.k, "err": diag.err[-1], "J": diag.J[-1]}
        if rep is not None:
            entry.update(inner_iterations=rep.nit, inner_evaluations=rep.nfev,
                         inner_exit=rep.exit_reason, inner_grad_norm=rep.grad_norm)
        run_log.append(entry)
        log.info("k=%d err=%.3e J=%.6e", state.k, diag.err[-1], diag.J[-1])

    state, diag = split_bregman(exp.problem, z, rc["mu"], rc["lambda"], setting=setting,
                                callback=progress, **_split_options(rc))
    elapsed = time.perf_counter() - t0
    write_field(out / "q.csv", exp.domain, state.q)
    write_field(out / "kappa.csv", exp.domain, np.exp(state.q))
    atomic_write(out / "d.csv", _gradient_csv(state.d))
    atomic_write(out / "b.csv", _gradient_csv(state.b))
    atomic_write(out / "diagnostics.csv", diag.to_csv())
    atomic_write(out / "run_log.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in run_log))
    write_json(out / "reconstruction.json", {
        "config_hash": config_hash(cfg),
        "iterations": state.k,
        "converged": state.converged,
        "final_err": diag.err[-1] if diag.err else None,
        "seconds": elapsed,
    })
    status = "converged" if state.converged else "stopped at the iteration cap"
    print(f"reconstruction {status} after {state.k} iterations "
          f"(err {diag.err[-1]:.3e}) -> {out}" if diag.err else f"no iterations run -> {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    data_dir = Path(args.data) if args.data else out
    exp, _, _ = _load_data(cfg, data_dir)
    kappa = read_field(_require(out / "kappa.csv"), exp.domain)
    sg = cfg["segmentation"]
    res = segment_field(kappa, sg["K"], sg["mode"], derive_seed(cfg["seed"], "segmentation"))
    summary = res.to_dict()
    truth = true_phases(exp.q_true)
    if truth is not None and sg["K"] == 2:
        acc = phase_accuracy(res.labels, truth, K=2)
        summary.update(accuracy=acc["accuracy"], dice=acc["dice"],
                       inclusion_dice=high_phase_dice(res.labels, truth))
    write_field(out / "kappa_d.csv", exp.domain, res.kappa_d)
    write_field(out / "labels.csv", exp.domain, res.labels)
    write_json(out / "segmentation.json", summary)
    line = f"segmented into {res.K} phases, means {np.round(res.means, 4).tolist()}"
    if "accuracy" in summary:
        line += f", accuracy {summary['accuracy']:.4f}"
    print(line)
    return EXIT_OK


def true_phases(q_true):
    """Two-phase labels of a two-valued true field (1 = higher conductivity), else None."""
    levels = np.unique(q_true)
    if len(levels) != 2:
        return None
    return (q_true == levels[1]).astype(int)


def high_phase_dice(labels, truth) -> float:
    """Dice of the highest-mean phase against the true high-conductivity region."""
    pred = np.asarray(labels) == np.max(labels)
    tru = np.asarray(truth) == 1
    denom = pred.sum() + tru.sum()
    return float(2.0 * np.sum(pred & tru) / denom) if denom else 1.0


def lcurve_report(points) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["lambda", "residual", "grad_norm_sq", "status"])
    for p in points:
        wr.writerow([repr(p.lam), repr(p.residual), repr(p.smoothness), p.status])
    return buf.getvalue()


def cmd_lcurve(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    data_dir = Path(args.data) if args.data else out
    exp, z, _ = _load_data(cfg, data_dir)
    lams = [float(v) for v in (args.lambdas or cfg["lcurve"]["lambdas"])]
    if len(lams) < 4:
        raise ConfigError(f"corner detection needs at least 4 lambda values, got {len(lams)}", "lcurve.lambdas")
    rc = cfg["reconstruction"]
    points = sweep(exp.problem, z, rc["mu"], lams, workers=args.workers,
                   base_seed=derive_seed(cfg["seed"], "lcurve"),
                   weighted=rc["norms"] == "weighted", **_split_options(rc))
    atomic_write(out / "lcurve.csv", lcurve_report(points))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["lambda", "log_residual", "log_grad_norm_sq"])
    for p in points:
        if p.ok:
            wr.writerow([repr(p.lam), repr(float(np.log(p.residual))), repr(float(np.log(p.smoothness)))])
    atomic_write(out / "lcurve_loglog.csv", buf.getvalue())
    atomic_write(out / "lcurve_timings.csv", "lambda,seconds,iterations\n" + "".join(
        f"{p.lam!r},{p.seconds:.3f},{p.iterations}\n" for p in points))
    for i, p in enumerate(points):
        if p.q is not None:
            write_field(out / f"q_lambda_{i:02d}.csv", exp.domain, p.q)
    lam_star = corner(points)
    write_json(out / "corner.json", {"lambda": lam_star, "lambdas": lams})
    print(f"L-curve corner at lambda = {lam_star:g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Audit outputs: field round trips, hashes, segmentation invariants, preset geometry."""
    cfg = _config_from_args(args)
    out = Path(args.out)
    checks = []

    def check(name, ok, detail=""):
        checks.append((name, bool(ok)))
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")

    exp, z, meta = _load_data(cfg, out)
    check("config hash", True, meta["config_hash"][:12])
    for name in ("kappa_true.csv", "u_clean.csv", "q.csv", "kappa.csv", "kappa_d.csv", "labels.csv"):
        path = out / name
        if path.exists():
            text = path.read_text()
            vals = read_field(path, exp.domain)
            check(f"round trip {name}", field_csv(exp.domain, vals) == text)
    kt = out / "kappa_true.csv"
    if kt.exists():
        check("true field matches config", np.array_equal(read_field(kt, exp.domain), np.exp(exp.q_true)))
    diag = out / "diagnostics.csv"
    if diag.exists():
        rows = list(csv.reader(io.StringIO(diag.read_text())))[1:]
        rec = json.loads((out / "reconstruction.json").read_text())
        check("diagnostics length", len(rows) == rec["iterations"], f"{len(rows)} rows")
        check("diagnostics finite", all(np.isfinite([float(v) for v in r[1:]]).all() for r in rows))
    seg = out / "segmentation.json"
    if seg.exists():
        s = json.loads(seg.read_text())
        means, thr = np.array(s["means"]), np.array(s["thresholds"])
        labels = read_field(out / "labels.csv", exp.domain).astype(int)
        kd = read_field(out / "kappa_d.csv", exp.domain)
        check("means sorted", np.all(np.diff(means) >= 0))
        check("thresholds interleave", np.all((means[:-1] <= thr) & (thr <= means[1:])))
        check("segmented field equals phase means", np.array_equal(kd, means[labels]))
    # geometry audit on 1000 random points of the bounding box
    rng = np.random.default_rng(derive_seed(cfg["seed"], "audit"))
    pts = exp.domain.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    sample = lo + rng.random((1000, 2)) * (hi - lo)
    check("inclusion membership audit", np.array_equal(truth_indicator(cfg, sample), _analytic_indicator(cfg, sample)))
    failed = [n for n, ok in checks if not ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def _analytic_indicator(cfg, p) -> np.ndarray:
    """Independent evaluation of the inclusion regions written out longhand."""
    tr = cfg["truth"]
    x, y = p[:, 0], p[:, 1]
    if tr["kind"] == "layered":
        v = x if tr.get("axis", "y") == "x" else y
        return (v < tr["level"]).astype(int)
    if tr["kind"] == "disc-inclusion":
        cx, cy = tr.get("center", (0.0, 0.0))
        return ((x - cx) ** 2 + (y - cy) ** 2 < tr["radius"] ** 2).astype(int)
    if tr["kind"] == "clover":
        cx, cy = tr.get("center", (0.0, 0.0))
        th = np.arctan2(y - cy, x - cx)
        s = 0.5 * np.sin(2 * th) + 0.125 * np.sin(6 * th)
        return ((x - cx) ** 2 + (y - cy) ** 2 < np.sqrt(s ** 4 + tr.get("eps", 1e-3))).astype(int)
    return np.zeros(len(p), dtype=int)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condrecon", description="Blocky conductivity reconstruction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, helptext in [
        ("generate", "synthesize data"),
        ("reconstruct", "run split Bregman on generated data"),
        ("segment", "segment a reconstruction"),
        ("lcurve", "sweep lambda and pick the L-curve corner"),
        ("verify", "audit existing outputs"),
    ]:
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--preset", choices=PRESETS, help="built-in experiment")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb in ("reconstruct", "segment", "lcurve"):
            p.add_argument("--data", help="directory with generated data (default: --out)")
        if verb == "lcurve":
            p.add_argument("--workers", type=int, default=1, help="parallel reconstructions")
            p.add_argument("--lambdas", type=float, nargs="+", help="override the lambda grid")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "segment": cmd_segment,
    "lcurve": cmd_lcurve,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.verb](args)
    except (SegmentationError, NoCornerError, MeshingError, NearSingularSystemError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValidationFailure, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ReconstructionError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
