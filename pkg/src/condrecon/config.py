"""Experiment configuration: YAML files, presets and problem construction.

A config describes the domain, its discretization, boundary data, forcing,
the true conductivity, noise, and the reconstruction, segmentation and
L-curve settings.  Boundary data is keyed by named boundary pieces of the
domain (``left``/``right``/``bottom``/``top`` for a rectangle, ``outer``
and ``inner`` for discs and annuli, ``upper``/``lower`` for the crown).
Pieces without Dirichlet data carry the Neumann flux.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .errors import ConfigError
from .forward import NoiseModel, PointSource, ProblemSpec
from .mesh import (
    RectGrid,
    approximate_signed_distance,
    build_rect_grid,
    combine_sdf,
    sdf_disc,
    sdf_rectangle,
    triangulate,
)

__all__ = [
    "PRESETS",
    "load_config",
    "load_preset",
    "validate",
    "config_hash",
    "Experiment",
    "build_experiment",
    "clover_radius",
    "crown_lower",
]

PRESETS = ("square-layered", "clover", "disc", "annulus", "crown")

DEFAULTS = {
    "seed": 0,
    "noise": {"nsr": 0.01},
    "boundary": {"dirichlet": {}, "neumann": 0.0},
    "forcing": {"kind": "none"},
    "reconstruction": {
        "tv": "isotropic",
        "norms": "weighted",
        "threshold_rule": "inverse",
        "tol": 1e-6,
        "max_iter": 50,
        "inner": {"gtol": 1e-8, "max_iter": 200},
    },
    "segmentation": {"K": 2, "mode": "threshold"},
    "lcurve": {"lambdas": [0.5, 1, 2, 5, 10, 15, 20, 50]},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", "config")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", "config") from exc
    return validate(raw, base_dir=path.parent)


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "preset")
    text = resources.files("condrecon.presets").joinpath(f"{name}.yaml").read_text()
    return validate(yaml.safe_load(text))


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, fixed separators)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Validation

_DOMAINS = {
    "rect": {"left", "right", "bottom", "top"},
    "disc": {"outer"},
    "annulus": {"outer", "inner"},
    "crown": {"upper", "lower"},
}


def _need(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"missing required key {key!r}", f"{path}.{key}" if path else key)
    return d[key]


def _positive(v, path):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
        raise ConfigError(f"expected a positive number, got {v!r}", path)
    return float(v)


def _number(v, path):
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}", path)
    return float(v)


def _boundary_value(v, path):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, dict) and set(v) == {"harmonic"}:
        n = v["harmonic"]
        if not isinstance(n, int) or n < 0:
            raise ConfigError("harmonic order must be a nonnegative integer", f"{path}.harmonic")
        return {"harmonic": n}
    raise ConfigError(f"boundary value must be a number or {{harmonic: n}}, got {v!r}", path)


def validate(raw, base_dir: Optional[Path] = None) -> dict:
    """Fill defaults and check a raw config mapping; errors name the field path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", "config")
    cfg = _merge(DEFAULTS, raw)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    dom = _need(cfg, "domain", "")
    kind = _need(dom, "kind", "domain")
    if kind not in _DOMAINS:
        raise ConfigError(f"unknown domain kind {kind!r}", "domain.kind")
    if kind == "rect":
        ext = _need(dom, "extents", "domain")
        if not (isinstance(ext, list) and len(ext) == 4):
            raise ConfigError("extents must be [xmin, xmax, ymin, ymax]", "domain.extents")
        if not (ext[1] > ext[0] and ext[3] > ext[2]):
            raise ConfigError("extents must be nondegenerate", "domain.extents")
    elif kind in ("disc", "annulus"):
        _positive(_need(dom, "radius", "domain"), "domain.radius")
        if kind == "annulus":
            r_in = _positive(_need(dom, "inner_radius", "domain"), "domain.inner_radius")
            if r_in >= dom["radius"]:
                raise ConfigError("inner radius must be below the outer radius", "domain.inner_radius")

    disc = _need(cfg, "discretization", "")
    dk = _need(disc, "kind", "discretization")
    if dk == "ccfd":
        if kind != "rect":
            raise ConfigError("ccfd needs a rectangular domain", "discretization.kind")
        for key in ("nx", "ny"):
            v = _need(disc, key, "discretization")
            if not isinstance(v, int) or v < 2:
                raise ConfigError(f"{key} must be an integer >= 2", f"discretization.{key}")
    elif dk == "fem":
        _positive(_need(disc, "h", "discretization"), "discretization.h")
    else:
        raise ConfigError(f"unknown discretization {dk!r}", "discretization.kind")

    bnd = cfg["boundary"]
    pieces = _DOMAINS[kind]
    dirichlet = bnd.get("dirichlet") or {}
    if not isinstance(dirichlet, dict):
        raise ConfigError("dirichlet must map boundary pieces to values", "boundary.dirichlet")
    for name, v in dirichlet.items():
        if name not in pieces:
            raise ConfigError(f"unknown boundary piece {name!r} for a {kind} domain", f"boundary.dirichlet.{name}")
        dirichlet[name] = _boundary_value(v, f"boundary.dirichlet.{name}")
    bnd["dirichlet"] = dirichlet
    bnd["neumann"] = _number(bnd.get("neumann", 0.0), "boundary.neumann")

    frc = cfg["forcing"]
    fk = _need(frc, "kind", "forcing")
    if fk == "point":
        for key in ("x", "y"):
            _number(_need(frc, key, "forcing"), f"forcing.{key}")
    elif fk == "constant":
        _number(_need(frc, "value", "forcing"), "forcing.value")
    elif fk != "none":
        raise ConfigError(f"unknown forcing kind {fk!r}", "forcing.kind")

    tr = _need(cfg, "truth", "")
    tk = _need(tr, "kind", "truth")
    if tk == "layered":
        _number(_need(tr, "level", "truth"), "truth.level")
        if tr.get("axis", "y") not in ("x", "y"):
            raise ConfigError("axis must be x or y", "truth.axis")
        _positive(_need(tr, "kappa_below", "truth"), "truth.kappa_below")
        _positive(_need(tr, "kappa_above", "truth"), "truth.kappa_above")
    elif tk in ("clover", "disc-inclusion"):
        _positive(_need(tr, "kappa_in", "truth"), "truth.kappa_in")
        _positive(_need(tr, "kappa_out", "truth"), "truth.kappa_out")
        if tk == "disc-inclusion":
            _positive(_need(tr, "radius", "truth"), "truth.radius")
    elif tk == "constant":
        _positive(_need(tr, "kappa", "truth"), "truth.kappa")
    elif tk == "field-file":
        p = Path(_need(tr, "path", "truth"))
        p = p if p.is_absolute() else base_dir / p
        if not p.exists():
            raise ConfigError(f"field file {p} does not exist", "truth.path")
        tr["path"] = str(p)
    else:
        raise ConfigError(f"unknown truth kind {tk!r}", "truth.kind")

    nz = cfg["noise"]
    nsr = _number(nz.get("nsr", 0.01), "noise.nsr")
    if nsr < 0:
        raise ConfigError("nsr must be nonnegative", "noise.nsr")

    rc = cfg["reconstruction"]
    if ("alpha" in rc) == ("mu" in rc):
        raise ConfigError("give exactly one of alpha and mu", "reconstruction")
    if "alpha" in rc:
        rc["mu"] = 1.0 / _positive(rc.pop("alpha"), "reconstruction.alpha")
    else:
        rc["mu"] = _positive(rc["mu"], "reconstruction.mu")
    _positive(_need(rc, "lambda", "reconstruction"), "reconstruction.lambda")
    if rc["tv"] not in ("isotropic", "anisotropic"):
        raise ConfigError("tv must be isotropic or anisotropic", "reconstruction.tv")
    if rc["norms"] not in ("weighted", "unweighted"):
        raise ConfigError("norms must be weighted or unweighted", "reconstruction.norms")
    if rc["threshold_rule"] not in ("inverse", "half"):
        raise ConfigError("threshold_rule must be inverse or half", "reconstruction.threshold_rule")
    _positive(rc["tol"], "reconstruction.tol")
    if not isinstance(rc["max_iter"], int) or rc["max_iter"] < 0:
        raise ConfigError("max_iter must be a nonnegative integer", "reconstruction.max_iter")

    sg = cfg["segmentation"]
    if not isinstance(sg.get("K"), int) or sg["K"] < 2:
        raise ConfigError("K must be an integer >= 2", "segmentation.K")
    if sg.get("mode") not in ("threshold", "direct"):
        raise ConfigError("mode must be threshold or direct", "segmentation.mode")

    lams = cfg["lcurve"]["lambdas"]
    if not (isinstance(lams, list) and lams):
        raise ConfigError("lambdas must be a nonempty list", "lcurve.lambdas")
    for i, v in enumerate(lams):
        _positive(v, f"lcurve.lambdas[{i}]")
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ConfigError("lambdas must be strictly increasing", "lcurve.lambdas")

    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer", "seed")
    return cfg


# ---------------------------------------------------------------------------
# Geometry


def clover_radius(theta, eps: float = 1e-3):
    """Boundary radius of the four-leaved clover at polar angle ``theta``."""
    s = 0.5 * np.sin(2 * theta) + 0.125 * np.sin(6 * theta)
    return (s ** 4 + eps) ** 0.25


def crown_lower(x):
    return 5.0 * (2.0 * x / (5.0 * np.pi)) ** 4 - 5.0


def _crown_sdf(n_samples: int = 10000):
    xr = 5.0 * np.pi / 2.0
    interval = (-xr - 0.5, xr + 0.5)
    upper = approximate_signed_distance(np.cos, lambda p: p[:, 1] <= np.cos(p[:, 0]),
                                        n_samples=n_samples, interval=interval)
    lower = approximate_signed_distance(crown_lower, lambda p: p[:, 1] >= crown_lower(p[:, 0]),
                                        n_samples=n_samples, interval=interval)
    return combine_sdf("intersection", upper, lower)


def _domain_geometry(dom):
    """Signed distance, bounding box and fixed points of a curved domain."""
    kind = dom["kind"]
    c = tuple(dom.get("center", (0.0, 0.0)))
    if kind == "disc":
        r = dom["radius"]
        return sdf_disc(c, r), (c[0] - r, c[0] + r, c[1] - r, c[1] + r), None
    if kind == "annulus":
        r, ri = dom["radius"], dom["inner_radius"]
        sdf = combine_sdf("difference", sdf_disc(c, r), sdf_disc(c, ri))
        return sdf, (c[0] - r, c[0] + r, c[1] - r, c[1] + r), None
    if kind == "crown":
        xr = 5.0 * np.pi / 2.0
        return _crown_sdf(dom.get("n_samples", 10000)), (-xr, xr, -5.0, 1.0), np.array([[-xr, 0.0], [xr, 0.0]])
    raise ValueError(kind)


def _piece_classifier(dom) -> Callable[[np.ndarray], np.ndarray]:
    """Map boundary points to piece names."""
    kind = dom["kind"]
    if kind == "rect":
        x0, x1, y0, y1 = dom["extents"]

        def rect(p):
            # distance to each side; the nearest side wins
            d = np.column_stack([np.abs(p[:, 0] - x0), np.abs(p[:, 0] - x1),
                                 np.abs(p[:, 1] - y0), np.abs(p[:, 1] - y1)])
            names = np.array(["left", "right", "bottom", "top"])
            return names[np.argmin(d, axis=1)]
        return rect
    if kind == "disc":
        return lambda p: np.full(len(p), "outer")
    if kind == "annulus":
        c = np.asarray(dom.get("center", (0.0, 0.0)))
        mid = 0.5 * (dom["radius"] + dom["inner_radius"])
        return lambda p: np.where(np.hypot(*(p - c).T) < mid, "inner", "outer")
    if kind == "crown":
        return lambda p: np.where(np.abs(p[:, 1] - np.cos(p[:, 0])) <= np.abs(p[:, 1] - crown_lower(p[:, 0])),
                                  "upper", "lower")
    raise ValueError(kind)


def _boundary_function(value, center):
    if isinstance(value, float):
        return lambda p: np.full(len(p), value)
    n = value["harmonic"]
    c = np.asarray(center, dtype=float)

    def harmonic(p):
        x, y = (p - c).T
        return np.hypot(x, y) ** n * np.sin(n * np.arctan2(y, x))
    return harmonic


# ---------------------------------------------------------------------------
# Problem construction


@dataclass(eq=False)
class Experiment:
    config: dict
    problem: ProblemSpec
    q_true: np.ndarray
    truth_labels: np.ndarray
    mesh_quality: Optional[float] = None

    @property
    def domain(self):
        return self.problem.domain

    @property
    def reconstruction(self) -> dict:
        return self.config["reconstruction"]


def truth_indicator(cfg: dict, pts: np.ndarray) -> np.ndarray:
    """1 where the point lies in the high-conductivity region, else 0."""
    tr = cfg["truth"]
    kind = tr["kind"]
    if kind == "layered":
        ax = 0 if tr.get("axis", "y") == "x" else 1
        return (pts[:, ax] < tr["level"]).astype(int)
    if kind == "clover":
        c = np.asarray(tr.get("center", (0.0, 0.0)))
        d = pts - c
        r = np.hypot(d[:, 0], d[:, 1])
        return (r < clover_radius(np.arctan2(d[:, 1], d[:, 0]), tr.get("eps", 1e-3))).astype(int)
    if kind == "disc-inclusion":
        c = np.asarray(tr.get("center", (0.0, 0.0)))
        return (np.hypot(*(pts - c).T) < tr["radius"]).astype(int)
    return np.zeros(len(pts), dtype=int)


def _q_true(cfg, domain) -> np.ndarray:
    tr = cfg["truth"]
    pts = domain.points
    kind = tr["kind"]
    if kind == "constant":
        return np.full(domain.size, np.log(tr["kappa"]))
    if kind == "field-file":
        from .fieldio import read_field
        vals = read_field(tr["path"], domain)
        if (vals <= 0).any():
            raise ConfigError("conductivity field must be positive", "truth.path")
        return np.log(vals)
    ind = truth_indicator(cfg, pts)
    if kind == "layered":
        lo, hi = np.log(tr["kappa_below"]), np.log(tr["kappa_above"])
        return np.where(ind == 1, lo, hi)
    return np.where(ind == 1, np.log(tr["kappa_in"]), np.log(tr["kappa_out"]))


def build_domain(cfg: dict):
    dom, disc = cfg["domain"], cfg["discretization"]
    if disc["kind"] == "ccfd":
        return build_rect_grid(disc["nx"], disc["ny"], tuple(dom["extents"])), None
    if dom["kind"] == "rect":
        sdf = sdf_rectangle(tuple(dom["extents"]))
        x0, x1, y0, y1 = dom["extents"]
        bbox, fixed = (x0, x1, y0, y1), np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]])
    else:
        sdf, bbox, fixed = _domain_geometry(dom)
    mesh = triangulate(sdf, disc["h"], bbox, fixed_points=fixed, max_iter=disc.get("max_iter", 500))
    from .mesh import triangle_quality
    return mesh, float(np.min(triangle_quality(mesh)))


def build_experiment(cfg: dict, domain=None) -> Experiment:
    """Build the discrete problem and the true field described by ``cfg``.

    ``domain`` reuses an existing grid or mesh (for instance one loaded
    from a previous ``generate`` run) instead of meshing again.
    """
    quality = None
    if domain is None:
        domain, quality = build_domain(cfg)
    bnd = cfg["boundary"]
    classify = _piece_classifier(cfg["domain"])
    center = cfg["domain"].get("center", (0.0, 0.0))
    dvals = {k: _boundary_function(v, center) for k, v in bnd["dirichlet"].items()}
    names = set(dvals)

    def is_dirichlet(p):
        return np.isin(classify(p), list(names))

    def g_dirichlet(p):
        out = np.zeros(len(p))
        lab = classify(p)
        for name, fn in dvals.items():
            m = lab == name
            if m.any():
                out[m] = fn(p[m])
        return out

    frc = cfg["forcing"]
    if frc["kind"] == "point":
        source = PointSource(frc["x"], frc["y"], frc.get("strength", 1.0))
    elif frc["kind"] == "constant":
        source = frc["value"]
    else:
        source = None
    problem = ProblemSpec(
        domain,
        dirichlet=is_dirichlet if names else (lambda p: np.zeros(len(p), dtype=bool)),
        g_dirichlet=g_dirichlet,
        g_neumann=bnd["neumann"],
        source=source,
        noise=NoiseModel(cfg["noise"]["nsr"], derive_seed(cfg["seed"], "noise")),
    )
    q_true = _q_true(cfg, domain)
    labels = truth_indicator(cfg, domain.points)
    return Experiment(cfg, problem, q_true, labels, quality)


def derive_seed(base: int, label: str) -> int:
    """Subsystem seed from the base seed and a fixed label."""
    key = [int(base)] + list(label.encode())
    return int(np.random.SeedSequence(key).generate_state(1)[0])
