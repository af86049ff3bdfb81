"""L-curve sweep over the shrinkage weight lambda and corner selection.

Each lambda gets one full split Bregman reconstruction.  Runs are
independent and may execute in worker processes; the output is ordered by
lambda and does not depend on the worker count.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bregman import split_bregman
from .errors import NoCornerError, ReconstructionError
from .forward import Observation, ProblemSpec
from .optsmooth import make_setting

log = logging.getLogger(__name__)

__all__ = ["LCurvePoint", "sweep", "corner", "menger_curvature", "point_seed"]


@dataclass
class LCurvePoint:
    lam: float
    residual: float
    smoothness: float
    q: Optional[np.ndarray]
    seconds: float
    status: str = "ok"
    iterations: int = 0
    seed: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def point_seed(base_seed: int, index: int) -> int:
    """Per-run seed derived from the base seed and the lambda index."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _measures(setting, q, z):
    r = setting.forward(q) - z
    gq = setting.D @ q
    return float(setting.data_weights @ r ** 2), float(setting.grad_weights2 @ gq ** 2)


# Sweep context shared with forked workers; ProblemSpec may hold closures,
# which cannot be pickled, so workers inherit it instead.
_CTX: dict = {}


def _run_one(index: int):
    ctx = _CTX
    lam = ctx["lambdas"][index]
    seed = point_seed(ctx["base_seed"], index)
    t0 = time.perf_counter()
    try:
        setting = make_setting(ctx["problem"], ctx["layout"], ctx["weighted"])
        state, diag = split_bregman(ctx["problem"], ctx["z"], ctx["mu"], lam, setting=setting,
                                    **ctx["options"])
        res, smooth = _measures(setting, state.q, ctx["z"])
        status = "ok" if np.isfinite([res, smooth]).all() else "failed: non-finite measures"
        return LCurvePoint(lam, res, smooth, state.q, time.perf_counter() - t0, status, state.k, seed)
    except (ReconstructionError, ArithmeticError, ValueError) as exc:
        return LCurvePoint(lam, np.nan, np.nan, None, time.perf_counter() - t0,
                           f"failed: {exc}", 0, seed)


def sweep(problem: ProblemSpec, z, mu: float, lambdas: Sequence[float], workers: int = 1,
          base_seed: int = 0, layout: str = "auto", weighted: bool = True, **options):
    """Reconstruct for every lambda and return the L-curve points.

    ``options`` go to :func:`split_bregman` (``tol``, ``max_iter``, ``tv``,
    ``threshold_rule``, ``inner``...).  A failed run is recorded with its
    status and the sweep continues; if every run fails the sweep raises.
    """
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise ValueError("empty lambda grid")
    if any(v <= 0 for v in lambdas):
        raise ValueError("lambda values must be positive")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda values must be strictly increasing")
    zv = z.values if isinstance(z, Observation) else np.asarray(z, dtype=float)
    _CTX.clear()
    _CTX.update(problem=problem, z=zv, mu=float(mu), lambdas=lambdas, base_seed=base_seed,
                layout=layout, weighted=weighted, options=options)
    idx = range(len(lambdas))
    try:
        if workers > 1 and len(lambdas) > 1 and "fork" in mp.get_all_start_methods():
            with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork")) as pool:
                points = list(pool.map(_run_one, idx))
        else:
            points = [_run_one(i) for i in idx]
    finally:
        _CTX.clear()
    for p in points:
        if not p.ok:
            log.warning("lambda=%g %s", p.lam, p.status)
    if not any(p.ok for p in points):
        raise ReconstructionError("every run of the sweep failed")
    return points


def menger_curvature(x, y) -> np.ndarray:
    """Signed curvature of the circle through consecutive point triples.

    Entry ``i`` belongs to point ``i + 1``; counterclockwise turns are
    positive.
    """
    p = np.column_stack([x, y]).astype(float)
    a, b, c = p[:-2], p[1:-1], p[2:]
    ab, bc, ac = b - a, c - b, c - a
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1) * np.linalg.norm(ac, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        kappa = np.where(denom > 0, 2.0 * cross / denom, 0.0)
    return kappa


def corner(points, rtol: float = 1e-6) -> float:
    """Lambda at the maximum curvature of (log residual, log smoothness).

    Points are taken in increasing lambda, so the corner of an L-shaped
    curve is a counterclockwise turn.  Ties go to the larger lambda.  Raises
    :class:`NoCornerError` for collinear or constant-curvature input.
    """
    pts = sorted((p for p in points if p.ok), key=lambda p: p.lam)
    if len(pts) < 4:
        raise NoCornerError(f"corner detection needs at least 4 points, got {len(pts)}")
    res = np.array([p.residual for p in pts])
    smo = np.array([p.smoothness for p in pts])
    if not (np.isfinite(res).all() and np.isfinite(smo).all()) or (res <= 0).any() or (smo <= 0).any():
        raise NoCornerError("L-curve coordinates must be finite and positive")
    kappa = menger_curvature(np.log(res), np.log(smo))
    kmax = kappa.max()
    scale = np.abs(kappa).max()
    if kmax <= rtol * max(scale, 1.0) or kmax - kappa.min() <= rtol * scale:
        raise NoCornerError("the L-curve has no distinct corner; inspect it manually")
    ties = np.flatnonzero(kappa >= kmax - rtol * scale)
    return pts[int(ties[-1]) + 1].lam
