"""Outer iterations: split Bregman, ADMM, simplified ADMM and general ADMM.

All four schemes operate on an :class:`AdmmProblem`, which abstracts the
constraint maps ``F`` (state to observation) and ``Phi`` (discrete
gradient), the objective pieces ``H`` and ``G``, and the three subproblem
solvers.  :func:`pde_problem` builds one for a diffusion problem; small
linear problems can be written by hand.

Split variables and multipliers are flat vectors: ``s``, ``c`` in
observation space, ``d``, ``b`` as stacked ``[x; y]`` gradient components.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ReconstructionError, UnsupportedDiagnosticError
from .forward import Observation, ProblemSpec
from .optsmooth import Setting, SubproblemSpec, make_setting, minimize, vec_to_field

log = logging.getLogger(__name__)

__all__ = [
    "shrink",
    "shrink_vec",
    "AdmmProblem",
    "Iterate",
    "BregmanState",
    "ConvergenceDiagnostics",
    "pde_problem",
    "quadratic_prox",
    "split_bregman",
    "admm",
    "simplified_admm",
    "general_admm",
    "lyapunov",
    "summable_decrease",
    "relative_change",
]


# ---------------------------------------------------------------------------
# Shrinkage


def shrink(w, threshold: float, mode: str = "isotropic") -> np.ndarray:
    """Generalized soft thresholding of a gradient field ``w`` of shape ``(n, 2)``.

    Isotropic: ``max(|w| - t, 0) * w / |w|`` with the pointwise Euclidean
    magnitude; anisotropic: scalar soft thresholding per component.  This is
    the minimizer of ``|d|_1 + (1 / (2 t)) |d - w|^2``.
    """
    if not threshold > 0:
        raise ValueError("shrinkage threshold must be positive")
    w = np.asarray(w, dtype=float)
    if mode == "anisotropic":
        return np.sign(w) * np.maximum(np.abs(w) - threshold, 0.0)
    if mode != "isotropic":
        raise ValueError(f"unknown TV mode {mode!r}")
    mag = np.hypot(w[..., 0], w[..., 1])
    scale = np.maximum(mag - threshold, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(mag > 0, scale / mag, 0.0)
    return w * factor[..., None]


def shrink_vec(v, threshold: float, mode: str = "isotropic") -> np.ndarray:
    """:func:`shrink` on a stacked ``[x; y]`` vector."""
    v = np.asarray(v, dtype=float)
    return shrink(v.reshape(2, -1).T, threshold, mode).T.ravel()


def _l1(v, w2, mode):
    if mode == "anisotropic":
        return float(w2 @ np.abs(v))
    n = len(v) // 2
    return float(w2[:n] @ np.hypot(v[:n], v[n:]))


def quadratic_prox(z, mu: float, rho: float):
    """Closed-form ``argmin_s (mu/2)|s - z|^2 + (rho/2)|s - v|^2``."""
    z = np.asarray(z, dtype=float)
    a, b = mu / (mu + rho), rho / (mu + rho)
    return lambda v: a * z + b * v


# ---------------------------------------------------------------------------
# Problem and state containers


@dataclass(eq=False)
class AdmmProblem:
    """``min H(s) + G(d)  s.t.  s = F(q), d = Phi(q)``.

    ``solve_q(s_target, s_weight, d_target, q_prev)`` returns
    ``argmin_q (s_weight/2)|F(q) - s_target|^2 + (lam/2)|Phi(q) - d_target|^2``
    and optionally an inner report as ``(q, report)``.  ``prox_H(v)`` and
    ``prox_G(v)`` minimize ``H(s) + (rho/2)|s - v|^2`` and
    ``G(d) + (lam/2)|d - v|^2``.  Inner products carry ``s_weights`` and
    ``d_weights`` (ones when omitted).
    """

    F: Callable[[np.ndarray], np.ndarray]
    Phi: Callable[[np.ndarray], np.ndarray]
    H: Callable[[np.ndarray], float]
    G: Callable[[np.ndarray], float]
    solve_q: Callable
    prox_H: Optional[Callable] = None
    prox_G: Optional[Callable] = None
    rho: float = 1.0
    lam: float = 1.0
    q0: Optional[np.ndarray] = None
    s_weights: Optional[np.ndarray] = None
    d_weights: Optional[np.ndarray] = None
    setting: Optional[Setting] = None

    def __post_init__(self):
        if not (self.rho > 0 and self.lam > 0):
            raise ValueError("penalty weights rho and lam must be positive")

    def s_norm2(self, v):
        return float(v @ v) if self.s_weights is None else float(self.s_weights @ (v * v))

    def d_norm2(self, v):
        return float(v @ v) if self.d_weights is None else float(self.d_weights @ (v * v))


@dataclass
class Iterate:
    k: int
    q: np.ndarray
    d: np.ndarray
    b: np.ndarray
    s: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None


@dataclass
class ConvergenceDiagnostics:
    k: list = field(default_factory=list)
    err: list = field(default_factory=list)
    J: list = field(default_factory=list)
    Rs_norm: list = field(default_factory=list)
    Rd_norm: list = field(default_factory=list)
    V: Optional[list] = None
    inner: list = field(default_factory=list)

    def __len__(self):
        return len(self.k)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        head = ["k", "err", "J", "Rs_norm", "Rd_norm"] + (["V"] if self.V is not None else [])
        wr.writerow(head)
        for i in range(len(self.k)):
            row = [self.k[i], self.err[i], self.J[i], self.Rs_norm[i], self.Rd_norm[i]]
            if self.V is not None:
                row.append(self.V[i])
            wr.writerow([r if isinstance(r, int) else repr(float(r)) for r in row])
        return buf.getvalue()


@dataclass
class BregmanState:
    """Final iterate of an outer loop plus an optional iterate history."""

    k: int
    q: np.ndarray
    d: np.ndarray
    b: np.ndarray
    s: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    converged: bool = False
    history: list = field(default_factory=list)

    @property
    def d_field(self):
        return vec_to_field(self.d)

    @property
    def b_field(self):
        return vec_to_field(self.b)


def relative_change(q_new, q_old) -> float:
    """``|q_new - q_old|^2 / |q_new|^2`` (0 when both vanish)."""
    num = float(np.sum((q_new - q_old) ** 2))
    den = float(np.sum(q_new ** 2))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


# ---------------------------------------------------------------------------
# PDE instance


def pde_problem(problem: ProblemSpec, z, mu: float, lam: float, rho: Optional[float] = None,
                layout: str = "auto", weighted: bool = True, tv: str = "isotropic",
                threshold_rule: str = "inverse", q0=None, inner: Optional[dict] = None,
                setting: Optional[Setting] = None) -> AdmmProblem:
    """Wrap a diffusion problem and its data as an :class:`AdmmProblem`.

    ``threshold_rule="inverse"`` shrinks with threshold ``1/lam``;
    ``"half"`` uses ``lam/2`` for comparison with the alternative reading of
    the shrinkage formula.
    """
    st = setting if setting is not None else make_setting(problem, layout, weighted)
    zv = z.values if isinstance(z, Observation) else np.asarray(z, dtype=float)
    rho = mu if rho is None else rho
    inner = dict(inner or {})
    w_s = st.data_weights
    w_d = st.grad_weights2
    if threshold_rule == "inverse":
        thr = 1.0 / lam
    elif threshold_rule == "half":
        thr = lam / 2.0
    else:
        raise ValueError(f"unknown threshold rule {threshold_rule!r}")

    def solve_q(s_target, s_weight, d_target, q_prev):
        sub = SubproblemSpec(st, s_target, s_weight, lam, d_target, np.zeros_like(d_target))
        rep = minimize(q_prev, sub, **inner)
        return rep.q, rep

    q0 = np.zeros(st.n_q) if q0 is None else np.asarray(q0, dtype=float)
    return AdmmProblem(
        F=st.forward,
        Phi=lambda q: st.D @ q,
        H=lambda s: 0.5 * mu * float(w_s @ (s - zv) ** 2),
        G=lambda d: _l1(d, w_d, tv),
        solve_q=solve_q,
        prox_H=quadratic_prox(zv, mu, rho),
        prox_G=lambda v: shrink_vec(v, thr, tv),
        rho=rho,
        lam=lam,
        q0=q0,
        s_weights=w_s,
        d_weights=w_d,
        setting=st,
    )


# ---------------------------------------------------------------------------
# Outer loops


def _call_q(problem, s_target, s_weight, d_target, q_prev):
    out = problem.solve_q(s_target, s_weight, d_target, q_prev)
    if isinstance(out, tuple):
        return out
    return out, None


def _check_finite(k, **arrays):
    for name, a in arrays.items():
        if a is not None and not np.isfinite(a).all():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN arrays
                dump = {n: (None if v is None else (float(np.nanmin(v)), float(np.nanmax(v))))
                        for n, v in arrays.items()}
            raise ReconstructionError(f"non-finite {name} at outer iteration {k}; ranges {dump}")


def _record(diag, problem, k, q, q_prev, s, d, Fq=None):
    Phiq = problem.Phi(q)
    Fq = problem.F(q) if Fq is None else Fq
    diag.k.append(k)
    diag.err.append(relative_change(q, q_prev))
    s_eff = Fq if s is None else s
    diag.J.append(problem.H(s_eff) + problem.G(d))
    diag.Rs_norm.append(np.sqrt(problem.s_norm2(Fq - s_eff)))
    diag.Rd_norm.append(np.sqrt(problem.d_norm2(Phiq - d)))
    return Fq


def _inner_note(diag, rep, k):
    diag.inner.append(rep)
    if rep is not None and getattr(rep, "exit_reason", "tolerance") == "line-search-failure":
        warnings.warn(f"inner solver line search failed at outer iteration {k}; continuing "
                      "with its best iterate", RuntimeWarning)


def _initial(problem, z, n_s, d0=None, b0=None, s0=None, c0=None):
    q = np.array(problem.q0, dtype=float)
    n_d = len(problem.Phi(q))
    d = np.zeros(n_d) if d0 is None else np.array(d0, dtype=float)
    b = np.zeros(n_d) if b0 is None else np.array(b0, dtype=float)
    s = (np.array(z, dtype=float) if z is not None else np.zeros(n_s)) if s0 is None else np.array(s0, dtype=float)
    c = np.zeros(n_s) if c0 is None else np.array(c0, dtype=float)
    return q, d, b, s, c


def _zv(z):
    return z.values if isinstance(z, Observation) else np.asarray(z, dtype=float)


def split_bregman(problem, z, mu: float, lam: Optional[float] = None, tol: float = 1e-6,
                  max_iter: int = 50, keep_history: bool = False, callback=None,
                  d0=None, b0=None, **pde_kwargs):
    """Split Bregman iteration for ``min (mu/2)|F(q) - z|^2 + |grad q|_1``.

    ``problem`` is a :class:`ProblemSpec` (then ``lam`` is required and
    ``pde_kwargs`` go to :func:`pde_problem`) or a ready :class:`AdmmProblem`.
    Each outer step solves the smooth q-subproblem, shrinks
    ``D q + b`` and updates ``b``.  Stops when the relative change
    ``|q^k - q^{k-1}|^2 / |q^k|^2`` drops below ``tol``.

    Returns ``(BregmanState, ConvergenceDiagnostics)``.
    """
    zv = _zv(z)
    if isinstance(problem, ProblemSpec):
        if lam is None:
            raise ValueError("lam is required for a ProblemSpec")
        problem = pde_problem(problem, zv, mu, lam, **pde_kwargs)
    if not mu > 0:
        raise ValueError("mu must be positive")
    q, d, b, _, _ = _initial(problem, None, len(zv), d0, b0)
    diag = ConvergenceDiagnostics()
    state = BregmanState(0, q, d, b)
    if keep_history:
        state.history.append(Iterate(0, q.copy(), d.copy(), b.copy()))
    for k in range(1, max_iter + 1):
        q_new, rep = _call_q(problem, zv, mu, d - b, q)
        _inner_note(diag, rep, k)
        dq = problem.Phi(q_new)
        d = problem.prox_G(dq + b)
        b = b + (dq - d)
        _check_finite(k, q=q_new, d=d, b=b)
        Fq = _record(diag, problem, k, q_new, q, None, d)
        diag.J[-1] = problem.H(Fq) + problem.G(d)
        q = q_new
        state.k, state.q, state.d, state.b = k, q, d, b
        if keep_history:
            state.history.append(Iterate(k, q.copy(), d.copy(), b.copy()))
        if callback is not None:
            callback(state, diag)
        log.info("split Bregman k=%d err=%.3e J=%.6e", k, diag.err[-1], diag.J[-1])
        if diag.err[-1] < tol:
            state.converged = True
            break
    return state, diag


def admm(problem: AdmmProblem, z, mu: float, tol: float = 1e-6, max_iter: int = 50,
         keep_history: bool = False, s0=None, c0=None, d0=None, b0=None, callback=None):
    """ADMM with two split variables and unit-step multiplier updates.

    The s-update uses its closed form.  With ``s0 - (rho/mu) c0 = z`` (the
    default ``s0 = z``, ``c0 = 0``) every iterate satisfies
    ``s - (rho/mu) c = z``.
    """
    zv = _zv(z)
    rho = problem.rho
    s_update = quadratic_prox(zv, mu, rho)
    q, d, b, s, c = _initial(problem, zv, len(zv), d0, b0, s0, c0)
    diag = ConvergenceDiagnostics()
    state = BregmanState(0, q, d, b, s, c)
    if keep_history:
        state.history.append(Iterate(0, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
    for k in range(1, max_iter + 1):
        q_new, rep = _call_q(problem, s - c, rho, d - b, q)
        _inner_note(diag, rep, k)
        Fq = problem.F(q_new)
        s = s_update(Fq + c)
        dq = problem.Phi(q_new)
        d = problem.prox_G(dq + b)
        c = c + (Fq - s)
        b = b + (dq - d)
        _check_finite(k, q=q_new, s=s, d=d, c=c, b=b)
        _record(diag, problem, k, q_new, q, s, d, Fq)
        q = q_new
        state.k, state.q, state.d, state.b, state.s, state.c = k, q, d, b, s, c
        if keep_history:
            state.history.append(Iterate(k, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
        if callback is not None:
            callback(state, diag)
        if diag.err[-1] < tol:
            state.converged = True
            break
    return state, diag


def simplified_admm(problem, z, mu: float, rho: float, lam: Optional[float] = None,
                    tol: float = 1e-6, max_iter: int = 50, keep_history: bool = False,
                    s0=None, c0=None, d0=None, b0=None, callback=None, **pde_kwargs):
    """ADMM with the multiplier ``c`` eliminated through ``s - (rho/mu) c = z``.

    The q-subproblem fits ``(1 - mu/rho) s + (mu/rho) z``; for ``rho == mu``
    this is ``z`` and the scheme coincides with :func:`split_bregman`.
    The reported ``c`` is recovered as ``(mu/rho)(s - z)``.
    """
    zv = _zv(z)
    if isinstance(problem, ProblemSpec):
        if lam is None:
            raise ValueError("lam is required for a ProblemSpec")
        problem = pde_problem(problem, zv, mu, lam, rho=rho, **pde_kwargs)
    q, d, b, s, c = _initial(problem, zv, len(zv), d0, b0, s0, c0)
    if np.max(np.abs(s - (rho / mu) * c - zv), initial=0.0) > 1e-12 * max(1.0, np.abs(zv).max()):
        raise ValueError("initialization must satisfy s0 - (rho/mu) c0 = z")
    a_s, a_z = 1.0 - mu / rho, mu / rho
    w_f, w_s = rho / (mu + rho), mu / (mu + rho)
    diag = ConvergenceDiagnostics()
    state = BregmanState(0, q, d, b, s, c)
    if keep_history:
        state.history.append(Iterate(0, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
    for k in range(1, max_iter + 1):
        target = a_s * s + a_z * zv
        q_new, rep = _call_q(problem, target, rho, d - b, q)
        _inner_note(diag, rep, k)
        Fq = problem.F(q_new)
        s = w_f * Fq + w_s * s
        dq = problem.Phi(q_new)
        d = problem.prox_G(dq + b)
        b = b + (dq - d)
        c = (mu / rho) * (s - zv)
        _check_finite(k, q=q_new, s=s, d=d, b=b)
        _record(diag, problem, k, q_new, q, s, d, Fq)
        q = q_new
        state.k, state.q, state.d, state.b, state.s, state.c = k, q, d, b, s, c
        if keep_history:
            state.history.append(Iterate(k, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
        if callback is not None:
            callback(state, diag)
        if diag.err[-1] < tol:
            state.converged = True
            break
    return state, diag


def general_admm(problem: AdmmProblem, tol: float = 0.0, max_iter: int = 50,
                 multipliers: str = "stepped", keep_history: bool = False,
                 s0=None, c0=None, d0=None, b0=None, callback=None):
    """ADMM on the augmented Lagrangian with nonlinear constraints.

    ``multipliers="stepped"`` uses ``c += rho (F(q) - s)`` and
    ``b += lam (Phi(q) - d)`` (unscaled multipliers); ``"scaled"`` uses unit
    steps with multipliers scaled by ``1/rho`` and ``1/lam``.  The two
    produce identical primal iterates.
    """
    if problem.prox_H is None or problem.prox_G is None:
        raise ValueError("general ADMM needs prox_H and prox_G hooks")
    if multipliers not in ("stepped", "scaled"):
        raise ValueError(f"unknown multiplier convention {multipliers!r}")
    rho, lam = problem.rho, problem.lam
    q = np.array(problem.q0, dtype=float)
    n_s = len(problem.F(q))
    q, d, b, s, c = _initial(problem, None, n_s, d0, b0, s0, c0)
    if s0 is None:
        s = problem.F(q)
    diag = ConvergenceDiagnostics()
    state = BregmanState(0, q, d, b, s, c)
    if keep_history:
        state.history.append(Iterate(0, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
    scaled = multipliers == "scaled"
    for k in range(1, max_iter + 1):
        c_hat = c if scaled else c / rho
        b_hat = b if scaled else b / lam
        try:
            q_new, rep = _call_q(problem, s - c_hat, rho, d - b_hat, q)
            Fq = problem.F(q_new)
            s = problem.prox_H(Fq + c_hat)
            dq = problem.Phi(q_new)
            d = problem.prox_G(dq + b_hat)
        except ReconstructionError as exc:
            raise ReconstructionError(f"subproblem failed at iteration {k}: {exc}") from exc
        diag.inner.append(rep)
        if scaled:
            c = c + (Fq - s)
            b = b + (dq - d)
        else:
            c = c + rho * (Fq - s)
            b = b + lam * (dq - d)
        _check_finite(k, q=q_new, s=s, d=d, c=c, b=b)
        _record(diag, problem, k, q_new, q, s, d, Fq)
        q = q_new
        state.k, state.q, state.d, state.b, state.s, state.c = k, q, d, b, s, c
        if keep_history:
            state.history.append(Iterate(k, q.copy(), d.copy(), b.copy(), s.copy(), c.copy()))
        if callback is not None:
            callback(state, diag)
        if tol > 0 and diag.err[-1] < tol:
            state.converged = True
            break
    return state, diag


# ---------------------------------------------------------------------------
# Lyapunov function


def _unscale(it, rho, lam, scaled):
    if scaled:
        return rho * it.c, lam * it.b
    return it.c, it.b


def lyapunov(history, reference: Optional[Iterate], rho: float, lam: float,
             scaled: bool = False, s_weights=None, d_weights=None) -> np.ndarray:
    """``V^k = rho|s-s*|^2 + lam|d-d*|^2 + |c-c*|^2/rho + |b-b*|^2/lam``.

    Multipliers in ``history`` are unscaled unless ``scaled`` is set.  The
    reference must be a saddle point with multipliers in the unscaled
    convention.
    """
    if reference is None:
        raise UnsupportedDiagnosticError("the Lyapunov function needs a reference optimum")

    def n2(v, w):
        return float(v @ v) if w is None else float(w @ (v * v))

    out = []
    for it in history:
        if it.s is None or it.c is None:
            raise UnsupportedDiagnosticError("history lacks s/c iterates")
        c, b = _unscale(it, rho, lam, scaled)
        out.append(rho * n2(it.s - reference.s, s_weights)
                   + lam * n2(it.d - reference.d, d_weights)
                   + n2(c - reference.c, s_weights) / rho
                   + n2(b - reference.b, d_weights) / lam)
    return np.asarray(out)


def summable_decrease(history, F, Phi, rho: float, lam: float, s_weights=None, d_weights=None) -> np.ndarray:
    """Partial sums of ``rho(|s^{k+1}-s^k|^2 + |R_s^{k+1}|^2) + lam(|d^{k+1}-d^k|^2 + |R_d^{k+1}|^2)``.

    Bounded by ``V^0`` along a convergent run.
    """
    def n2(v, w):
        return float(v @ v) if w is None else float(w @ (v * v))

    terms = []
    for prev, cur in zip(history[:-1], history[1:]):
        rs = F(cur.q) - cur.s
        rd = Phi(cur.q) - cur.d
        terms.append(rho * (n2(cur.s - prev.s, s_weights) + n2(rs, s_weights))
                     + lam * (n2(cur.d - prev.d, d_weights) + n2(rd, d_weights)))
    return np.cumsum(terms)
