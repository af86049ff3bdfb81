"""The smooth q-subproblem and its quasi-Newton solver.

For fixed split variables the subproblem is::

    (mu/2) |F(q) - t|_W^2 + (lam/2) |d - D q - b|_W^2

where ``t`` is the data target (the observations for split Bregman, a
blended vector for the ADMM variants), ``D`` is the discrete gradient and
``|.|_W`` are quadrature-weighted norms.  The data-misfit gradient uses one
adjoint solve with the same factorization as the forward solve.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import line_search

from .forward import ProblemSpec, assemble, stiffness_sensitivity
from .mesh import RectGrid, gradient_operator

log = logging.getLogger(__name__)

__all__ = [
    "Setting",
    "make_setting",
    "SubproblemSpec",
    "OptimizerReport",
    "objective",
    "gradient",
    "value_and_gradient",
    "minimize",
    "field_to_vec",
    "vec_to_field",
]


def field_to_vec(v) -> np.ndarray:
    """``(n, 2)`` gradient field -> stacked ``[x; y]`` vector."""
    return np.asarray(v, dtype=float).T.ravel()


def vec_to_field(v) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(2, -1).T


@dataclass(frozen=True, eq=False)
class Setting:
    """Problem plus the discrete operators shared by every subproblem."""

    problem: ProblemSpec
    D: sp.csr_matrix
    grad_weights: np.ndarray
    data_weights: np.ndarray
    layout: str
    weighted: bool

    @property
    def n_q(self) -> int:
        return self.problem.domain.size

    @property
    def n_grad(self) -> int:
        return len(self.grad_weights)

    @property
    def grad_weights2(self) -> np.ndarray:
        return np.concatenate([self.grad_weights, self.grad_weights])

    def forward(self, q) -> np.ndarray:
        system = assemble(q, self.problem)
        u = system.extend(system.solve_free(system.rhs))
        return u[self.problem.discretization.observed]


def make_setting(problem: ProblemSpec, layout: str = "auto", weighted: bool = True) -> Setting:
    """Bundle ``problem`` with its gradient operator and norm weights.

    With ``weighted=False`` all norms are plain Euclidean sums and, on a
    grid, the gradient is the plain neighbour difference (index units), the
    convention of an array-level implementation.  On a uniform grid this
    is the weighted problem with ``mu`` scaled by the cell width.
    """
    D, w = gradient_operator(problem.domain, layout)
    disc = problem.discretization
    wd = disc.obs_weights.copy()
    if not weighted:
        w = np.ones_like(w)
        wd = np.ones_like(wd)
        if isinstance(problem.domain, RectGrid):
            g = problem.domain
            D = (sp.diags(np.repeat([g.hx, g.hy], g.size)) @ D).tocsr()
    name = layout if layout != "auto" else ("cell" if disc.kind == "ccfd" else "node")
    return Setting(problem, D, np.asarray(w, dtype=float), wd, name, weighted)


@dataclass(eq=False)
class SubproblemSpec:
    setting: Setting
    target: np.ndarray
    mu: float
    lam: float
    d: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if not (self.mu >= 0 and self.lam > 0):
            raise ValueError(f"need mu >= 0 and lam > 0, got mu={self.mu}, lam={self.lam}")
        n2 = 2 * self.setting.n_grad
        self.d = np.asarray(self.d, dtype=float).reshape(-1) if np.ndim(self.d) == 1 else field_to_vec(self.d)
        self.b = np.asarray(self.b, dtype=float).reshape(-1) if np.ndim(self.b) == 1 else field_to_vec(self.b)
        if self.d.shape != (n2,) or self.b.shape != (n2,):
            raise ValueError("split variables do not match the gradient layout")
        self.target = np.asarray(self.target, dtype=float)
        if self.target.shape != self.setting.data_weights.shape:
            raise ValueError("data target does not match the observation layout")


def value_and_gradient(q, spec: SubproblemSpec):
    """Objective value and its exact gradient with one shared factorization."""
    st = spec.setting
    prob = st.problem
    disc = prob.discretization
    q = np.asarray(q, dtype=float)

    dq = st.D @ q
    rr = spec.d - dq - spec.b
    w2 = st.grad_weights2
    reg = 0.5 * spec.lam * float(w2 @ rr ** 2)
    g = -spec.lam * (st.D.T @ (w2 * rr))
    if spec.mu == 0:
        return reg, g

    system = assemble(q, prob)
    u_ext = system.extend(system.solve_free(system.rhs))
    r = u_ext[disc.observed] - spec.target
    wr = st.data_weights * r
    misfit = 0.5 * spec.mu * float(wr @ r)

    # adjoint: A^T v = -C^T W r on the free unknowns
    rhs = np.zeros(disc.n_free)
    pos = disc._free_pos[disc.observed]
    ok = pos >= 0
    np.add.at(rhs, pos[ok], -wr[ok])
    v_free = system.factor().solve(rhs, trans="T")
    v_ext = np.zeros(disc.n_ext)
    v_ext[disc.free] = v_free
    g_ls = stiffness_sensitivity(q, prob, u_ext, v_ext)
    return misfit + reg, spec.mu * g_ls + g


def objective(q, spec: SubproblemSpec) -> float:
    return value_and_gradient(q, spec)[0]


def gradient(q, spec: SubproblemSpec) -> np.ndarray:
    return value_and_gradient(q, spec)[1]


@dataclass
class OptimizerReport:
    q: np.ndarray
    fun: float
    grad_norm: float
    nit: int
    nfev: int
    exit_reason: str
    initial_grad_norm: float = np.nan
    fun_history: list = field(default_factory=list)
    line_search_fallbacks: int = 0

    @property
    def success(self) -> bool:
        return self.exit_reason == "tolerance"


class _Cached:
    """Memoize the last (value, gradient) pair; line searches query f and f' separately."""

    def __init__(self, spec):
        self.spec = spec
        self.x = None
        self.nfev = 0

    def __call__(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            self.x = np.array(x, copy=True)
            self.val, self.grad = value_and_gradient(x, self.spec)
            self.nfev += 1
        return self.val, self.grad

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        beta = rho * (y @ q)
        q += (a - beta) * s
    return -q


def minimize(q0, spec: SubproblemSpec, gtol: float = 1e-8, max_iter: int = 200,
             memory: int = 10, c1: float = 1e-4, c2: float = 0.9) -> OptimizerReport:
    """Limited-memory BFGS with a strong-Wolfe line search.

    Stops when ``|g| <= gtol * |g(q0)|`` or after ``max_iter``
    iterations.  A failed line search falls back to backtracking along the
    steepest-descent direction before giving up with
    ``exit_reason="line-search-failure"``.
    """
    fg = _Cached(spec)
    x = np.array(q0, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("initial q is not finite")
    f, g = fg(x)
    g0 = float(np.linalg.norm(g))
    scale = g0 if g0 > 0 else 1.0
    S, Y = [], []
    hist = [f]
    old_old = f + 0.5 * g0
    fallbacks = 0
    reason = "max-iters"
    nit = 0
    while True:
        gn = float(np.linalg.norm(g))
        if gn / scale <= gtol:
            reason = "tolerance"
            break
        if nit >= max_iter:
            break
        p = _two_loop(g, S, Y)
        if not g @ p < 0:
            S.clear(), Y.clear()
            p = -g
        try:
            with warnings.catch_warnings():
                # failures are handled below and counted in the report
                warnings.filterwarnings("ignore", message=".*line search")
                alpha, _, _, f_new, _, _ = line_search(fg.f, fg.g, x, p, g, f, old_old,
                                                       c1=c1, c2=c2, maxiter=20)
        except (ArithmeticError, ValueError):
            # trial step left the region where the forward solve is defined
            alpha = f_new = None
        if alpha is None or f_new is None or not np.isfinite(f_new) or f_new > f:
            # near the rounding floor of f the value tests break down first
            alpha = _approx_wolfe(fg, x, f, g, p, c2)
        if alpha is None:
            fallbacks += 1
            S.clear(), Y.clear()
            p = -g
            alpha = _backtrack(fg, x, f, g, p, c1, gn)
            if alpha is None:
                reason = "line-search-failure"
                break
        x_new = x + alpha * p
        f_new, g_new = fg(x_new)
        s_k, y_k = x_new - x, g_new - g
        if y_k @ s_k > 1e-12 * np.linalg.norm(s_k) * np.linalg.norm(y_k):
            S.append(s_k), Y.append(y_k)
            if len(S) > memory:
                S.pop(0), Y.pop(0)
        old_old, f = f, f_new
        x, g = x_new, g_new
        hist.append(f)
        nit += 1
    return OptimizerReport(x, float(f), float(np.linalg.norm(g)), nit, fg.nfev, reason, g0, hist, fallbacks)


def _approx_wolfe(fg, x, f, g, p, c2, rel: float = 1e-10, max_halvings: int = 10) -> Optional[float]:
    """Step satisfying the approximate Wolfe conditions of Hager and Zhang.

    The sufficient-decrease test is replaced by its derivative form, which
    stays reliable once changes in f fall below rounding error.
    """
    slope = g @ p
    alpha = 1.0
    for _ in range(max_halvings):
        try:
            fa, ga = fg(x + alpha * p)
        except (ArithmeticError, ValueError):
            fa = np.inf
        if np.isfinite(fa):
            da = ga @ p
            if fa <= f + rel * abs(f) and c2 * slope <= da <= -0.8 * slope:
                return alpha
        alpha *= 0.5
    return None


def _backtrack(fg, x, f, g, p, c1, gn, max_halvings: int = 40) -> Optional[float]:
    alpha = 1.0 / max(gn, 1e-300)
    slope = g @ p
    for _ in range(max_halvings):
        try:
            fa = fg.f(x + alpha * p)
        except (ArithmeticError, ValueError):
            fa = np.inf
        if np.isfinite(fa) and fa <= f + c1 * alpha * slope:
            return alpha
        alpha *= 0.5
    return None
