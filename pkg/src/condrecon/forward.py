"""Forward model: assembly and solution of ``-div(exp(q) grad u) = f``.

Both discretizations are written in the same form.  The operator on the
extended state (free unknowns plus Dirichlet values) is a sum of element
contributions::

    Abar(q) = sum_e theta_e(q) * S_e

with a fixed local matrix ``S_e`` and a conductance ``theta_e(q)``.  For
cell-centred finite differences each element is a face (two dofs, harmonic
face conductivity); for linear finite elements each element is a triangle
(three dofs, conductivity ``exp`` of the mean nodal ``q``).  The reduced
matrix ``A(q)`` is the free/free block of ``Abar(q)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidProblemError, NearSingularSystemError
from .mesh import RectGrid, TriMesh, shape_gradients

__all__ = [
    "PointSource",
    "NoiseModel",
    "ProblemSpec",
    "Discretization",
    "StiffnessSystem",
    "Observation",
    "assemble",
    "solve",
    "observe",
    "forward_map",
    "synthesize_data",
    "partial_stiffness",
    "stiffness_sensitivity",
]

Domain = Union[RectGrid, TriMesh]


@dataclass(frozen=True)
class PointSource:
    x: float
    y: float
    strength: float = 1.0


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise with standard deviation ``nsr * RMS(signal)``."""

    nsr: float = 0.01
    seed: int = 0


def _as_callable(value):
    if callable(value):
        return value
    const = float(value)
    return lambda p: np.full(len(p), const)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Boundary value problem on a discrete domain.

    ``dirichlet`` is a predicate on boundary points (cell face centres for a
    grid, boundary nodes for a mesh) selecting the Dirichlet part; ``None``
    makes the whole boundary Dirichlet.  The rest of the boundary carries
    the flux ``g_neumann``.  ``source`` is ``None``, a :class:`PointSource`,
    a callable ``f(points)`` or an array of values at the domain points.
    ``observed`` lists the observed points; ``None`` observes every free
    unknown.
    """

    domain: Domain
    dirichlet: Optional[Callable[[np.ndarray], np.ndarray]] = None
    g_dirichlet: Union[float, Callable] = 0.0
    g_neumann: Union[float, Callable] = 0.0
    source: object = None
    observed: Optional[np.ndarray] = None
    noise: NoiseModel = field(default_factory=NoiseModel)
    allow_pure_neumann: bool = False

    @property
    def discretization(self) -> "Discretization":
        disc = self.__dict__.get("_disc")
        if disc is None:
            disc = Discretization(self)
            object.__setattr__(self, "_disc", disc)
        return disc


class Discretization:
    """Precomputed element structure for a :class:`ProblemSpec`."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        dom = spec.domain
        self.n_q = dom.size
        if isinstance(dom, RectGrid):
            self._init_ccfd(dom)
        elif isinstance(dom, TriMesh):
            self._init_fem(dom)
        else:
            raise InvalidProblemError(f"unsupported domain type {type(dom).__name__}")
        if self.fixed.size == 0 and not spec.allow_pure_neumann:
            raise InvalidProblemError("no Dirichlet boundary: the problem is only defined up to a constant")
        self.n_free = self.free.size
        self._free_pos = np.full(self.n_ext, -1)
        self._free_pos[self.free] = np.arange(self.n_free)
        self.source = self._load_vector(spec.source)
        if spec.observed is None:
            observed = self.free[self.free < self.n_q]
        else:
            observed = np.asarray(spec.observed, dtype=np.int64).ravel()
            if observed.size == 0 or observed.min() < 0 or observed.max() >= self.n_q:
                raise InvalidProblemError("observation indices out of range")
        self.observed = observed
        self.obs_weights = dom.weights[observed]
        self._build_pattern()

    # -- finite differences -------------------------------------------------

    def _init_ccfd(self, g: RectGrid):
        nx, ny, N = g.nx, g.ny, g.size
        I, J = np.meshgrid(np.arange(nx), np.arange(ny))
        I, J = I.ravel(), J.ravel()
        k = g.index(I, J)
        xf = I < nx - 1
        yf = J < ny - 1
        a = np.concatenate([k[xf], k[yf]])
        b = np.concatenate([k[xf] + 1, k[yf] + nx])
        geom = np.concatenate([np.full(xf.sum(), g.hy / g.hx), np.full(yf.sum(), g.hx / g.hy)])

        # boundary faces: (cell, face centre, half-cell conductance)
        xs = g.xmin + (np.arange(nx) + 0.5) * g.hx
        ys = g.ymin + (np.arange(ny) + 0.5) * g.hy
        gx, gy = g.hy / (0.5 * g.hx), g.hx / (0.5 * g.hy)
        faces = [
            (g.index(0, np.arange(ny)), np.column_stack([np.full(ny, g.xmin), ys]), gx, g.hy),
            (g.index(nx - 1, np.arange(ny)), np.column_stack([np.full(ny, g.xmax), ys]), gx, g.hy),
            (g.index(np.arange(nx), 0), np.column_stack([xs, np.full(nx, g.ymin)]), gy, g.hx),
            (g.index(np.arange(nx), ny - 1), np.column_stack([xs, np.full(nx, g.ymax)]), gy, g.hx),
        ]
        faces = [(c, pts, np.full(len(c), gm), np.full(len(c), ln)) for c, pts, gm, ln in faces]
        fcell = np.concatenate([f[0] for f in faces])
        fpts = np.concatenate([f[1] for f in faces])
        fgeom = np.concatenate([f[2] for f in faces])
        flen = np.concatenate([f[3] for f in faces])
        is_d = self._dirichlet_mask(fpts)

        nd = int(is_d.sum())
        self.n_ext = N + nd
        self.free = np.arange(N)
        self.fixed = N + np.arange(nd)
        self.g_fixed = _as_callable(self.spec.g_dirichlet)(fpts[is_d]).astype(float)

        # interior faces then Dirichlet faces; each is a two-dof element
        self.elem_dofs = np.vstack([np.column_stack([a, b]),
                                    np.column_stack([fcell[is_d], self.fixed])])
        local = np.array([[1.0, -1.0], [-1.0, 1.0]])
        self.elem_local = np.concatenate([geom, fgeom[is_d]])[:, None, None] * local
        self._n_interior_faces = len(a)
        self._face_cells = (a, b)
        self._bface_cells = fcell[is_d]
        self.neumann_load = np.zeros(self.n_ext)
        gn = _as_callable(self.spec.g_neumann)(fpts[~is_d]) if (~is_d).any() else np.zeros(0)
        np.add.at(self.neumann_load, fcell[~is_d], gn * flen[~is_d])
        self.kind = "ccfd"

    def _ccfd_theta(self, q):
        kap = np.exp(q)
        a, b = self._face_cells
        ka, kb = kap[a], kap[b]
        hm = 2.0 * ka * kb / (ka + kb)
        kbnd = kap[self._bface_cells]
        theta = np.concatenate([hm, kbnd])
        # d(theta)/dq for the two cells of every face
        da = 2.0 * kb * kb * ka / (ka + kb) ** 2
        db = 2.0 * ka * ka * kb / (ka + kb) ** 2
        m = self._n_interior_faces
        nb = len(kbnd)
        rows = np.concatenate([np.arange(m), np.arange(m), m + np.arange(nb)])
        cols = np.concatenate([a, b, self._bface_cells])
        vals = np.concatenate([da, db, kbnd])
        return theta, (rows, cols, vals)

    # -- finite elements ----------------------------------------------------

    def _init_fem(self, mesh: TriMesh):
        n = mesh.size
        is_d = np.zeros(n, dtype=bool)
        bidx = np.flatnonzero(mesh.boundary)
        is_d[bidx] = self._dirichlet_mask(mesh.nodes[bidx])
        self.n_ext = n
        self.free = np.flatnonzero(~is_d)
        self.fixed = np.flatnonzero(is_d)
        self.g_fixed = _as_callable(self.spec.g_dirichlet)(mesh.nodes[self.fixed]).astype(float)

        G = shape_gradients(mesh)
        self.elem_dofs = mesh.triangles
        self.elem_local = mesh.areas[:, None, None] * np.einsum("eik,ejk->eij", G, G)
        self.shape_grads = G

        self.neumann_load = np.zeros(n)
        be = mesh.boundary_edges
        nb = be[~(is_d[be[:, 0]] & is_d[be[:, 1]])]
        if len(nb):
            mid = mesh.nodes[nb].mean(axis=1)
            L = np.linalg.norm(mesh.nodes[nb[:, 0]] - mesh.nodes[nb[:, 1]], axis=1)
            gn = _as_callable(self.spec.g_neumann)(mid)
            np.add.at(self.neumann_load, nb.ravel(), np.repeat(0.5 * gn * L, 2))
        self.kind = "fem"

    def _fem_theta(self, q):
        t = self.spec.domain.triangles
        theta = np.exp(q[t].mean(axis=1))
        m = len(t)
        rows = np.repeat(np.arange(m), 3)
        cols = t.ravel()
        vals = np.repeat(theta / 3.0, 3)
        return theta, (rows, cols, vals)

    # -- shared -------------------------------------------------------------

    def _dirichlet_mask(self, pts):
        if self.spec.dirichlet is None:
            return np.ones(len(pts), dtype=bool)
        return np.asarray(self.spec.dirichlet(pts), dtype=bool).reshape(len(pts))

    def _build_pattern(self):
        k = self.elem_dofs.shape[1]
        self._rows = np.repeat(self.elem_dofs, k, axis=1).ravel()
        self._cols = np.tile(self.elem_dofs, (1, k)).ravel()

    def theta(self, q):
        """Element conductances and their sparse Jacobian ``(n_elem, n_q)``."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_q,):
            raise ValueError(f"q has shape {q.shape}, expected ({self.n_q},)")
        if not np.isfinite(q).all():
            raise InvalidProblemError("non-finite entries in q")
        theta, (r, c, v) = self._ccfd_theta(q) if self.kind == "ccfd" else self._fem_theta(q)
        jac = sp.csr_matrix((v, (r, c)), shape=(len(theta), self.n_q))
        return theta, jac

    def full_matrix(self, coef) -> sp.csr_matrix:
        vals = (coef[:, None, None] * self.elem_local).ravel()
        return sp.csr_matrix((vals, (self._rows, self._cols)), shape=(self.n_ext, self.n_ext))

    def _load_vector(self, source):
        dom = self.spec.domain
        f = np.zeros(self.n_ext)
        if source is None:
            pass
        elif isinstance(source, PointSource):
            f[:dom.size] += source.strength * self._point_weights(source.x, source.y)
        elif callable(source):
            if self.kind == "ccfd":
                f[:dom.size] += source(dom.points) * dom.cell_area
            else:
                # edge-midpoint rule, exact for quadratics
                t = dom.triangles
                P = dom.nodes[t]
                for (i, j) in ((0, 1), (1, 2), (2, 0)):
                    fm = source(0.5 * (P[:, i] + P[:, j]))
                    np.add.at(f, t[:, i], dom.areas * fm / 6.0)
                    np.add.at(f, t[:, j], dom.areas * fm / 6.0)
        else:
            vals = np.asarray(source, dtype=float)
            if vals.shape != (dom.size,):
                raise InvalidProblemError("sampled source does not match the domain")
            if self.kind == "ccfd":
                f[:dom.size] += vals * dom.cell_area
            else:
                t = dom.triangles
                vt = vals[t]
                for i in range(3):
                    np.add.at(f, t[:, i], dom.areas * (vt.sum(axis=1) + vt[:, i]) / 12.0)
        return f + self.neumann_load

    def _point_weights(self, x, y):
        dom = self.spec.domain
        w = np.zeros(dom.size)
        if self.kind == "ccfd":
            if not dom.contains(x, y):
                raise InvalidProblemError(f"point source ({x}, {y}) outside the domain")
            # a source on a cell edge or corner is shared equally by the touching cells
            def touching(v, lo, h, n):
                s = (v - lo) / h
                k = int(np.floor(s))
                cand = {min(max(k, 0), n - 1)}
                if np.isclose(s, round(s), rtol=0, atol=1e-9) and 0 < round(s) < n:
                    cand = {round(s) - 1, round(s)}
                return sorted(cand)
            ii = touching(x, dom.xmin, dom.hx, dom.nx)
            jj = touching(y, dom.ymin, dom.hy, dom.ny)
            for i in ii:
                for j in jj:
                    w[dom.index(i, j)] += 1.0 / (len(ii) * len(jj))
            return w
        t = dom.triangles
        P = dom.nodes[t]
        v0 = P[:, 1] - P[:, 0]
        v1 = P[:, 2] - P[:, 0]
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        dx, dy = x - P[:, 0, 0], y - P[:, 0, 1]
        l1 = (dx * v1[:, 1] - dy * v1[:, 0]) / det
        l2 = (v0[:, 0] * dy - v0[:, 1] * dx) / det
        lam = np.column_stack([1 - l1 - l2, l1, l2])
        inside = np.flatnonzero((lam >= -1e-12).all(axis=1))
        if inside.size == 0:
            raise InvalidProblemError(f"point source ({x}, {y}) outside the mesh")
        e = inside[0]
        np.add.at(w, t[e], np.clip(lam[e], 0, None) / np.clip(lam[e], 0, None).sum())
        return w


@dataclass(eq=False)
class StiffnessSystem:
    """Reduced system ``A u_free = rhs`` for one ``q``."""

    A: sp.csc_matrix
    rhs: np.ndarray
    full: sp.csr_matrix
    q: np.ndarray
    spec: ProblemSpec
    _lu: object = field(default=None, repr=False)

    @property
    def disc(self) -> Discretization:
        return self.spec.discretization

    def factor(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise NearSingularSystemError(f"factorization failed: {exc}") from exc
        return self._lu

    def solve_free(self, b):
        x = self.factor().solve(np.asarray(b, dtype=float))
        if not np.isfinite(x).all():
            raise NearSingularSystemError("non-finite solution; system is near singular")
        return x

    def extend(self, u_free):
        """Free values plus Dirichlet data as an extended-state vector."""
        ext = np.zeros(self.disc.n_ext)
        ext[self.disc.free] = u_free
        ext[self.disc.fixed] = self.disc.g_fixed
        return ext


def assemble(q, spec: ProblemSpec) -> StiffnessSystem:
    """Assemble ``A(q)`` and the load vector with Dirichlet data eliminated."""
    disc = spec.discretization
    theta, _ = disc.theta(q)
    full = disc.full_matrix(theta)
    free, fixed = disc.free, disc.fixed
    A = full[free][:, free].tocsc()
    rhs = disc.source[free] - full[free][:, fixed] @ disc.g_fixed
    return StiffnessSystem(A, rhs, full, np.array(q, dtype=float), spec)


def _solve_ext(system: StiffnessSystem):
    u = system.solve_free(system.rhs)
    nf = np.linalg.norm(system.rhs)
    res = np.linalg.norm(system.A @ u - system.rhs)
    if res > 1e-10 * max(nf, 1e-300) and res > 1e-14:
        raise NearSingularSystemError(f"relative residual {res / max(nf, 1e-300):.2e} after direct solve")
    return system.extend(u)


def solve(system: StiffnessSystem) -> np.ndarray:
    """Solve and return ``u`` at the domain points (Dirichlet values filled in)."""
    return _solve_ext(system)[:system.disc.n_q]


@dataclass
class Observation:
    values: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)


def observe(u, spec: ProblemSpec) -> Observation:
    disc = spec.discretization
    u = np.asarray(u, dtype=float)
    if u.shape != (disc.n_q,):
        raise ValueError(f"u has shape {u.shape}, expected ({disc.n_q},)")
    return Observation(u[disc.observed].copy(), disc.observed.copy(), disc.obs_weights.copy())


def forward_map(q, spec: ProblemSpec) -> np.ndarray:
    """``F(q) = C A(q)^{-1} f`` as a plain vector."""
    return observe(solve(assemble(q, spec)), spec).values


def synthesize_data(q_true, spec: ProblemSpec) -> Observation:
    """Clean observation plus i.i.d. Gaussian noise with ``sigma = nsr * RMS``."""
    clean = observe(solve(assemble(q_true, spec)), spec)
    nsr, seed = spec.noise.nsr, spec.noise.seed
    rms = float(np.sqrt(np.mean(clean.values ** 2)))
    if nsr < 0:
        raise InvalidProblemError("noise-to-signal ratio must be nonnegative")
    if nsr > 0 and rms == 0:
        raise InvalidProblemError("zero signal: noise level undefined for nonzero NSR")
    sigma = nsr * rms
    eta = np.random.default_rng(seed).standard_normal(len(clean.values)) * sigma
    values = clean.values + eta if nsr > 0 else clean.values.copy()
    clean.provenance.update(seed=int(seed), nsr=float(nsr), sigma=sigma,
                            q_true_sha256=_array_digest(q_true))
    return Observation(values, clean.indices, clean.weights, clean.provenance)


def _array_digest(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()


def partial_stiffness(q, j: int, spec: ProblemSpec, extended: bool = False) -> sp.csr_matrix:
    """Analytic ``dA/dq_j``; the extended-state operator when ``extended``."""
    disc = spec.discretization
    if not 0 <= j < disc.n_q:
        raise IndexError(f"index {j} out of range for {disc.n_q} unknowns")
    _, jac = disc.theta(q)
    dtheta = np.asarray(jac[:, j].todense()).ravel()
    full = disc.full_matrix(dtheta)
    full.eliminate_zeros()
    if extended:
        return full
    return full[disc.free][:, disc.free].tocsr()


def stiffness_sensitivity(q, spec: ProblemSpec, u_ext, v_ext) -> np.ndarray:
    """Vector ``[v^T (dAbar/dq_j) u]_j`` for all ``j`` at once."""
    disc = spec.discretization
    _, jac = disc.theta(q)
    dofs = disc.elem_dofs
    beta = np.einsum("ei,eij,ej->e", v_ext[dofs], disc.elem_local, u_ext[dofs])
    return jac.T @ beta


def problem_digest(spec_description: dict) -> str:
    """Stable hash of a JSON-serializable problem description."""
    blob = json.dumps(spec_description, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()
