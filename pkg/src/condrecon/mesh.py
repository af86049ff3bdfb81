"""Discrete domains, signed distance geometry and discrete gradient operators.

Two domain types are supported: :class:`RectGrid` for cell-centred finite
differences and :class:`TriMesh` for linear finite elements.  Scalar fields
are plain 1-D arrays indexed by cell (grid) or node (mesh); gradient fields
are ``(n, 2)`` arrays.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .errors import InvalidGeometryError, MeshFormatError, MeshingError

log = logging.getLogger(__name__)

__all__ = [
    "RectGrid",
    "TriMesh",
    "SignedDistance",
    "build_rect_grid",
    "structured_trimesh",
    "make_trimesh",
    "load_trimesh",
    "dump_trimesh",
    "sdf_disc",
    "sdf_rectangle",
    "sdf_halfplane",
    "approximate_signed_distance",
    "combine_sdf",
    "triangulate",
    "triangle_quality",
    "grad_fd",
    "div_fd",
    "fd_gradient_matrix",
    "pce_matrix",
    "shape_gradients",
    "ags_matrix",
    "grad_pce",
    "grad_ags",
    "gradient_operator",
    "total_variation",
]


# ---------------------------------------------------------------------------
# Rectangular grids


@dataclass(frozen=True)
class RectGrid:
    """Uniform cell-centred grid on ``[xmin, xmax] x [ymin, ymax]``.

    Cell ``(i, j)`` (``i`` along x) has flat index ``j * nx + i``, so a field
    reshaped to ``(ny, nx)`` is laid out like an image with y along rows.
    """

    nx: int
    ny: int
    xmin: float = 0.0
    xmax: float = 1.0
    ymin: float = 0.0
    ymax: float = 1.0

    @property
    def hx(self) -> float:
        return (self.xmax - self.xmin) / self.nx

    @property
    def hy(self) -> float:
        return (self.ymax - self.ymin) / self.ny

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def extents(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)

    def index(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def unravel(self, k):
        k = np.asarray(k)
        return k % self.nx, k // self.nx

    @property
    def points(self) -> np.ndarray:
        """Cell centres, shape ``(N, 2)``."""
        xc = self.xmin + (np.arange(self.nx) + 0.5) * self.hx
        yc = self.ymin + (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xc, yc)
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, self.cell_area)

    def contains(self, x, y) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


def build_rect_grid(nx: int, ny: int, extents=(0.0, 1.0, 0.0, 1.0)) -> RectGrid:
    """Build a :class:`RectGrid` with ``nx * ny`` cells over ``extents``.

    ``extents`` is ``(xmin, xmax, ymin, ymax)``.
    """
    xmin, xmax, ymin, ymax = (float(v) for v in extents)
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise InvalidGeometryError(f"need integer nx, ny >= 2, got {nx}, {ny}")
    if not (np.isfinite([xmin, xmax, ymin, ymax]).all() and xmax > xmin and ymax > ymin):
        raise InvalidGeometryError(f"degenerate extents {extents!r}")
    return RectGrid(int(nx), int(ny), xmin, xmax, ymin, ymax)


# ---------------------------------------------------------------------------
# Triangle meshes


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Linear triangle mesh.

    Use :func:`make_trimesh` to build one; it orients triangles
    counter-clockwise, derives boundary flags and stars, and validates.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    areas: np.ndarray
    star_ptr: np.ndarray
    star_idx: np.ndarray
    edges: np.ndarray = field(repr=False)
    boundary_edges: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def points(self) -> np.ndarray:
        return self.nodes

    def star(self, p: int) -> np.ndarray:
        """Indices of the triangles incident at node ``p``."""
        return self.star_idx[self.star_ptr[p]:self.star_ptr[p + 1]]

    @property
    def weights(self) -> np.ndarray:
        """Lumped node masses (one third of the star area)."""
        w = np.zeros(self.size)
        np.add.at(w, self.triangles.ravel(), np.repeat(self.areas / 3.0, 3))
        return w

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)


def _signed_areas(nodes, tris):
    p = nodes[tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _edge_counts(tris):
    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def make_trimesh(nodes, triangles, boundary=None, area_tol: float = 0.0) -> TriMesh:
    """Validate and assemble a :class:`TriMesh`.

    ``boundary`` may be given as a list of node indices; it must then agree
    with the boundary derived from edge adjacency.
    """
    nodes = np.ascontiguousarray(nodes, dtype=float)
    tris = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshFormatError("nodes must have shape (n, 2)")
    n = len(nodes)
    if len(tris) == 0:
        raise MeshFormatError("mesh has no triangles")
    bad = np.flatnonzero(((tris < 0) | (tris >= n)).any(axis=1))
    if bad.size:
        raise MeshFormatError("node index out of range", element=int(bad[0]))
    dup = np.flatnonzero((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2]))
    if dup.size:
        raise MeshFormatError("triangle repeats a node", element=int(dup[0]))

    sa = _signed_areas(nodes, tris)
    flip = sa < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    areas = np.abs(sa)
    scale = max(np.ptp(nodes[:, 0]), np.ptp(nodes[:, 1]), 1e-300) ** 2
    degenerate = np.flatnonzero(areas <= max(area_tol, 1e-14 * scale))
    if degenerate.size:
        raise MeshFormatError("zero-area triangle", element=int(degenerate[0]))

    used = np.zeros(n, dtype=bool)
    used[tris.ravel()] = True
    if not used.all():
        raise MeshFormatError("node belongs to no triangle", element=int(np.flatnonzero(~used)[0]))

    edges, counts = _edge_counts(tris)
    if (counts > 2).any():
        raise MeshFormatError("edge shared by more than two triangles",
                              element=int(np.flatnonzero(counts > 2)[0]))
    bedges = edges[counts == 1]
    bflags = np.zeros(n, dtype=bool)
    bflags[bedges.ravel()] = True
    if boundary is not None:
        given = np.zeros(n, dtype=bool)
        given[np.asarray(boundary, dtype=np.int64)] = True
        mismatch = np.flatnonzero(given != bflags)
        if mismatch.size:
            raise MeshFormatError("boundary flags inconsistent with edge adjacency",
                                  element=int(mismatch[0]))

    order = np.argsort(tris.ravel(), kind="stable")
    star_idx = order // 3
    star_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(tris.ravel(), minlength=n), out=star_ptr[1:])
    return TriMesh(nodes, tris, bflags, areas, star_ptr, star_idx, edges, bedges)


def structured_trimesh(nx: int, ny: int, extents=(0.0, 1.0, 0.0, 1.0)) -> TriMesh:
    """Right-triangle mesh of a rectangle with ``nx * ny`` squares split along one diagonal."""
    xmin, xmax, ymin, ymax = extents
    if nx < 1 or ny < 1 or xmax <= xmin or ymax <= ymin:
        raise InvalidGeometryError("degenerate structured mesh request")
    x = np.linspace(xmin, xmax, nx + 1)
    y = np.linspace(ymin, ymax, ny + 1)
    X, Y = np.meshgrid(x, y)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    a = (j * (nx + 1) + i).ravel()
    b, c, d = a + 1, a + nx + 2, a + nx + 1
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return make_trimesh(nodes, tris)


def load_trimesh(source: str) -> TriMesh:
    """Parse the text mesh format.

    Layout::

        trimesh <n_nodes> <n_triangles>
        x y            (n_nodes lines)
        i j k          (n_triangles lines, 0-based)
        boundary i0 i1 ...   (optional)

    ``source`` is the file content, not a path.
    """
    lines = [(k + 1, ln.split()) for k, ln in enumerate(source.splitlines())]
    lines = [(k, tok) for k, tok in lines if tok and not tok[0].startswith("#")]
    if not lines:
        raise MeshFormatError("empty mesh file", line=1)
    lineno, head = lines[0]
    if len(head) != 3 or head[0] != "trimesh":
        raise MeshFormatError("expected header 'trimesh <n_nodes> <n_triangles>'", line=lineno)
    try:
        n_nodes, n_tris = int(head[1]), int(head[2])
    except ValueError:
        raise MeshFormatError("non-integer counts in header", line=lineno) from None
    if n_nodes < 3 or n_tris < 1:
        raise MeshFormatError("header counts too small", line=lineno)
    body = lines[1:]
    if len(body) < n_nodes + n_tris:
        raise MeshFormatError("file truncated", line=body[-1][0] if body else lineno)

    nodes = np.empty((n_nodes, 2))
    for r in range(n_nodes):
        k, tok = body[r]
        try:
            if len(tok) != 2:
                raise ValueError
            nodes[r] = [float(tok[0]), float(tok[1])]
        except ValueError:
            raise MeshFormatError("expected 'x y'", line=k) from None
        if not np.isfinite(nodes[r]).all():
            raise MeshFormatError("non-finite coordinate", line=k)
    tris = np.empty((n_tris, 3), dtype=np.int64)
    for r in range(n_tris):
        k, tok = body[n_nodes + r]
        try:
            if len(tok) != 3:
                raise ValueError
            tris[r] = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError("expected 'i j k'", line=k) from None
        if ((tris[r] < 0) | (tris[r] >= n_nodes)).any():
            raise MeshFormatError("node index out of range", line=k, element=r)

    boundary = None
    rest = body[n_nodes + n_tris:]
    if rest:
        k, tok = rest[0]
        if tok[0] != "boundary" or len(rest) > 1:
            raise MeshFormatError("unexpected trailing content", line=k)
        try:
            boundary = [int(t) for t in tok[1:]]
        except ValueError:
            raise MeshFormatError("non-integer boundary index", line=k) from None
        if any(b < 0 or b >= n_nodes for b in boundary):
            raise MeshFormatError("boundary index out of range", line=k)
    return make_trimesh(nodes, tris, boundary)


def dump_trimesh(mesh: TriMesh) -> str:
    out = [f"trimesh {mesh.size} {mesh.n_triangles}"]
    out += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    out += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    out.append("boundary " + " ".join(str(i) for i in np.flatnonzero(mesh.boundary)))
    return "\n".join(out) + "\n"


def triangle_quality(mesh_or_nodes, triangles=None) -> np.ndarray:
    """Radius ratio ``2 r / R`` per triangle (1 for equilateral)."""
    if triangles is None:
        nodes, triangles = mesh_or_nodes.nodes, mesh_or_nodes.triangles
    else:
        nodes = mesh_or_nodes
    p = nodes[triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    return (b + c - a) * (c + a - b) * (a + b - c) / (a * b * c)


# ---------------------------------------------------------------------------
# Signed distance functions (negative inside)


class SignedDistance:
    """Callable ``dist(p)`` for points ``p`` of shape ``(n, 2)``.

    ``kind`` and ``children`` record how the function was built.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], kind: str = "custom",
                 children: Sequence["SignedDistance"] = (), **meta):
        self._fn = fn
        self.kind = kind
        self.children = tuple(children)
        self.meta = meta

    def __call__(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.asarray(self._fn(p), dtype=float).reshape(len(p))

    def at(self, x, y):
        return self(np.column_stack([np.ravel(x), np.ravel(y)]))

    def inside(self, p) -> np.ndarray:
        return self(p) < 0

    def __repr__(self):
        if self.children:
            return f"SignedDistance({self.kind}, {list(self.children)})"
        return f"SignedDistance({self.kind}, {self.meta})"


def sdf_disc(center=(0.0, 0.0), radius: float = 1.0) -> SignedDistance:
    c = np.asarray(center, dtype=float)
    if radius <= 0:
        raise InvalidGeometryError("disc radius must be positive")
    return SignedDistance(lambda p: np.hypot(p[:, 0] - c[0], p[:, 1] - c[1]) - radius,
                          "disc", center=tuple(c), radius=radius)


def sdf_rectangle(extents) -> SignedDistance:
    """Exact signed distance of an axis-aligned rectangle ``(xmin, xmax, ymin, ymax)``."""
    x0, x1, y0, y1 = extents
    if x1 <= x0 or y1 <= y0:
        raise InvalidGeometryError(f"degenerate rectangle {extents!r}")
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hx, hy = 0.5 * (x1 - x0), 0.5 * (y1 - y0)

    def fn(p):
        qx = np.abs(p[:, 0] - cx) - hx
        qy = np.abs(p[:, 1] - cy) - hy
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0)

    return SignedDistance(fn, "rectangle", extents=tuple(extents))


def sdf_halfplane(normal, offset: float) -> SignedDistance:
    """Half-plane ``{p : n.p <= offset}`` with outward normal ``n``."""
    n = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise InvalidGeometryError("half-plane normal must be nonzero")
    n, c = n / norm, offset / norm
    return SignedDistance(lambda p: p @ n - c, "halfplane", normal=tuple(n), offset=c)


def approximate_signed_distance(curve, inside: Callable[[np.ndarray], np.ndarray],
                                n_samples: int = 10000, interval=None,
                                parametric: bool = False) -> SignedDistance:
    """Discretize-and-search signed distance to a boundary piece.

    ``curve`` is one of

    * a function ``h`` with ``interval=(X1, X2)``: the graph ``y = h(x)`` is
      sampled at ``n_samples`` uniform abscissae;
    * a function ``t -> (x, y)`` with ``parametric=True`` and ``interval``;
    * an ``(m, 2)`` array of boundary points (``n_samples`` ignored).

    The magnitude is the distance to the nearest sample; the sign is negative
    where ``inside(p)`` is true.
    """
    if callable(curve):
        if interval is None:
            raise InvalidGeometryError("a callable boundary needs an interval")
        if n_samples < 2:
            raise InvalidGeometryError("need at least 2 boundary samples")
        t = np.linspace(interval[0], interval[1], int(n_samples))
        if parametric:
            xs, ys = curve(t)
            samples = np.column_stack([np.broadcast_to(xs, t.shape), np.broadcast_to(ys, t.shape)])
        else:
            samples = np.column_stack([t, np.broadcast_to(curve(t), t.shape)])
    else:
        samples = np.asarray(curve, dtype=float).reshape(-1, 2)
    if len(samples) == 0:
        raise InvalidGeometryError("empty boundary sample set")
    if not np.isfinite(samples).all():
        raise InvalidGeometryError("non-finite boundary samples")
    # Samples lie on a curve; uncompacted midpoint splits prune far queries
    # much better than the default tight boxes.
    tree = cKDTree(samples, compact_nodes=False, balanced_tree=False)

    def fn(p):
        dist, _ = tree.query(p)
        inn = np.asarray(inside(p), dtype=bool).reshape(len(p))
        return np.where(inn, -dist, dist)

    return SignedDistance(fn, "sampled", n_samples=len(samples))


def combine_sdf(op: str, a: SignedDistance, b: SignedDistance) -> SignedDistance:
    """Union (min), intersection (max) or difference ``max(a, -b)``."""
    if op == "union":
        fn = lambda p: np.minimum(a(p), b(p))  # noqa: E731
    elif op == "intersection":
        fn = lambda p: np.maximum(a(p), b(p))  # noqa: E731
    elif op == "difference":
        fn = lambda p: np.maximum(a(p), -b(p))  # noqa: E731
    else:
        raise ValueError(f"unknown sdf combinator {op!r}")
    return SignedDistance(fn, op, (a, b))


# ---------------------------------------------------------------------------
# Force-equilibrium triangulator (uniform edge length)


def _sdf_gradient(sdf, p, eps):
    d = sdf(p)
    gx = (sdf(p + [eps, 0.0]) - d) / eps
    gy = (sdf(p + [0.0, eps]) - d) / eps
    return d, gx, gy


def _project(sdf, p, eps, mask=None):
    idx = np.arange(len(p)) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        return p
    d, gx, gy = _sdf_gradient(sdf, p[idx], eps)
    g2 = gx ** 2 + gy ** 2
    g2[g2 == 0] = 1.0
    p = p.copy()
    p[idx, 0] -= d * gx / g2
    p[idx, 1] -= d * gy / g2
    return p


def _interior_triangles(sdf, p, tri, geps, max_edge):
    """Keep Delaunay triangles with an interior centroid and no overlong edge.

    The edge test removes hull slivers between far-apart boundary points
    (for example the two tips of a lens) whose centroid happens to fall
    inside a nonconvex region.
    """
    tri = tri[sdf(p[tri].mean(axis=1)) < -geps]
    e = p[tri] - p[np.roll(tri, 1, axis=1)]
    return tri[np.hypot(e[..., 0], e[..., 1]).max(axis=1) <= max_edge]


def triangulate(sdf: SignedDistance, target_edge_length: float, bounding_box,
                fixed_points=None, max_iter: int = 500, quality_floor: float = 0.3) -> TriMesh:
    """Mesh the region ``sdf < 0`` with roughly equilateral triangles.

    A simplified distmesh: hexagonal seeding, Delaunay retriangulation,
    linear edge springs, and projection of escaped nodes back onto the
    zero level set.  Raises :class:`MeshingError` if the node motion does
    not settle below ``1e-3 * h`` within ``max_iter`` iterations.
    """
    h = float(target_edge_length)
    x0, x1, y0, y1 = bounding_box
    if h <= 0 or x1 <= x0 or y1 <= y0:
        raise InvalidGeometryError("need positive edge length and nondegenerate bounding box")
    if min(x1 - x0, y1 - y0) < 2 * h:
        raise InvalidGeometryError("edge length too large for the bounding box")
    dptol, ttol, fscale, deltat = 1e-3, 0.1, 1.2, 0.2
    geps = 1e-3 * h
    deps = np.sqrt(np.finfo(float).eps) * h

    ys = np.arange(y0, y1 + 1e-12 * h, h * np.sqrt(3) / 2)
    xs = np.arange(x0, x1 + 1e-12 * h, h)
    X, Y = np.meshgrid(xs, ys)
    X[1::2] += h / 2
    p = np.column_stack([X.ravel(), Y.ravel()])
    p = p[sdf(p) < geps]
    pfix = np.empty((0, 2)) if fixed_points is None else np.asarray(fixed_points, float).reshape(-1, 2)
    if len(pfix):
        keep = np.ones(len(p), dtype=bool)
        for q in pfix:
            keep &= np.hypot(*(p - q).T) > 0.5 * h
        p = np.vstack([pfix, p[keep]])
    nfix = len(pfix)
    if len(p) - nfix < 3:
        raise MeshingError("signed distance has no interior in the bounding box", (p, None))

    pold = np.full_like(p, np.inf)
    tri = bars = None
    for it in range(max_iter):
        if np.max(np.hypot(*(p - pold).T)) > ttol * h:
            pold = p.copy()
            tri = _interior_triangles(sdf, p, Delaunay(p).simplices, geps, 3.0 * h)
            if len(tri) == 0:
                raise MeshingError("triangulation lost every triangle", (p, tri))
            bars = np.unique(np.sort(np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]]), axis=1), axis=0)
        barvec = p[bars[:, 0]] - p[bars[:, 1]]
        L = np.hypot(barvec[:, 0], barvec[:, 1])
        L0 = fscale * np.sqrt(np.sum(L ** 2) / len(L))
        F = np.maximum(L0 - L, 0.0)
        Fvec = (F / L)[:, None] * barvec
        Ftot = np.zeros_like(p)
        np.add.at(Ftot, bars[:, 0], Fvec)
        np.add.at(Ftot, bars[:, 1], -Fvec)
        Ftot[:nfix] = 0.0
        p = p + deltat * Ftot
        d = sdf(p)
        p = _project(sdf, p, deps, d > 0)
        d = sdf(p)
        moving = d < -geps
        step = np.hypot(*(deltat * Ftot[moving]).T)
        if step.size == 0 or step.max() < dptol * h:
            log.debug("triangulate converged after %d iterations", it + 1)
            break
    else:
        raise MeshingError(f"triangulator did not converge in {max_iter} iterations", (p, tri))

    tri = _interior_triangles(sdf, p, Delaunay(p).simplices, geps, 3.0 * h)
    used = np.unique(tri)
    remap = np.full(len(p), -1)
    remap[used] = np.arange(len(used))
    p, tri = p[used], remap[tri]
    # Slivers along the boundary survive Delaunay; drop near-flat ones.
    q = triangle_quality(p, tri)
    tri = tri[q > 1e-3]
    used = np.unique(tri)
    remap = np.full(len(p), -1)
    remap[used] = np.arange(len(used))
    p, tri = p[used], remap[tri]

    edges, counts = _edge_counts(tri)
    bnodes = np.zeros(len(p), dtype=bool)
    bnodes[edges[counts == 1].ravel()] = True
    movable = bnodes.copy()
    movable[:nfix] = False
    for _ in range(5):
        p = _project(sdf, p, deps, movable)
    mesh = make_trimesh(p, tri)
    dist = sdf(mesh.nodes)
    tol = max(10 * geps, 1e-3)
    if dist.max() > tol or np.abs(dist[mesh.boundary]).max() > tol:
        raise MeshingError("mesh boundary does not follow the zero level set", (p, tri))
    qmin = triangle_quality(mesh).min()
    if qmin < quality_floor:
        warnings.warn(f"minimum triangle quality {qmin:.3f} below {quality_floor}", RuntimeWarning)
    return mesh


# ---------------------------------------------------------------------------
# Discrete gradients


def _check_field(domain, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (domain.size,):
        raise ValueError(f"field has shape {q.shape}, domain expects ({domain.size},)")
    return q


def fd_gradient_matrix(grid: RectGrid) -> sp.csr_matrix:
    """Forward differences with zero flux across the outer boundary.

    Returns the ``(2N, N)`` matrix mapping ``q`` to ``[dq/dx; dq/dy]``.
    """
    def d1(n, h):
        m = sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n), format="lil")
        m[n - 1, n - 1] = 0.0
        return m.tocsr() / h

    Dx = sp.kron(sp.identity(grid.ny), d1(grid.nx, grid.hx))
    Dy = sp.kron(d1(grid.ny, grid.hy), sp.identity(grid.nx))
    return sp.vstack([Dx, Dy]).tocsr()


def grad_fd(grid: RectGrid, q) -> np.ndarray:
    q = _check_field(grid, q)
    Q = q.reshape(grid.ny, grid.nx)
    gx = np.zeros_like(Q)
    gy = np.zeros_like(Q)
    gx[:, :-1] = (Q[:, 1:] - Q[:, :-1]) / grid.hx
    gy[:-1, :] = (Q[1:, :] - Q[:-1, :]) / grid.hy
    return np.column_stack([gx.ravel(), gy.ravel()])


def div_fd(grid: RectGrid, v) -> np.ndarray:
    """Negative adjoint of :func:`grad_fd` in the plain Euclidean inner product."""
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.size, 2):
        raise ValueError(f"gradient field has shape {v.shape}, expected ({grid.size}, 2)")
    vx = v[:, 0].reshape(grid.ny, grid.nx) / grid.hx
    vy = v[:, 1].reshape(grid.ny, grid.nx) / grid.hy
    out = np.zeros((grid.ny, grid.nx))
    out[:, :-1] += vx[:, :-1]
    out[:, 1:] -= vx[:, :-1]
    out[:-1, :] += vy[:-1, :]
    out[1:, :] -= vy[:-1, :]
    return out.ravel()


def shape_gradients(mesh: TriMesh) -> np.ndarray:
    """Gradients of the three barycentric basis functions, shape ``(M, 3, 2)``."""
    t = mesh.triangles
    x1, x2, x3 = (mesh.nodes[t[:, k]] for k in range(3))
    two_a = 2.0 * mesh.areas[:, None]

    def perp(v):
        return np.column_stack([-v[:, 1], v[:, 0]])

    g2 = perp(x1 - x3) / two_a  # coefficient of (q2 - q1)
    g3 = perp(x2 - x1) / two_a  # coefficient of (q3 - q1)
    return np.stack([-(g2 + g3), g2, g3], axis=1)


def pce_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """``(2M, N)`` matrix of per-triangle gradients of the linear interpolant."""
    G = shape_gradients(mesh)
    m = mesh.n_triangles
    rows = np.concatenate([np.tile(np.arange(m), 3), m + np.tile(np.arange(m), 3)])
    cols = np.tile(mesh.triangles.T.ravel(), 2)
    vals = np.concatenate([G[:, :, 0].T.ravel(), G[:, :, 1].T.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * m, mesh.size))


def ags_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """``(2N, N)`` matrix of star-averaged gradients at nodes."""
    m, n = mesh.n_triangles, mesh.size
    W = sp.csr_matrix((np.repeat(mesh.areas, 3), (mesh.triangles.ravel(), np.repeat(np.arange(m), 3))),
                      shape=(n, m))
    star_area = np.asarray(W.sum(axis=1)).ravel()
    if (star_area == 0).any():
        raise InvalidGeometryError("isolated node with an empty star")
    W = sp.diags(1.0 / star_area) @ W
    return (sp.block_diag([W, W]) @ pce_matrix(mesh)).tocsr()


def grad_pce(mesh: TriMesh, q) -> np.ndarray:
    """Per-triangle gradient of the piecewise linear interpolant of nodal ``q``."""
    q = _check_field(mesh, q)
    t = mesh.triangles
    x1, x2, x3 = (mesh.nodes[t[:, k]] for k in range(3))
    q1, q2, q3 = (q[t[:, k]] for k in range(3))
    two_a = (2.0 * mesh.areas)[:, None]
    a = x1 - x3
    b = x2 - x1
    return ((q2 - q1)[:, None] * np.column_stack([-a[:, 1], a[:, 0]])
            + (q3 - q1)[:, None] * np.column_stack([-b[:, 1], b[:, 0]])) / two_a


def grad_ags(mesh: TriMesh, q) -> np.ndarray:
    """Area-weighted mean of :func:`grad_pce` over each node's star."""
    g = grad_pce(mesh, q)
    num = np.zeros((mesh.size, 2))
    den = np.zeros(mesh.size)
    w = np.repeat(mesh.areas, 3)
    idx = mesh.triangles.ravel()
    np.add.at(num, idx, w[:, None] * np.repeat(g, 3, axis=0))
    np.add.at(den, idx, w)
    if (den == 0).any():
        raise InvalidGeometryError("isolated node with an empty star")
    return num / den[:, None]


def gradient_operator(domain, layout: str = "auto"):
    """Return ``(D, weights)``: the sparse gradient matrix and quadrature weights.

    ``D`` maps a scalar field to the stacked components ``[g_x; g_y]`` of a
    gradient field with ``len(weights)`` points.  For a grid the layout is
    always ``"cell"``; a mesh supports ``"node"`` (star averaged, the
    default) and ``"triangle"`` (per-cell linear).
    """
    if isinstance(domain, RectGrid):
        if layout not in ("auto", "cell"):
            raise ValueError(f"layout {layout!r} not available on a grid")
        return fd_gradient_matrix(domain), domain.weights
    if layout in ("auto", "node"):
        return ags_matrix(domain), domain.weights
    if layout == "triangle":
        return pce_matrix(domain), domain.areas.copy()
    raise ValueError(f"unknown gradient layout {layout!r}")


def total_variation(grad: np.ndarray, weights=None, mode: str = "isotropic") -> float:
    """Quadrature of ``|grad q|`` (isotropic) or ``|q_x| + |q_y|`` (anisotropic)."""
    grad = np.asarray(grad, dtype=float).reshape(-1, 2)
    w = np.ones(len(grad)) if weights is None else np.asarray(weights, dtype=float)
    if mode == "isotropic":
        return float(w @ np.hypot(grad[:, 0], grad[:, 1]))
    if mode == "anisotropic":
        return float(w @ np.abs(grad).sum(axis=1))
    raise ValueError(f"unknown TV mode {mode!r}")
