"""Independent reference computations used by the tests.

Nothing here imports the package's solvers; each oracle is a direct
evaluation, an exhaustive search, or an analytic formula.
"""

import itertools

import numpy as np
from scipy import integrate

PI = np.pi


# -- 1D K-means --------------------------------------------------------------


def kmeans_dp(values, K):
    """Optimal 1D K-means WCSS by dynamic programming over sorted values."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def cost(i, j):  # cluster x[i:j], i may be an array
        m = j - i
        t = s1[j] - s1[i]
        return s2[j] - s2[i] - t * t / m

    best = np.full((K + 1, n + 1), np.inf)
    best[0, 0] = 0.0
    for k in range(1, K + 1):
        for j in range(k, n + 1):
            i = np.arange(k - 1, j)
            best[k, j] = np.min(best[k - 1, i] + cost(i, j))
    return float(best[K, n])


def kmeans_exhaustive_split(values):
    """Best two-cluster split of sorted values, returning (wcss, means)."""
    x = np.sort(np.asarray(values, dtype=float))
    out = None
    for c in range(1, len(x)):
        a, b = x[:c], x[c:]
        w = float(((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum())
        if out is None or w < out[0]:
            out = (w, (a.mean(), b.mean()))
    return out


# -- clover perimeter --------------------------------------------------------


def clover_r(theta, eps=1e-3):
    s = 0.5 * np.sin(2 * theta) + 0.125 * np.sin(6 * theta)
    return (s ** 4 + eps) ** 0.25


def clover_dr(theta, eps=1e-3):
    s = 0.5 * np.sin(2 * theta) + 0.125 * np.sin(6 * theta)
    ds = np.cos(2 * theta) + 0.75 * np.cos(6 * theta)
    return 0.25 * (s ** 4 + eps) ** (-0.75) * 4 * s ** 3 * ds


def clover_perimeter(eps=1e-3):
    """Arc length of r(theta) over one full turn by adaptive quadrature."""
    f = lambda t: np.sqrt(clover_r(t, eps) ** 2 + clover_dr(t, eps) ** 2)
    # integrate leaf by leaf; the curve has fourfold symmetry
    val, _ = integrate.quad(f, 0.0, PI / 2, limit=400, epsabs=1e-12, epsrel=1e-12)
    return 4.0 * val


# -- manufactured solution ---------------------------------------------------


def mms_u(p):
    x, y = p[:, 0], p[:, 1]
    return np.sin(PI * x) * np.sin(PI * y)


def mms_f(p):
    """-div(exp(x + y) grad u) for u = sin(pi x) sin(pi y)."""
    x, y = p[:, 0], p[:, 1]
    k = np.exp(x + y)
    ux = PI * np.cos(PI * x) * np.sin(PI * y)
    uy = PI * np.sin(PI * x) * np.cos(PI * y)
    return -k * (ux + uy - 2 * PI ** 2 * mms_u(p))


# -- series resistor slab ----------------------------------------------------


def slab_profile(y, k0, k1, u_bottom, u_top, interface=0.5):
    """Exact u(y) for -(k u')' = 0 with k = k0 below the interface, k1 above."""
    flux = (u_top - u_bottom) / (interface / k0 + (1 - interface) / k1)
    return np.where(y < interface, u_bottom + flux * y / k0,
                    u_bottom + flux * interface / k0 + flux * (y - interface) / k1)


# -- tiny linear ADMM instance ----------------------------------------------


def grid_differences_2x2():
    """Forward differences on a 2x2 grid: [x-diffs; y-diffs] with zero rows at the far edge."""
    # cells ordered (0,0), (1,0), (0,1), (1,1)
    Dx = np.array([[-1, 1, 0, 0], [0, 0, 0, 0], [0, 0, -1, 1], [0, 0, 0, 0]], float)
    Dy = np.array([[-1, 0, 1, 0], [0, -1, 0, 1], [0, 0, 0, 0], [0, 0, 0, 0]], float)
    return np.vstack([Dx, Dy])


def linear_instance(seed=3):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(6, 4))
    Phi = grid_differences_2x2()
    # keep the four informative rows so Phi is 4x4
    Phi = Phi[[0, 2, 4, 5]]
    z = rng.normal(size=6)
    return M, Phi, z


def l1_optimum(M, Phi, z, mu):
    """Exact minimizer of (mu/2)|Mq - z|^2 + |Phi q|_1 by sign-pattern enumeration.

    For every assignment of each component of Phi q to {-1, 0, +1} the KKT
    system is linear; the unique consistent pattern gives the optimum and
    its subgradient multiplier.
    """
    m, n = Phi.shape
    H = mu * M.T @ M
    best = None
    for pattern in itertools.product((-1, 0, 1), repeat=m):
        sig = np.array(pattern, dtype=float)
        zero = sig == 0
        nz = ~zero
        Z = Phi[zero]
        nzz = int(zero.sum())
        # [H  Z^T] [q]   [mu M^T z - Phi_nz^T sig_nz]
        # [Z   0 ] [nu] = [0]
        K = np.zeros((n + nzz, n + nzz))
        K[:n, :n] = H
        K[:n, n:] = Z.T
        K[n:, :n] = Z
        rhs = np.concatenate([mu * M.T @ z - Phi[nz].T @ sig[nz], np.zeros(nzz)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if np.linalg.norm(K @ sol - rhs) > 1e-10:
                continue
        q, nu = sol[:n], sol[n:]
        pq = Phi @ q
        if np.any(np.sign(pq[nz]) != sig[nz]) or np.any(np.abs(pq[nz]) < 1e-14):
            continue
        if np.any(np.abs(nu) > 1 + 1e-12):
            continue
        b = sig.copy()
        b[zero] = nu
        J = 0.5 * mu * np.sum((M @ q - z) ** 2) + np.abs(pq).sum()
        if best is None or J < best[0] - 1e-12:
            best = (J, q, b)
    if best is None:
        raise RuntimeError("no consistent sign pattern")
    J, q, b = best
    s = M @ q
    return {"J": J, "q": q, "s": s, "d": Phi @ q, "c": mu * (s - z), "b": b}


def quadratic_constrained_optimum(M, Phi, z, mu, gamma):
    """min (mu/2)|s - z|^2 + (gamma/2)|d|^2  s.t.  s = Mq, d = Phi q, via the KKT system."""
    n = M.shape[1]
    ns, nd = M.shape[0], Phi.shape[0]
    # unknowns: q, s, d, c, b   (Lagrangian H + G + c.(Mq - s) + b.(Phi q - d))
    N = n + ns + nd + ns + nd
    K = np.zeros((N, N))
    r = np.zeros(N)
    iq, is_, id_, ic, ib = 0, n, n + ns, n + ns + nd, n + 2 * ns + nd
    K[iq:iq + n, ic:ic + ns] = M.T
    K[iq:iq + n, ib:ib + nd] = Phi.T
    K[is_:is_ + ns, is_:is_ + ns] = mu * np.eye(ns)
    K[is_:is_ + ns, ic:ic + ns] = -np.eye(ns)
    r[is_:is_ + ns] = mu * z
    K[id_:id_ + nd, id_:id_ + nd] = gamma * np.eye(nd)
    K[id_:id_ + nd, ib:ib + nd] = -np.eye(nd)
    K[ic:ic + ns, iq:iq + n] = M
    K[ic:ic + ns, is_:is_ + ns] = -np.eye(ns)
    K[ib:ib + nd, iq:iq + n] = Phi
    K[ib:ib + nd, id_:id_ + nd] = -np.eye(nd)
    sol = np.linalg.solve(K, r)
    q, s, d = sol[iq:iq + n], sol[is_:is_ + ns], sol[id_:id_ + nd]
    c, b = sol[ic:ic + ns], sol[ib:ib + nd]
    J = 0.5 * mu * np.sum((s - z) ** 2) + 0.5 * gamma * np.sum(d ** 2)
    return {"J": J, "q": q, "s": s, "d": d, "c": c, "b": b}


def five_point_laplacian(nx, ny, hx, hy):
    """Dense negative Laplacian with zero-flux closure, as a reference for D^T D."""
    N = nx * ny
    L = np.zeros((N, N))
    for j in range(ny):
        for i in range(nx):
            k = j * nx + i
            for di, dj, h in ((1, 0, hx), (-1, 0, hx), (0, 1, hy), (0, -1, hy)):
                ii, jj = i + di, j + dj
                if 0 <= ii < nx and 0 <= jj < ny:
                    kk = jj * nx + ii
                    L[k, k] += 1 / h ** 2
                    L[k, kk] -= 1 / h ** 2
    return L
