"""Independent reference solvers used to validate the production solvers.

Each oracle takes a different route from the code it checks:

* the MVEE dual is solved by spectral projected gradient on the simplex
  instead of Frank-Wolfe coordinate steps;
* the ellipsoid projection is found by a dense search over the boundary
  instead of the secular equation;
* the linear center update comes from the full KKT linear system instead of
  the cached nullspace projector;
* the torus projection runs plain projected gradient instead of Newton on the
  Lagrangian system.

They are slow and meant for tests and the ``validate`` command only.
"""

from __future__ import annotations

import numpy as np


def simplex_projection(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{mu >= 0, sum mu = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    cond = u - css / k > 0
    r = k[cond][-1]
    theta = css[r - 1] / r
    return np.maximum(v - theta, 0.0)


def _dual_value_grad(A, mu):
    M = A.T @ (A * mu[:, None])
    sign, ld = np.linalg.slogdet(M)
    if sign <= 0:
        return -np.inf, None, None
    X = np.linalg.solve(M, A.T)
    g = np.einsum("ij,ji->i", A, X)
    return ld, g, M


def mvee_dual_spg(alphas, tol: float = 1e-10, max_iter: int = 200000, memory: int = 10):
    """Origin-centered MVEE by spectral projected gradient on the dual.

    Maximizes ``log det sum_i mu_i alpha_i alpha_i^T`` over the simplex with
    Barzilai-Borwein steps and a nonmonotone Armijo search (GLL rule).

    Returns:
        ``(weights, shape, gap)`` with ``shape = n * M(mu)`` and
        ``gap = max_i alpha_i^T M^{-1} alpha_i - n``.
    """
    A = np.asarray(alphas, dtype=float)
    s, n = A.shape
    mu = np.full(s, 1.0 / s)
    f, g, M = _dual_value_grad(A, mu)
    if g is None:
        raise ValueError("alphas do not span the space")
    hist = [f]
    step = 1.0 / max(np.max(g), 1.0)
    gap = float(g.max() - n)
    for _ in range(max_iter):
        gap = float(g.max() - n)
        if gap <= tol:
            break
        d = simplex_projection(mu + step * g) - mu
        slope = float(g @ d)
        if slope <= 1e-18:
            break
        fref = max(hist[-memory:])
        t = 1.0
        while True:
            mu_new = mu + t * d
            f_new, g_new, M_new = _dual_value_grad(A, mu_new)
            if f_new >= fref + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                break
        sk = mu_new - mu
        yk = g_new - g if g_new is not None else None
        mu, f, g, M = mu_new, f_new, g_new, M_new
        hist.append(f)
        if yk is None:
            break
        sy = float(sk @ yk)
        # ascent: curvature of the concave objective is -sy
        step = float(sk @ sk) / -sy if sy < 0 else 1e6
        step = min(max(step, 1e-12), 1e12)
    return mu, n * M, gap


def mvee_logdet_oracle(alphas, tol: float = 1e-10) -> float:
    """``log det`` of the origin-centered MVEE shape from the SPG dual solve."""
    _, P, _ = mvee_dual_spg(alphas, tol=tol)
    return float(np.linalg.slogdet(P)[1])


def qcqp_grid_oracle(P, r, target, points: int = 10**6):
    """Closest point of the 2-d ellipsoid ``E(r, P)`` to ``target`` by boundary search.

    Interior targets are returned unchanged. Otherwise ``points`` boundary
    points ``r + L (cos t, sin t)`` are scanned and the best one is returned.

    Returns:
        ``(z, objective)`` with ``objective = ||z - target||^2``.
    """
    P = np.asarray(P, dtype=float)
    r = np.asarray(r, dtype=float)
    target = np.asarray(target, dtype=float)
    if P.shape != (2, 2):
        raise ValueError("the grid oracle is two-dimensional")
    diff = target - r
    if diff @ np.linalg.solve(P, diff) <= 1.0:
        return target.copy(), 0.0
    w, E = np.linalg.eigh(P)
    L = E * np.sqrt(w)
    t = np.linspace(0.0, 2.0 * np.pi, points, endpoint=False)
    B = r + np.column_stack([np.cos(t), np.sin(t)]) @ L.T
    obj = np.sum((B - target) ** 2, axis=1)
    i = int(np.argmin(obj))
    return B[i], float(obj[i])


def linear_kkt_oracle(C, c, z_list, lambda_list, rho):
    """Center update for ``{C x = c}`` from the KKT system of the consensus QP.

    Solves ``[rho s I, C^T; C, 0] [x; nu] = [sum(rho z_i - lambda_i); c]``.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    z = np.asarray(z_list, dtype=float)
    lam = np.asarray(lambda_list, dtype=float)
    s, n = z.shape
    p = C.shape[0]
    K = np.block([[rho * s * np.eye(n), C.T], [C, np.zeros((p, p))]])
    rhs = np.concatenate([np.sum(rho * z - lam, axis=0), c])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n]


def torus_projection_pg(d, c1: float, c2: float, x0=None, step: float = 1e-3, max_iter: int = 10**6, tol: float = 1e-14):
    """Projected gradient for ``min 1/2 ||x - d||^2`` on ``{||p|| = c1, ||v|| = c2}``.

    The state is ``(p, v)`` with two-dimensional blocks. Each iteration takes a
    gradient step of length ``step`` and renormalizes both blocks. Stops early
    once an iteration moves less than ``tol``.
    """
    d = np.asarray(d, dtype=float)

    def retract(x):
        out = x.copy()
        for sl, rad in ((slice(0, 2), c1), (slice(2, 4), c2)):
            nrm = np.linalg.norm(out[sl])
            out[sl] = out[sl] * (rad / nrm) if nrm > 0 else np.array([rad, 0.0])
        return out

    x = retract(d if x0 is None else np.asarray(x0, dtype=float))
    for _ in range(max_iter):
        xn = retract(x - step * (x - d))
        if np.max(np.abs(xn - x)) <= tol:
            return xn
        x = xn
    return x
