"""Per-iteration sub-projections of the consensus ADMM.

``qcqp_project`` moves one auxiliary variable onto the ellipsoid of its sample
(a QCQP with a single quadratic constraint). The three ``center_update_*``
functions move the consensus center onto the estimation constraint set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.optimize import least_squares

ROOT_TOL = 1e-13
ROOT_MAX_ITER = 100


class NewtonDivergence(RuntimeError):
    """The Lagrangian-system Newton solve did not reach its tolerance."""


# ---------------------------------------------------------------------------
# QCQP-1 onto an ellipsoid


def secular_root(d2: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Nonnegative root of ``sum_j d2_j / (phi + beta_j)^2 = 1`` for each row.

    Args:
        d2: (k, n) squared coordinates in the eigenbasis, scaled so that the
            left-hand side equals the ellipsoid membership of the projected point.
        beta: (n,) positive eigenvalues of the shape matrix.

    Every row must satisfy ``sum_j d2_j / beta_j^2 > 1`` (point strictly
    outside). The function is strictly decreasing, so the root is unique. We run
    Newton on ``1/sqrt(g) - 1``, which is nearly linear in ``phi``, and fall
    back to bisection whenever a step leaves the bracket.
    """
    d2 = np.atleast_2d(np.asarray(d2, dtype=float))
    beta = np.asarray(beta, dtype=float)
    k = d2.shape[0]
    lo = np.zeros(k)
    # g(phi) <= sum d2 / phi^2, so phi = ||d|| already gives g <= 1
    hi = np.sqrt(d2.sum(axis=1))
    hi = np.where(hi > 0, hi, 1.0)
    phi = lo.copy()
    active = np.ones(k, dtype=bool)
    for _ in range(ROOT_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = phi[idx]
        den = p[:, None] + beta
        q = d2[idx] / den**2
        g = q.sum(axis=1)
        dg = -2.0 * (q / den).sum(axis=1)
        above = g > 1.0
        lo[idx] = np.where(above, p, lo[idx])
        hi[idx] = np.where(above, hi[idx], p)
        psi = 1.0 / np.sqrt(g) - 1.0
        dpsi = -0.5 * dg / g**1.5
        step = p - psi / dpsi
        bad = ~np.isfinite(step) | (step <= lo[idx]) | (step >= hi[idx])
        step = np.where(bad, 0.5 * (lo[idx] + hi[idx]), step)
        done = (np.abs(g - 1.0) <= ROOT_TOL) | (hi[idx] - lo[idx] <= ROOT_TOL * np.maximum(hi[idx], 1e-300))
        phi[idx] = np.where(done, p, step)
        active[idx[done]] = False
    return phi


@dataclass(frozen=True)
class QcqpInput:
    """One projection problem ``min ||z - (xhat + lambda/rho)||^2`` s.t. ``z in E(r, P)``.

    ``eig`` optionally carries a cached ``(w, E)`` eigendecomposition of ``P``
    so it can be shared by all samples of one ADMM iteration.
    """

    P: np.ndarray
    r: np.ndarray
    xhat: np.ndarray
    lam: np.ndarray
    rho: float
    eig: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        n = np.asarray(self.r).size
        for name in ("xhat", "lam"):
            if np.asarray(getattr(self, name)).size != n:
                raise ValueError(f"{name} has the wrong dimension")
        if np.asarray(self.P).shape != (n, n):
            raise ValueError("P has the wrong dimension")

    def eigh(self):
        if self.eig is not None:
            return self.eig
        return np.linalg.eigh(0.5 * (self.P + np.asarray(self.P).T))


def qcqp_project_batch(
    eig: tuple[np.ndarray, np.ndarray],
    r: np.ndarray,
    xhat: np.ndarray,
    lam: np.ndarray,
    rho: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Project every ``xhat + lam_i/rho`` onto ``E(r_i, P)``.

    Args:
        eig: ``(w, E)`` with ``P = E diag(w) E^T``.
        r: (s, n) sample points.
        xhat: (n,) consensus center.
        lam: (s, n) dual variables.
        rho: penalty.

    Returns:
        ``(z, phi)``: projected points (s, n) and the multipliers of the
        ellipsoid constraint (zero for interior targets).
    """
    w, E = eig
    r = np.atleast_2d(np.asarray(r, dtype=float))
    b = np.asarray(xhat, dtype=float) - r + np.asarray(lam, dtype=float) / rho
    bt = b @ E
    member = np.sum(bt * bt / w, axis=1)
    phi = np.zeros(r.shape[0])
    out = member > 1.0
    if out.any():
        phi[out] = secular_root(bt[out] ** 2 * w, w)
    chi = (bt * (w / (w + phi[:, None]))) @ E.T
    return chi + r, phi


def qcqp_project(inp: QcqpInput) -> np.ndarray:
    """Euclidean projection of ``xhat + lambda/rho`` onto ``E(r, P)``."""
    z, _ = qcqp_project_batch(
        inp.eigh(),
        np.asarray(inp.r, dtype=float)[None, :],
        inp.xhat,
        np.asarray(inp.lam, dtype=float)[None, :],
        inp.rho,
    )
    return z[0]


def resolvent_step(
    eig: tuple[np.ndarray, np.ndarray], b: np.ndarray, eta: np.ndarray
) -> np.ndarray:
    """Rows of ``(I + eta_i P^{-1})^{-1} b_i`` using a cached eigendecomposition."""
    w, E = eig
    return _resolvent_kernel(
        np.ascontiguousarray(np.atleast_2d(b), dtype=float),
        np.ascontiguousarray(eta, dtype=float),
        np.ascontiguousarray(w, dtype=float),
        np.ascontiguousarray(E, dtype=float),
    )


@numba.njit(cache=True)
def _resolvent_kernel(b, eta, w, E):
    s, n = b.shape
    out = np.zeros((s, n))
    bt = np.empty(n)
    for i in range(s):
        for j in range(n):
            acc = 0.0
            for a in range(n):
                acc += b[i, a] * E[a, j]
            bt[j] = acc * w[j] / (w[j] + eta[i])
        for a in range(n):
            acc = 0.0
            for j in range(n):
                acc += E[a, j] * bt[j]
            out[i, a] = acc
    return out


# ---------------------------------------------------------------------------
# Center updates


def _consensus_target(z_list, lambda_list, rho) -> np.ndarray:
    z = np.asarray(z_list, dtype=float)
    lam = np.asarray(lambda_list, dtype=float)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("z_list must be a non-empty list of vectors")
    if lam.shape != z.shape:
        raise ValueError("z_list and lambda_list must have the same shape")
    if not rho > 0:
        raise ValueError("rho must be positive")
    return np.mean(z - lam / rho, axis=0)


def center_update_unconstrained(z_list, lambda_list, rho: float) -> np.ndarray:
    """Minimizer of ``sum_i lambda_i^T (x - z_i) + rho/2 ||x - z_i||^2``."""
    return _consensus_target(z_list, lambda_list, rho)


@dataclass(frozen=True)
class LinearConstraint:
    """The affine set ``{x : C x = c}`` with its cached projector."""

    C: np.ndarray
    c: np.ndarray
    pinv: np.ndarray = field(init=False, repr=False, compare=False)
    U: np.ndarray = field(init=False, repr=False, compare=False)
    offset: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if C.shape[0] != c.size:
            raise ValueError(f"C has {C.shape[0]} rows but c has {c.size} entries")
        Cp = np.linalg.pinv(C)
        offset = Cp @ c
        if not np.allclose(C @ offset, c, atol=1e-9, rtol=0):
            raise ValueError("linear constraint is infeasible")
        U = np.eye(C.shape[1]) - Cp @ C
        U = 0.5 * (U + U.T)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "pinv", Cp)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "offset", offset)

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def g(self, x) -> np.ndarray:
        return self.C @ np.asarray(x, dtype=float) - self.c

    def grad_g(self, x) -> np.ndarray:
        return self.C.T

    def project(self, d) -> np.ndarray:
        """Closest point of the affine set to ``d``."""
        d = np.asarray(d, dtype=float)
        return self.offset + self.U @ (d - self.offset)

    def distance(self, x) -> float:
        return float(np.linalg.norm(self.g(x)))

    def to_dict(self) -> dict:
        return {"type": "linear", "C": self.C.tolist(), "c": self.c.tolist()}


@dataclass(frozen=True)
class SmoothConstraint:
    """Equality constraint ``g(x) = 0`` with Jacobian-transpose ``grad_g`` (n x p).

    ``hess`` is optional. When given, ``hess(x, u)`` returns
    ``sum_j u_j * Hessian(g_j)(x)`` and the Newton solve uses the exact
    Lagrangian Hessian. Otherwise the curvature of ``g`` is dropped.
    """

    g: Callable[[np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray], np.ndarray]
    p: int
    hess: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    initializer: Callable[[np.ndarray], np.ndarray] | None = None

    def distance(self, x) -> float:
        return float(np.max(np.abs(self.g(np.asarray(x, dtype=float)))))

    def project(self, d, x_init=None) -> np.ndarray:
        return center_update_smooth(self, [d], [np.zeros_like(d)], 1.0, x_init=x_init)


@dataclass(frozen=True)
class QuadraticConstraint:
    """Equality constraints ``x^T A_j x + 2 b_j^T x + k_j = 0`` for ``j < p``.

    Projections onto this family run a compiled Newton iteration unless a
    specialized ``projector(d, x_init)`` is attached.
    """

    As: np.ndarray
    bs: np.ndarray
    ks: np.ndarray
    initializer: Callable[[np.ndarray], np.ndarray] | None = None
    projector: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        As = np.ascontiguousarray(np.asarray(self.As, dtype=float))
        if As.ndim != 3 or As.shape[1] != As.shape[2]:
            raise ValueError("As must have shape (p, n, n)")
        As = 0.5 * (As + As.transpose(0, 2, 1))
        bs = np.ascontiguousarray(np.asarray(self.bs, dtype=float).reshape(As.shape[0], As.shape[1]))
        ks = np.asarray(self.ks, dtype=float).reshape(As.shape[0])
        object.__setattr__(self, "As", As)
        object.__setattr__(self, "bs", bs)
        object.__setattr__(self, "ks", ks)

    @property
    def p(self) -> int:
        return self.As.shape[0]

    @property
    def n(self) -> int:
        return self.As.shape[1]

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("i,jik,k->j", x, self.As, x) + 2.0 * self.bs @ x + self.ks

    def grad_g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 2.0 * (self.As @ x + self.bs).T

    def hess(self, x, u) -> np.ndarray:
        return 2.0 * np.tensordot(np.asarray(u, dtype=float), self.As, axes=1)

    def quadratic_forms(self):
        return self.As, self.bs, self.ks

    def distance(self, x) -> float:
        return float(np.max(np.abs(self.g(x))))


@dataclass(frozen=True)
class PulledBackConstraint:
    """The constraint ``g(L y + m) = 0`` in the coordinates ``y``.

    Derivatives follow from the chain rule. The initializer maps through the
    original constraint's initializer when it has one.
    """

    base: object
    L: np.ndarray
    m: np.ndarray
    Linv: np.ndarray

    @property
    def p(self) -> int:
        return self.base.p

    def _x(self, y):
        return self.L @ np.asarray(y, dtype=float) + self.m

    def g(self, y) -> np.ndarray:
        return np.atleast_1d(self.base.g(self._x(y)))

    def grad_g(self, y) -> np.ndarray:
        J = np.asarray(self.base.grad_g(self._x(y)), dtype=float).reshape(self.m.size, -1)
        return self.L.T @ J

    @property
    def hess(self):
        if getattr(self.base, "hess", None) is None:
            return None
        return lambda y, u: self.L.T @ np.asarray(self.base.hess(self._x(y), u), dtype=float) @ self.L

    @property
    def initializer(self):
        init = getattr(self.base, "initializer", None)
        if init is None:
            return None
        return lambda y: self.Linv @ (np.asarray(init(self._x(y)), dtype=float) - self.m)

    def distance(self, y) -> float:
        return float(np.max(np.abs(self.g(y))))


@numba.njit(cache=True)
def _circle_product_descent(Linv, m, idx, radii, d, theta, max_iter, tol):
    """Minimize ``1/2 ||Linv (x(theta) - m) - d||^2`` over the angles ``theta``.

    ``x(theta)`` places ``radii[b] * (cos theta_b, sin theta_b)`` on the
    coordinate pair ``idx[b]`` and zero elsewhere. Newton steps with a
    Levenberg shift when the Hessian is not positive definite, and Armijo
    backtracking on the objective.
    """
    nb = radii.size
    n = m.size
    q = d + Linv @ m

    def position(th):
        x = np.zeros(n)
        for b in range(nb):
            x[idx[b, 0]] = radii[b] * np.cos(th[b])
            x[idx[b, 1]] = radii[b] * np.sin(th[b])
        return x

    x = position(theta)
    R = Linv @ x - q
    f = 0.5 * (R @ R)
    for _ in range(max_iter):
        T = np.zeros((nb, n))  # Linv times the tangent of each circle
        A = np.zeros((nb, n))  # Linv times the point on each circle
        for b in range(nb):
            i0, i1 = idx[b, 0], idx[b, 1]
            c, s = np.cos(theta[b]), np.sin(theta[b])
            for a in range(n):
                T[b, a] = radii[b] * (-s * Linv[a, i0] + c * Linv[a, i1])
                A[b, a] = radii[b] * (c * Linv[a, i0] + s * Linv[a, i1])
        g = T @ R
        H = T @ T.T
        for b in range(nb):
            H[b, b] -= R @ A[b]
        shift = 0.0
        lmin = np.linalg.eigvalsh(H)[0]
        if lmin <= 1e-12 * max(1.0, abs(np.trace(H))):
            shift = -lmin + 1e-6 * max(1.0, abs(np.trace(H)))
        step = -np.linalg.solve(H + shift * np.eye(nb), g)
        if np.max(np.abs(step)) <= tol:
            # a full step below angle resolution: take it and stop
            theta = theta + step
            x = position(theta)
            break
        slope = g @ step
        t = 1.0
        accepted = False
        for _h in range(60):
            th = theta + t * step
            xn = position(th)
            Rn = Linv @ xn - q
            fn = 0.5 * (Rn @ Rn)
            if fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        small = np.max(np.abs(th - theta)) <= tol or fn >= f
        theta, x, R, f = th, xn, Rn, fn
        if small:
            break
    return theta, x


class CircleProductProjector:
    """Euclidean projection in coordinates ``y`` (``x = L y + m``) onto a product of circles.

    The set ``{x : ||x[idx_b]|| = radii_b for every b}`` is parametrized by one
    angle per circle, and every coordinate must belong to exactly one circle.
    The projection minimizes a smooth function of the angles by a descent
    method, so it cannot stall the way the Lagrangian Newton iteration does
    when a circle is small relative to the distance of the target.
    """

    def __init__(self, L, m, Linv, idx, radii, max_iter: int = 100, tol: float = 1e-12):
        self.L = np.ascontiguousarray(L, dtype=float)
        self.m = np.ascontiguousarray(m, dtype=float)
        self.Linv = np.ascontiguousarray(Linv, dtype=float)
        self.idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(-1, 2))
        self.radii = np.ascontiguousarray(radii, dtype=float)
        if sorted(self.idx.ravel().tolist()) != list(range(self.m.size)):
            raise ValueError("the circles must cover every coordinate exactly once")
        self.max_iter = int(max_iter)
        self.tol = float(tol)

    def angles(self, y) -> np.ndarray:
        x = self.L @ np.asarray(y, dtype=float) + self.m
        return np.arctan2(x[self.idx[:, 1]], x[self.idx[:, 0]])

    def __call__(self, d, y_init=None) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        th = self.angles(d if y_init is None else y_init)
        _, x = _circle_product_descent(self.Linv, self.m, self.idx, self.radii, d, th, self.max_iter, self.tol)
        return self.Linv @ (x - self.m)


def pull_back(constraint, L: np.ndarray, m: np.ndarray, Linv: np.ndarray | None = None):
    """Express ``constraint`` in coordinates ``y`` with ``x = L y + m``.

    Linear constraints stay linear and quadratic ones stay quadratic, so both
    keep their fast projections. Anything else is wrapped by the chain rule.
    """
    if constraint is None:
        return None
    L = np.asarray(L, dtype=float)
    m = np.asarray(m, dtype=float)
    Linv = np.linalg.inv(L) if Linv is None else Linv
    if isinstance(constraint, LinearConstraint):
        return LinearConstraint(constraint.C @ L, constraint.c - constraint.C @ m)
    forms = getattr(constraint, "quadratic_forms", None)
    if forms is not None:
        As, bs, ks = forms()
        base_init = getattr(constraint, "initializer", None)
        init = None
        if base_init is not None:
            init = lambda y: Linv @ (np.asarray(base_init(L @ y + m), dtype=float) - m)  # noqa: E731
        projector = None
        circles = getattr(constraint, "circle_blocks", None)
        blocks = circles() if circles is not None else None
        if blocks is not None:
            projector = CircleProductProjector(L, m, Linv, *blocks)
        return QuadraticConstraint(
            As=np.einsum("ab,jac,cd->jbd", L, As, L),
            bs=(As @ m + bs) @ L,
            ks=np.einsum("a,jab,b->j", m, As, m) + 2.0 * bs @ m + ks,
            initializer=init,
            projector=projector,
        )
    return PulledBackConstraint(constraint, L, m, Linv)


@dataclass
class NewtonOptions:
    max_iter: int = 50
    tol_g: float = 1e-10
    tol_stat: float = 1e-8
    max_halvings: int = 30


def center_update_linear(lc: LinearConstraint, z_list, lambda_list, rho: float) -> np.ndarray:
    """Projection of the consensus target onto ``{C x = c}``."""
    return lc.project(_consensus_target(z_list, lambda_list, rho))


def _lagrange_residual(sc, x, u, d):
    J = np.atleast_2d(np.asarray(sc.grad_g(x), dtype=float)).reshape(x.size, sc.p)
    return np.concatenate([x - d + J @ u, np.atleast_1d(sc.g(x))]), J


def center_update_smooth(
    sc: SmoothConstraint,
    z_list,
    lambda_list,
    rho: float,
    x_init=None,
    newton_opts: NewtonOptions | None = None,
) -> np.ndarray:
    """Projection of the consensus target onto ``{g(x) = 0}`` by Newton's method.

    Solves the Lagrangian system ``rho*s*(x - d) + grad_g(x) u = 0``,
    ``g(x) = 0`` with the multiplier rescaled by ``rho*s`` so the residual is in
    units of ``x``. Steps are damped by halving until the residual norm drops.

    Args:
        x_init: warm start that selects the branch when several KKT points
            exist. Defaults to ``sc.initializer(d)`` or ``d`` itself.

    Raises:
        NewtonDivergence: when the tolerances are not met.
    """
    opts = newton_opts or NewtonOptions()
    d = _consensus_target(z_list, lambda_list, rho)
    n, p = d.size, sc.p
    if x_init is None:
        x_init = sc.initializer(d) if sc.initializer is not None else d
    forms = getattr(sc, "quadratic_forms", None)
    if forms is not None:
        As, bs, ks = forms()
        x, status, gmax, stat = _quadratic_newton(
            As, bs, ks, d, np.array(x_init, dtype=float),
            opts.max_iter, opts.tol_g, opts.tol_stat, opts.max_halvings,
        )
        if status == 0:
            return x
        if status == 1:
            raise NewtonDivergence(f"line search failed at residual {stat:.3e}")
        raise NewtonDivergence(f"Newton did not converge: |g|={gmax:.3e}, stationarity={stat:.3e}")
    x = np.array(x_init, dtype=float)
    J = np.atleast_2d(np.asarray(sc.grad_g(x), dtype=float)).reshape(n, p)
    # least-squares multiplier estimate for the starting point
    u = np.linalg.lstsq(J, d - x, rcond=None)[0]
    F, J = _lagrange_residual(sc, x, u, d)
    norm = np.linalg.norm(F)
    for _ in range(opts.max_iter):
        if np.max(np.abs(F[n:])) <= opts.tol_g and np.linalg.norm(F[:n]) <= opts.tol_stat:
            return x
        K = np.eye(n)
        if sc.hess is not None:
            K = K + np.asarray(sc.hess(x, u), dtype=float)
        Jac = np.block([[K, J], [J.T, np.zeros((p, p))]])
        try:
            step = np.linalg.solve(Jac, -F)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(Jac, -F, rcond=None)[0]
        t = 1.0
        for _ in range(opts.max_halvings):
            xn, un = x + t * step[:n], u + t * step[n:]
            Fn, Jn = _lagrange_residual(sc, xn, un, d)
            nn = np.linalg.norm(Fn)
            if nn < norm or nn <= opts.tol_g:
                break
            t *= 0.5
        else:
            raise NewtonDivergence(f"line search failed at residual {norm:.3e}")
        x, u, F, J, norm = xn, un, Fn, Jn, nn
    if np.max(np.abs(F[n:])) <= opts.tol_g and np.linalg.norm(F[:n]) <= opts.tol_stat:
        return x
    raise NewtonDivergence(
        f"Newton did not converge: |g|={np.max(np.abs(F[n:])):.3e}, stationarity={np.linalg.norm(F[:n]):.3e}"
    )


@numba.njit(cache=True)
def _quadratic_residual(As, bs, ks, d, x, u):
    p, n = ks.size, d.size
    F = np.empty(n + p)
    J = np.empty((n, p))
    for j in range(p):
        Ax = As[j] @ x
        J[:, j] = 2.0 * (Ax + bs[j])
        F[n + j] = x @ Ax + 2.0 * (bs[j] @ x) + ks[j]
    F[:n] = x - d + J @ u
    return F, J


@numba.njit(cache=True)
def _quadratic_newton(As, bs, ks, d, x, max_iter, tol_g, tol_stat, max_halvings):
    """Compiled Newton iteration for constraints ``x^T A_j x + 2 b_j^T x + k_j = 0``.

    Same iteration as the generic path in :func:`center_update_smooth` with the
    exact Lagrangian Hessian. Status codes: 0 converged, 1 line search failed,
    2 iteration limit reached.
    """
    p, n = ks.size, d.size
    J = np.empty((n, p))
    for j in range(p):
        J[:, j] = 2.0 * (As[j] @ x + bs[j])
    u = np.linalg.lstsq(J, d - x)[0]
    F, J = _quadratic_residual(As, bs, ks, d, x, u)
    norm = np.sqrt(F @ F)
    for _ in range(max_iter):
        if np.max(np.abs(F[n:])) <= tol_g and np.sqrt(F[:n] @ F[:n]) <= tol_stat:
            return x, 0, 0.0, 0.0
        Jac = np.zeros((n + p, n + p))
        for a in range(n):
            Jac[a, a] = 1.0
        for j in range(p):
            Jac[:n, :n] += 2.0 * u[j] * As[j]
        Jac[:n, n:] = J
        Jac[n:, :n] = J.T
        step = np.linalg.lstsq(Jac, -F)[0]
        tt = 1.0
        ok = False
        for _h in range(max_halvings):
            xn = x + tt * step[:n]
            un = u + tt * step[n:]
            Fn, Jn = _quadratic_residual(As, bs, ks, d, xn, un)
            nn = np.sqrt(Fn @ Fn)
            if nn < norm or nn <= tol_g:
                ok = True
                break
            tt *= 0.5
        if not ok:
            return x, 1, 0.0, norm
        x, u, F, J, norm = xn, un, Fn, Jn, nn
    gmax = np.max(np.abs(F[n:]))
    stat = np.sqrt(F[:n] @ F[:n])
    if gmax <= tol_g and stat <= tol_stat:
        return x, 0, 0.0, 0.0
    return x, 2, gmax, stat


def penalty_path(sc, d, x0, decades: int = 14) -> np.ndarray:
    """Approximate projection of ``d`` onto ``{g = 0}`` by quadratic-penalty continuation.

    Minimizes ``||x - d||^2 + kappa ||g(x)||^2`` for ``kappa`` growing by
    decades from ``1 / ||grad g(x0)||^2``, each stage warm-started from the
    previous one (Levenberg-Marquardt). The result is a good start for the
    Newton solve when the latter fails from ``x0`` because the constraint is
    strongly curved on the scale of ``||x0 - d||``.
    """
    d = np.asarray(d, dtype=float)
    x = np.array(x0, dtype=float)
    n = d.size
    J0 = np.asarray(sc.grad_g(x), dtype=float).reshape(n, -1)
    scale = 1.0 / max(float(np.max(np.sum(J0**2, axis=0))), 1e-300)
    eye = np.eye(n)
    for e in range(decades):
        sk = np.sqrt(scale * 10.0**e)
        res = least_squares(
            lambda v: np.concatenate([v - d, sk * np.atleast_1d(sc.g(v))]),
            x,
            jac=lambda v: np.vstack([eye, sk * np.asarray(sc.grad_g(v), dtype=float).reshape(n, -1).T]),
            method="lm",
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
        )
        x = res.x
    return x


def _smooth_with_fallbacks(sc, z_list, lambda_list, rho, x_init):
    starts = [x_init] if x_init is not None else []
    starts.append(None)  # the constraint's feasible initializer
    d = _consensus_target(z_list, lambda_list, rho)
    last = None
    for x0 in starts:
        try:
            return center_update_smooth(sc, z_list, lambda_list, rho, x_init=x0)
        except NewtonDivergence as exc:
            last = exc
        if x0 is None:
            init = getattr(sc, "initializer", None)
            x0 = init(d) if init is not None else d
        # strongly curved constraint near the start: continue along a penalty
        # path and let Newton finish from its end point
        try:
            return center_update_smooth(sc, z_list, lambda_list, rho, x_init=penalty_path(sc, d, x0))
        except NewtonDivergence as exc:
            last = exc
    raise last


def project_center(constraint, z_list, lambda_list, rho, x_init=None) -> np.ndarray:
    """Dispatch to the center update matching ``constraint`` (``None`` = free).

    For nonlinear constraints a failed Newton solve from ``x_init`` is retried
    from the end of a penalty path, then from the constraint's feasible
    initializer. :class:`NewtonDivergence` propagates only when all fail.
    """
    if constraint is None:
        return center_update_unconstrained(z_list, lambda_list, rho)
    if isinstance(constraint, LinearConstraint):
        return center_update_linear(constraint, z_list, lambda_list, rho)
    projector = getattr(constraint, "projector", None)
    if projector is not None:
        return projector(_consensus_target(z_list, lambda_list, rho), x_init)
    return _smooth_with_fallbacks(constraint, z_list, lambda_list, rho, x_init)
