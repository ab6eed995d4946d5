"""Origin-centered minimum-volume enclosing ellipsoid via Frank-Wolfe.

The dual problem is D-optimal design on the simplex::

    max_mu  log det(sum_i mu_i a_i a_i^T)   s.t.  sum(mu) = 1, mu >= 0

and the primal shape is ``P = n * sum_i mu_i a_i a_i^T``. Each Frank-Wolfe step
moves toward the simplex vertex with the largest gradient coordinate
``a_j^T M^{-1} a_j``, or away from the support vertex with the smallest one,
using the exact log-det line search. ``M^{-1}`` and all
gradient coordinates are maintained by Sherman-Morrison rank-one updates, so
one iteration costs O(n^2 + (n + 1) s).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

REFRESH_EVERY = 50
RANK_RTOL = 1e-12
RIDGE_SCALE = 1e-8


class DegenerateSpan(ValueError):
    """The displacement vectors do not span the space, even after regularization."""


@dataclass
class MveeResult:
    weights: np.ndarray
    shape: np.ndarray
    duality_gap: float
    iterations: int
    ridge: float = 0.0
    objective_trace: np.ndarray | None = field(default=None, repr=False)
    gap_trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def converged_gap(self) -> float:
        return self.duality_gap


def fw_direction(mu: np.ndarray, alphas: np.ndarray) -> int:
    """Index of the largest gradient coordinate of the log-det dual (lowest index on ties)."""
    alphas = np.asarray(alphas, dtype=float)
    M = alphas.T @ (alphas * np.asarray(mu)[:, None])
    try:
        X = np.linalg.solve(M, alphas.T)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular moment matrix in fw_direction") from exc
    g = np.einsum("ij,ji->i", alphas, X)
    return int(np.argmax(g))


def fw_optimal_step(g_j: float, n: int) -> float:
    """Exact maximizer over [0, 1] of log det((1-k) M + k a_j a_j^T).

    ``g_j = a_j^T M^{-1} a_j``. Returns 0 when ``g_j <= n`` (no ascent along the
    vertex direction).
    """
    if g_j <= n:
        return 0.0
    return (g_j / n - 1.0) / (g_j - 1.0)


@numba.njit(cache=True)
def _moments(A, mu, ridge):
    s, n = A.shape
    M = np.zeros((n, n))
    for i in range(s):
        if mu[i] != 0.0:
            for a in range(n):
                va = mu[i] * A[i, a]
                for b in range(n):
                    M[a, b] += va * A[i, b]
    for a in range(n):
        M[a, a] += ridge
    Minv = np.linalg.inv(M)
    g = np.empty(s)
    for i in range(s):
        acc = 0.0
        for a in range(n):
            t = 0.0
            for b in range(n):
                t += Minv[a, b] * A[i, b]
            acc += A[i, a] * t
        g[i] = acc
    sign, logdet = np.linalg.slogdet(M)
    return Minv, g, logdet


@numba.njit(cache=True)
def _extremes(h, w):
    # largest coordinate overall and smallest over the support of w
    j = 0
    hj = h[0]
    k = -1
    hk = np.inf
    for i in range(h.shape[0]):
        hi = h[i]
        if hi > hj:
            hj = hi
            j = i
        if w[i] > 0.0 and hi < hk:
            hk = hi
            k = i
    return j, hj, k, hk


@numba.njit(cache=True)
def _fw_loop(A, mu, eps, max_iter, ridge, refresh, record, away):
    # Lazy scaling: Minv = gam * B, g = gam * h, mu = sig * w. A step then
    # touches only one O(s n) loop; the scalars are folded back on refresh.
    # Toward steps move weight to the largest gradient coordinate; away steps
    # remove weight from the smallest coordinate in the support, which gives
    # linear convergence near the optimum. Warm-started continuation inside
    # the ADMM turns them off so the weights change smoothly between calls.
    s, n = A.shape
    B, h, xi = _moments(A, mu, ridge)
    gam = 1.0
    sig = 1.0
    w = mu.copy()
    ntr = max_iter if record else 1
    obj_tr = np.empty(ntr + 1)
    gap_tr = np.empty(ntr + 1)
    v = np.empty(n)
    av = np.empty(s)
    AT = np.ascontiguousarray(A.T)
    j, hj, k, hk = _extremes(h, w)
    it = 0
    gap = gam * hj - n
    while True:
        gj = gam * hj
        gap = gj - n
        if record:
            obj_tr[it] = xi
            gap_tr[it] = gap
        if gap <= eps * n or it >= max_iter:
            break
        # step of the form M <- (1 - t) M + t a a^T; t < 0 for away steps
        gk = gam * hk
        idx = j
        g = gj
        t = (gj / n - 1.0) / (gj - 1.0)
        drop = False
        if away and k >= 0 and 1.0 - gk / n > gj / n - 1.0:
            muk = w[k] * sig
            if muk < 1.0:
                tmax = muk / (1.0 - muk)
                ta = (1.0 - gk / n) / (gk - 1.0) if gk > 1.0 else np.inf
                idx = k
                g = gk
                if ta >= tmax:
                    t = -tmax
                    drop = True
                else:
                    t = -ta
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += B[a, b] * A[idx, b]
            v[a] = acc
        denom = 1.0 - t + t * g
        c = gam * t / denom
        for i in range(s):
            av[i] = AT[0, i] * v[0]
        for a in range(1, n):
            va = v[a]
            for i in range(s):
                av[i] += AT[a, i] * va
        for i in range(s):
            h[i] -= c * av[i] * av[i]
        for a in range(n):
            for b in range(n):
                B[a, b] -= c * v[a] * v[b]
        inv1t = 1.0 / (1.0 - t)
        gam *= inv1t
        sig *= 1.0 - t
        if drop:
            w[idx] = 0.0
        else:
            w[idx] += t / sig
            if w[idx] < 0.0:
                w[idx] = 0.0
        # log det((1-t) M + t a a^T) = n log(1-t) + log det M + log(1 + t g / (1-t))
        xi += n * np.log(1.0 - t) + np.log(denom * inv1t)
        it += 1
        if it % refresh == 0:
            tot = 0.0
            for i in range(s):
                w[i] *= sig
                tot += w[i]
            for i in range(s):
                w[i] /= tot
            sig = 1.0
            gam = 1.0
            B, h, xi = _moments(A, w, ridge)
        j, hj, k, hk = _extremes(h, w)
    for i in range(s):
        mu[i] = w[i] * sig
    return mu, gap, it, obj_tr[: it + 1], gap_tr[: it + 1]


def _ridge_for(alphas: np.ndarray) -> float:
    S = alphas.T @ alphas
    w = np.linalg.eigvalsh(S)
    if w[-1] <= 0:
        raise DegenerateSpan("all displacement vectors are zero")
    if w[0] >= RANK_RTOL * w[-1]:
        return 0.0
    return RIDGE_SCALE * float(np.mean(np.sum(alphas * alphas, axis=1)))


def mvee_origin_fw(
    alphas,
    eps: float = 1e-6,
    max_iter: int = 100_000,
    mu0: np.ndarray | None = None,
    record: bool = False,
    regularize: bool = True,
    away: bool = True,
) -> MveeResult:
    """Minimum-volume origin-centered ellipsoid covering the rows of ``alphas``.

    Args:
        alphas: (s, n) displacement vectors.
        eps: relative duality-gap target; stops once ``max_i g_i - n <= eps * n``.
        max_iter: Frank-Wolfe iteration cap.
        mu0: warm-start weights (renormalized); uniform when omitted.
        record: keep per-iteration dual objective and gap traces.
        regularize: add a small ridge when the vectors are rank deficient
            instead of raising :class:`DegenerateSpan`.
        away: allow away and drop steps. Without them the iteration is the
            classical toward-only scheme, whose gap decays sublinearly.

    Every row satisfies ``a^T P^{-1} a <= 1 + eps`` on convergence.
    """
    A = np.ascontiguousarray(alphas, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("alphas must be a non-empty (s, n) array")
    s, n = A.shape
    ridge = _ridge_for(A)
    if ridge > 0 and not regularize:
        raise DegenerateSpan("displacement vectors do not span R^n")
    if mu0 is None:
        mu = np.full(s, 1.0 / s)
    else:
        mu = np.array(mu0, dtype=float)
        if mu.shape != (s,) or np.any(mu < 0) or mu.sum() <= 0:
            mu = np.full(s, 1.0 / s)
        else:
            mu /= mu.sum()
        # a warm start with a singular moment matrix is useless; mix in uniform
        M = A.T @ (A * mu[:, None]) + ridge * np.eye(n)
        if np.linalg.eigvalsh(M)[0] <= RANK_RTOL * max(np.trace(M), 1e-300):
            mu = 0.5 * mu + 0.5 / s
    try:
        mu, _, it, obj_tr, gap_tr = _fw_loop(
            A, mu, float(eps), int(max_iter), float(ridge), REFRESH_EVERY, bool(record), bool(away)
        )
    except Exception as exc:  # numba surfaces LinAlgError from inv
        raise DegenerateSpan(f"moment matrix is singular: {exc}") from exc
    mu = np.maximum(mu, 0.0)
    mu /= mu.sum()
    M = A.T @ (A * mu[:, None]) + ridge * np.eye(n)
    X = np.linalg.solve(M, A.T)
    gap = float(np.max(np.einsum("ij,ji->i", A, X)) - n)
    shape = n * M
    shape = 0.5 * (shape + shape.T)
    return MveeResult(
        weights=mu,
        shape=shape,
        duality_gap=gap,
        iterations=int(it),
        ridge=ridge,
        objective_trace=obj_tr.copy() if record else None,
        gap_trace=gap_tr.copy() if record else None,
    )


@numba.njit(cache=True)
def _fw_continue_kernel(A, mu, eps, steps, ridge, refresh):
    s, n = A.shape
    w, gap, it, _, _ = _fw_loop(A, mu, eps, steps, ridge, refresh, False, False)
    tot = 0.0
    for i in range(s):
        if w[i] < 0.0:
            w[i] = 0.0
        tot += w[i]
    M = np.zeros((n, n))
    for i in range(s):
        w[i] /= tot
        wi = w[i]
        if wi != 0.0:
            for a in range(n):
                va = wi * A[i, a]
                for b in range(a, n):
                    M[a, b] += va * A[i, b]
    for a in range(n):
        M[a, a] += ridge
        for b in range(a):
            M[a, b] = M[b, a]
    return w, M, gap, it


def fw_continue(alphas: np.ndarray, mu: np.ndarray, eps: float, steps: int, ridge: float = 0.0):
    """Run up to ``steps`` Frank-Wolfe iterations from the weights ``mu``.

    Lean entry point for callers that keep the weights between calls (the
    ADMM shape block). ``mu`` must be on the simplex with a nonsingular moment
    matrix and ``ridge`` is used as given. The reported gap is the one tracked
    by the rank-one updates, exact up to the periodic-refresh drift.

    Returns:
        ``(weights, shape, gap, iterations)``.
    """
    A = np.ascontiguousarray(alphas, dtype=float)
    n = A.shape[1]
    w, M, gap, it = _fw_continue_kernel(
        A, np.array(mu, dtype=float), float(eps), int(steps), float(ridge), REFRESH_EVERY
    )
    return w, n * M, float(gap), int(it)


def dual_objective(mu: np.ndarray, alphas: np.ndarray) -> float:
    alphas = np.asarray(alphas, dtype=float)
    M = alphas.T @ (alphas * np.asarray(mu)[:, None])
    return float(np.linalg.slogdet(M)[1])
