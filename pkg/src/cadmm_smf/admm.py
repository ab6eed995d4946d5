"""Consensus ADMM for the sampled minimum-volume ellipsoid problem.

The sampled problem is::

    min_{P, x}  log det P   s.t.  (r_i - x)^T P^{-1} (r_i - x) <= 1,  g(x) = 0

Each sample gets a private copy ``z_i`` of the center, tied to the consensus
center ``x`` through ``x = z_i``. One outer iteration runs four blocks in order:

1. shape: ``P`` comes from the origin-centered MVEE dual of the displacements
   ``r_i - x`` (Frank-Wolfe on the D-optimal design weights ``mu``, see
   :mod:`cadmm_smf.mvee`);
2. copies: every ``z_i`` solves its augmented-Lagrangian subproblem;
3. center: ``x`` is the projection of ``mean(z_i - lambda_i / rho)`` onto
   ``{g = 0}`` (see :mod:`cadmm_smf.projections`);
4. duals: ``lambda_i += rho (x - z_i)``.

The copy subproblem of block 2 carries the containment multiplier of sample
``i``. Taking that multiplier from the design weights gives the resolvent form
``z_i = r_i + (I + eta_i P^{-1})^{-1} b_i`` with ``eta_i = 2 n mu_i / rho``,
whose fixed points are exactly the KKT points of the sampled problem. The plain
Euclidean projection of ``x + lambda_i / rho`` onto ``E(r_i, P)`` (with the
shape computed from ``r_i - z_i``) is available as ``z_update="projection"``.
Its multipliers are unconstrained, so it also has fixed points that are not KKT
points.

At a constrained optimum several samples are active at once, the objective has
a kink and the optimal weights are not unique. Solving each shape block to
optimality then makes the weights jump between optimal elements and the center
cycles. Instead, block 1 runs a fixed number of warm-started Frank-Wolfe steps
(``fw_max_iter``) per outer iteration. The weights then move continuously and
the loop behaves as a primal-dual method on the saddle function
``log det(sum_i mu_i (r_i - x)(r_i - x)^T)``: ascent in ``mu``, descent in ``x``.
The stopping rule therefore also requires the Frank-Wolfe gap to be small.

After the loop, an optional active-set refinement solves the KKT system on the
active samples by Newton's method and swaps samples in and out until every
sample is covered. The result is only accepted if it is an exact KKT point that
covers every sample. Otherwise the ADMM iterate is kept.
"""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from time import perf_counter

import numba
import numpy as np
from scipy.optimize import nnls, root

from .ellipsoid import Ellipsoid
from .mvee import fw_continue, mvee_origin_fw
from .projections import (
    LinearConstraint,
    NewtonDivergence,
    project_center,
    pull_back,
    qcqp_project_batch,
    resolvent_step,
)

Z_UPDATES = ("consistent", "projection")
BLOCKS = ("shape", "copies", "center", "dual")


@dataclass
class AdmmOptions:
    """Solver settings.

    Attributes:
        rho: dimensionless penalty. The working per-sample penalty is
            ``rho * n^2 / (s * median_i ||r_i - mean(r)||^2)``. Dividing by the
            squared spread removes the units of the samples and dividing by
            ``s`` keeps the total penalty independent of the sample count. The
            center moves by roughly ``n / rho`` per unit of stationarity
            residual, so the ``n^2`` factor keeps the step stable as the
            dimension grows.
        eps_center: relative stopping tolerance. The loop stops once
            ``||x^{t+1} - x^t|| <= eps_center * spread``,
            ``consensus_residual / s <= eps_center * spread / 10`` and the
            Frank-Wolfe gap is at most ``fw_eps * n``, where ``spread`` is the
            root median squared sample spread.
        max_outer: outer-iteration cap. Hitting it sets ``converged = False``.
        fw_eps: relative duality-gap target of the shape block.
        fw_max_iter: Frank-Wolfe steps per outer iteration.
        inflate_shape: scale the final shape so that every sample is covered.
        z_update: ``"consistent"`` (multiplier-consistent resolvent) or
            ``"projection"`` (Euclidean projection onto the sample ellipsoid).
        refine: run the active-set KKT refinement after the loop.
        threads: worker threads for the copy update (1 = sequential).
        precondition: solve in coordinates where the samples have identity
            covariance (see :class:`AffineFrame`) and map the result back.
        kkt_check: evaluate the KKT residual of the result (``nan`` when off).
    """

    rho: float = 75.0
    eps_center: float = 1e-7
    max_outer: int = 2000
    fw_eps: float = 5e-5
    fw_max_iter: int = 30
    inflate_shape: bool = True
    z_update: str = "consistent"
    refine: bool = True
    threads: int = 1
    precondition: bool = True
    kkt_check: bool = True

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_center > 0 and self.fw_eps > 0):
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1 or self.fw_max_iter < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.z_update not in Z_UPDATES:
            raise ValueError(f"z_update must be one of {Z_UPDATES}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AdmmOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ADMM options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdmmState:
    xhat: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    iteration: int = 0
    rho: float = 0.0

    def shifted(self, delta) -> "AdmmState":
        """Copy with the center, copies and shape translated by ``delta``."""
        delta = np.asarray(delta, dtype=float)
        return AdmmState(
            xhat=self.xhat + delta,
            z=self.z + delta,
            lam=self.lam.copy(),
            mu=self.mu.copy(),
            P=self.P.copy(),
            iteration=0,
            rho=self.rho,
        )


@dataclass
class AdmmDiagnostics:
    consensus_residual: list = field(default_factory=list)
    center_step: list = field(default_factory=list)
    mvee_gap: list = field(default_factory=list)
    kkt_residual: float = float("nan")
    kkt_residual_admm: float = float("nan")
    constraint_violation: float = 0.0
    inflation_factor: float = 1.0
    iterations: int = 0
    converged: bool = False
    refined: bool = False
    refine_info: str = ""
    ridge: float = 0.0
    # wall time per block summed over the loop: shape, copies, center, dual
    block_seconds: dict = field(default_factory=lambda: dict.fromkeys(BLOCKS, 0.0))

    @property
    def nonconvergence(self) -> bool:
        return not self.converged

    def rows(self):
        """(iteration, consensus_residual, center_step, mvee_gap) per iteration, 1-based."""
        return [
            (t + 1, self.consensus_residual[t], self.center_step[t], self.mvee_gap[t])
            for t in range(len(self.consensus_residual))
        ]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "consensus_residual", "center_step", "mvee_gap"])
        for it, cr, st, gap in self.rows():
            w.writerow([it, repr(float(cr)), repr(float(st)), repr(float(gap))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# helpers


def _normals(constraint, x) -> np.ndarray | None:
    if constraint is None:
        return None
    J = np.asarray(constraint.grad_g(x), dtype=float)
    return J.reshape(x.shape[0], -1)


def _violation(constraint, x) -> float:
    if constraint is None:
        return 0.0
    return float(np.max(np.abs(np.atleast_1d(constraint.g(x)))))


def _sqrt_pair(P):
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def select_weights(alphas, P, normals, idx, balance: float = 1.0, slack=None) -> np.ndarray:
    """Minimum-norm KKT weights supported on the samples ``idx``.

    Solves the nonnegative least-squares problem in ``mu >= 0``::

        balance * || sum_i mu_i vech(b_i b_i^T) - vech(I) / n ||^2
            + || Pi sum_i mu_i b_i ||^2

    with ``b_i = P^{-1/2} alpha_i`` and ``Pi`` the orthogonal projector onto the
    complement of ``P^{1/2} normals``. The first term is shape stationarity
    (``n sum mu b b^T = I``). The second is center stationarity modulo the
    constraint normals. Off-diagonal ``vech`` entries carry ``sqrt(2)`` so the
    norm is the Frobenius norm. With ``slack`` (one value per entry of ``idx``)
    the complementary-slackness terms ``sum_i (slack_i mu_i)^2`` are added.

    Returns:
        (s,) weights, zero outside ``idx``.
    """
    A = np.asarray(alphas, dtype=float)
    s, n = A.shape
    Ph, Hh = _sqrt_pair(P)
    B = A[idx] @ Hh
    iu = np.triu_indices(n)
    scale = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    mom = (B[:, iu[0]] * B[:, iu[1]] * scale).T
    target = np.eye(n)[iu] * scale / n
    if normals is None or normals.size == 0:
        Pi = np.eye(n)
    else:
        Q, _ = np.linalg.qr(Ph @ normals)
        Pi = np.eye(n) - Q @ Q.T
    blocks = [balance * mom, Pi @ B.T]
    rhs = [balance * target, np.zeros(n)]
    if slack is not None:
        blocks.append(np.diag(np.asarray(slack, dtype=float)))
        rhs.append(np.zeros(len(idx)))
    M = np.vstack(blocks)
    rhs = np.concatenate(rhs)
    x, _ = nnls(M, rhs, maxiter=50 * M.shape[1])
    out = np.zeros(s)
    out[idx] = x
    return out


def _memberships(alphas, P) -> np.ndarray:
    X = np.linalg.solve(P, alphas.T)
    return np.einsum("ij,ji->i", alphas, X)


def _spread(r) -> float:
    d = r - r.mean(axis=0)
    sc = float(np.median(np.sum(d * d, axis=1)))
    if sc <= 0:
        sc = float(np.mean(np.sum(d * d, axis=1)))
    return sc if sc > 0 else 1.0


# ---------------------------------------------------------------------------
# KKT residual


def kkt_residual(state: AdmmState, samples, constraint=None, delta: float = 1e-3, detail=False):
    """Dimensionless KKT residual of ``(state.xhat, state.P)``.

    The multipliers are not read from the state. They are selected by
    :func:`select_weights` over the samples whose membership is within
    ``delta`` of the maximum, minimizing the sum of squares of the terms below,
    so the residual measures the distance to the KKT conditions with the best
    supported multipliers. With ``zeta_i = n mu_i``
    the four terms are

    * shape stationarity ``max|n sum mu_i b_i b_i^T - I|``;
    * center stationarity ``||Pi sum mu_i b_i||``;
    * feasibility ``max(0, max_i m_i - 1)`` and ``||g(x)||_inf``;
    * complementary slackness ``max_i n mu_i |m_i - 1|``;

    where ``b_i = P^{-1/2}(r_i - x)`` and ``m_i = ||b_i||^2``.

    Returns the maximum, or ``(maximum, dict of terms)`` with ``detail=True``.
    """
    r = np.atleast_2d(np.asarray(samples, dtype=float))
    x = np.asarray(state.xhat, dtype=float)
    P = np.asarray(state.P, dtype=float)
    s, n = r.shape
    A = r - x
    Ph, Hh = _sqrt_pair(P)
    B = A @ Hh
    m = np.sum(B * B, axis=1)
    near = np.flatnonzero(m >= m.max() - delta)
    normals = _normals(constraint, x)
    mu = select_weights(A, P, normals, near, slack=n * np.abs(m[near] - 1.0))
    shape_stat = float(np.max(np.abs(n * (B.T * mu) @ B - np.eye(n))))
    if normals is None or normals.size == 0:
        Pi = np.eye(n)
    else:
        Q, _ = np.linalg.qr(Ph @ normals)
        Pi = np.eye(n) - Q @ Q.T
    center_stat = float(np.linalg.norm(Pi @ (B.T @ mu)))
    feas = max(0.0, float(m.max()) - 1.0, _violation(constraint, x))
    slack = float(np.max(n * mu * np.abs(m - 1.0)))
    terms = {"shape": shape_stat, "center": center_stat, "feasibility": feas, "slackness": slack}
    val = max(terms.values())
    return (val, terms) if detail else val


# ---------------------------------------------------------------------------
# active-set refinement


def _kkt_solve(r, S, x0, zeta0, constraint):
    """Newton (hybrid Powell) solve of the KKT system on the active set ``S``.

    Unknowns are the center, one multiplier per active sample and one per
    constraint. Equations: center stationarity ``H sum zeta_i a_i = J u``,
    activity ``a_i^T H a_i = 1`` and ``g(x) = 0``, where
    ``H = (sum zeta_i a_i a_i^T)^{-1}`` and ``a_i = r_i - x``.
    """
    n = r.shape[1]
    k = len(S)
    p = 0 if constraint is None else int(np.atleast_1d(constraint.g(x0)).size)
    RS = r[S]
    A0 = RS - x0
    M0 = (A0.T * zeta0) @ A0
    L = np.sqrt(abs(np.trace(M0))) + 1e-300

    def F(v):
        x = v[:n]
        zeta = v[n : n + k]
        u = v[n + k :]
        A = RS - x
        M = (A.T * zeta) @ A
        try:
            H = np.linalg.inv(M)
        except np.linalg.LinAlgError:
            return np.full(n + k + p, 1e6)
        e1 = H @ (A.T @ zeta)
        if p:
            e1 = e1 - _normals(constraint, x) @ u
            e3 = np.atleast_1d(constraint.g(x)) / L
        else:
            e3 = np.zeros(0)
        e2 = np.einsum("ij,jk,ik->i", A, H, A) - 1.0
        return np.concatenate([e1 * L, e2, e3])

    try:
        H0 = np.linalg.inv(M0)
    except np.linalg.LinAlgError:
        return None
    if p:
        u0 = np.linalg.lstsq(_normals(constraint, x0), H0 @ (A0.T @ zeta0), rcond=None)[0]
    else:
        u0 = np.zeros(0)
    with np.errstate(all="ignore"):
        sol = root(F, np.concatenate([x0, zeta0, u0]), method="hybr", options={"xtol": 1e-15})
    v = sol.x
    res = float(np.max(np.abs(F(v))))
    return v[:n], v[n : n + k], res


def _try_set(r, S, x, zeta0, constraint, tol=1e-9):
    out = _kkt_solve(r, S, x, np.maximum(zeta0, 1e-6), constraint)
    if out is None:
        return None
    xn, zn, res = out
    if not np.isfinite(res) or res > tol or zn.min() < -1e-12:
        return None
    A = r[S] - xn
    try:
        H = np.linalg.inv((A.T * zn) @ A)
    except np.linalg.LinAlgError:
        return None
    Ar = r - xn
    mm = np.einsum("ij,jk,ik->i", Ar, H, Ar)
    return xn, zn, H, mm


def _search_initial_set(r, x, m, generic, constraint, extra: int = 3, max_sets: int = 600):
    """Best solvable active set among the ``generic + extra`` most active samples.

    Sets of size ``generic`` and ``generic - 1`` are tried (at most
    ``max_sets`` of them) and the one leaving the smallest violation outside
    the set wins. Returns ``(S, cur)`` or ``None``.
    """
    top = [int(i) for i in np.argsort(-m, kind="stable")[: generic + extra]]
    best = None
    tried = 0
    for size in (generic, generic - 1):
        if size < 1 or size > len(top):
            continue
        for S in itertools.combinations(top, size):
            tried += 1
            if tried > max_sets:
                break
            c = _try_set(r, list(S), x, np.ones(size), constraint)
            if c is None:
                continue
            out = np.ones(r.shape[0], bool)
            out[list(S)] = False
            v = float(c[3][out].max()) if out.any() else 0.0
            if best is None or v < best[0]:
                best = (v, list(S), c)
    return None if best is None else (best[1], best[2])


def refine_kkt(samples, xhat, P, constraint=None, delta: float = 1e-3, rounds: int = 40):
    """Active-set refinement of an approximate solution to an exact KKT point.

    Starts from the support of :func:`select_weights` on the samples within
    ``delta`` of the maximum membership (topped up to the generic active-set
    size ``n(n+1)/2 + n - p`` with the most active remaining samples). Each
    round solves the KKT system on the current set. If a sample outside the set
    is uncovered, it is swapped in for the member whose removal leaves the
    smallest violation, or simply added. Visited sets are not revisited.

    Returns:
        ``(x, P, ok, info)``. With ``ok = False`` the inputs are returned
        unchanged and ``info`` names the failure (``"init"``, ``"exchange"`` or
        ``"rounds"``); with ``ok = True`` ``info`` is the number of exchanges.
    """
    r = np.atleast_2d(np.asarray(samples, dtype=float))
    x = np.asarray(xhat, dtype=float)
    P = np.asarray(P, dtype=float)
    s, n = r.shape
    p = 0 if constraint is None else int(np.atleast_1d(constraint.g(x)).size)
    generic = n * (n + 1) // 2 + n - p
    A = r - x
    m = _memberships(A, P)
    near = np.flatnonzero(m >= m.max() - delta)
    w = select_weights(A, P, _normals(constraint, x), near)
    S = [int(i) for i in np.flatnonzero(w > 1e-9)]
    zeta = list(n * w[S])
    for j in np.argsort(-m, kind="stable"):
        if len(S) >= generic:
            break
        if int(j) not in S:
            S.append(int(j))
            zeta.append(1e-3)
    cur = _try_set(r, S, x, np.asarray(zeta), constraint)
    if cur is None:
        cur = _try_set(r, S, x, np.ones(len(S)), constraint)
    if cur is None:
        found = _search_initial_set(r, x, m, generic, constraint)
        if found is None:
            return x, P, False, "init"
        S, cur = found
    seen = set()
    for rd in range(rounds):
        xn, zn, H, mm = cur
        outside = np.ones(s, bool)
        outside[S] = False
        if not outside.any() or mm[outside].max() <= 1.0 + 1e-12:
            Pn = np.linalg.inv(H)
            return xn, 0.5 * (Pn + Pn.T), True, str(rd)
        seen.add(tuple(sorted(S)))
        j = int(np.flatnonzero(outside)[np.argmax(mm[outside])])
        cands = [S[:k] + S[k + 1 :] + [j] for k in range(len(S))] + [S + [j]]
        best = None
        for S2 in cands:
            if tuple(sorted(S2)) in seen:
                continue
            z2 = np.array([zn[S.index(i)] if i in S else 1e-3 for i in S2])
            c2 = _try_set(r, S2, xn, z2, constraint)
            if c2 is None:
                continue
            o2 = np.ones(s, bool)
            o2[S2] = False
            v2 = float(c2[3][o2].max()) if o2.any() else 0.0
            if best is None or v2 < best[0]:
                best = (v2, S2, c2)
        if best is None:
            return x, P, False, "exchange"
        S, cur = best[1], best[2]
    return x, P, False, "rounds"


# ---------------------------------------------------------------------------
# driver


def _copy_update(opts, eig, r, x, lam, rho, eta, pool):
    def work(sl):
        if opts.z_update == "consistent":
            b = x - r[sl] + lam[sl] / rho
            return r[sl] + resolvent_step(eig, b, eta[sl])
        return qcqp_project_batch(eig, r[sl], x, lam[sl], rho)[0]

    if pool is None:
        return work(slice(None))
    s = r.shape[0]
    k = opts.threads
    bounds = [(i * s) // k for i in range(k + 1)]
    parts = pool.map(work, [slice(bounds[i], bounds[i + 1]) for i in range(k)])
    return np.vstack(list(parts))


def _clip_to(P, r, x):
    """Pull ``x`` into each ``E(r_i, P)`` along the segment towards ``r_i``."""
    d = x - r
    m = _memberships(d, P)
    scale = np.where(m > 1.0, 1.0 / np.sqrt(np.maximum(m, 1e-300)), 1.0)
    return r + d * scale[:, None]


def _feasible_start(constraint, d, hint=None):
    if constraint is None:
        return d
    if hint is None and getattr(constraint, "initializer", None) is not None:
        hint = constraint.initializer(d)
    return project_center(constraint, [d], [np.zeros_like(d)], 1.0, x_init=hint)


@numba.njit(cache=True, nogil=True)
def _consistent_sweep(r, x, lam, rho, eta, w, E):
    """Copy update ``z_i = r_i + (I + eta_i P^{-1})^{-1} b_i`` and the mean of ``z - lam / rho``."""
    s, n = r.shape
    z = np.empty((s, n))
    d = np.zeros(n)
    b = np.empty(n)
    bt = np.empty(n)
    for i in range(s):
        for a in range(n):
            b[a] = x[a] - r[i, a] + lam[i, a] / rho
        for j in range(n):
            acc = 0.0
            for a in range(n):
                acc += b[a] * E[a, j]
            bt[j] = acc * w[j] / (w[j] + eta[i])
        for a in range(n):
            acc = 0.0
            for j in range(n):
                acc += E[a, j] * bt[j]
            z[i, a] = r[i, a] + acc
            d[a] += z[i, a] - lam[i, a] / rho
    for a in range(n):
        d[a] /= s
    return z, d


@numba.njit(cache=True, nogil=True)
def _dual_step(z, x, lam, rho, L):
    """In-place ``lam += rho (x - z)``; returns ``sum_i ||L (x - z_i)||``."""
    s, n = z.shape
    cr = 0.0
    e = np.empty(n)
    for i in range(s):
        for a in range(n):
            e[a] = x[a] - z[i, a]
            lam[i, a] += rho * e[a]
        acc = 0.0
        for a in range(n):
            v = 0.0
            for b in range(n):
                v += L[a, b] * e[b]
            acc += v * v
        cr += np.sqrt(acc)
    return cr


@dataclass(frozen=True)
class AffineFrame:
    """Working coordinates ``y`` with ``x = L y + m``.

    The discretized problem is affine-equivariant: bounding ``L^{-1}(r_i - m)``
    and mapping the optimal ellipsoid back gives the optimal ellipsoid of the
    ``r_i``, and a constraint on ``x`` becomes a constraint of the same kind on
    ``y``. The ADMM is not equivariant (its penalty and projections are
    Euclidean), so solving in coordinates where the samples have identity
    covariance removes the conditioning of the sample cloud from the
    convergence rate.
    """

    L: np.ndarray
    m: np.ndarray
    Linv: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "AffineFrame":
        return cls(np.eye(n), np.zeros(n), np.eye(n))

    @classmethod
    def whitening(cls, r: np.ndarray) -> "AffineFrame":
        """Frame from the sample mean and the Cholesky factor of the sample covariance."""
        m = r.mean(axis=0)
        S = np.atleast_2d(np.cov(r.T, bias=True))
        try:
            L = np.linalg.cholesky(S)
            Linv = np.linalg.inv(L)
        except np.linalg.LinAlgError:
            scale = np.sqrt(max(_spread(r), 1e-300))
            L, Linv = scale * np.eye(r.shape[1]), np.eye(r.shape[1]) / scale
        if not (np.all(np.isfinite(Linv)) and np.min(np.abs(np.diag(L))) > 1e-12 * np.max(np.abs(np.diag(L)))):
            scale = np.sqrt(max(_spread(r), 1e-300))
            L, Linv = scale * np.eye(r.shape[1]), np.eye(r.shape[1]) / scale
        return cls(L, m, Linv)

    def to_local(self, x):
        return (np.asarray(x, dtype=float) - self.m) @ self.Linv.T

    def to_global(self, y):
        return np.asarray(y, dtype=float) @ self.L.T + self.m

    def state_to_local(self, st: AdmmState | None) -> AdmmState | None:
        if st is None:
            return None
        return AdmmState(
            xhat=self.to_local(st.xhat),
            z=None if st.z is None else self.to_local(st.z),
            # the dual pairs with x - z_i, so it maps with the transpose
            lam=None if st.lam is None else np.asarray(st.lam, dtype=float) @ self.L,
            mu=st.mu,
            P=None if st.P is None else self.Linv @ st.P @ self.Linv.T,
            iteration=st.iteration,
            rho=st.rho,
        )

    def state_to_global(self, st: AdmmState) -> AdmmState:
        return AdmmState(
            xhat=self.to_global(st.xhat),
            z=self.to_global(st.z),
            lam=np.ascontiguousarray(st.lam @ self.Linv),
            mu=st.mu,
            P=_sym(self.L @ st.P @ self.L.T),
            iteration=st.iteration,
            rho=st.rho,
        )


def _sym(P):
    return 0.5 * (P + P.T)


def _admm_loop(r, constraint, opts: AdmmOptions, x, warm, L, diag: AdmmDiagnostics):
    """Run the outer iterations in working coordinates from the feasible center ``x``.

    Returns the final state. Histories are recorded in the original units
    (through ``L``) while the stopping test uses working units.
    """
    s, n = r.shape
    sc = _spread(r)
    rho = opts.rho * n * n / (s * sc)
    tol = opts.eps_center * np.sqrt(sc)
    K = opts.fw_max_iter

    mu = None
    lam = np.zeros((s, n))
    z = None
    if warm is not None:
        if warm.mu is not None and len(warm.mu) == s:
            mu = np.asarray(warm.mu, dtype=float)
            if warm.lam is not None:
                lam = np.array(warm.lam, dtype=float, order="C")
            if warm.z is not None:
                z = np.asarray(warm.z, dtype=float).copy()
    guess = mvee_origin_fw(r - x, eps=opts.fw_eps, max_iter=K, mu0=mu)
    mu, ridge = guess.weights, guess.ridge
    diag.ridge = ridge
    if z is None:
        z = _clip_to(guess.shape, r, x)

    pool = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None
    # consistent updates run through fused compiled kernels; with threads the
    # rows are split into contiguous chunks (fork-join per iteration)
    fast = opts.z_update == "consistent"
    bounds = np.linspace(0, s, min(opts.threads, s) + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    linear = isinstance(constraint, LinearConstraint)
    projector = getattr(constraint, "projector", None)
    L = np.ascontiguousarray(L, dtype=float)
    cr_tol = tol / 10.0 * _min_gain(L)
    converged = False
    t = 0
    try:
        for t in range(1, opts.max_outer + 1):
            if fast:
                c0 = perf_counter()
                mu, P, gap, _ = fw_continue(r - x, mu, opts.fw_eps, K, ridge)
                w, E = np.linalg.eigh(P)
                c1 = perf_counter()
                eta = (2.0 * n / rho) * mu
                if pool is None:
                    z, d = _consistent_sweep(r, x, lam, rho, eta, w, E)
                else:
                    z, d = _parallel_sweep(pool, chunks, r, x, lam, rho, eta, w, E)
                c2 = perf_counter()
                if constraint is None:
                    xn = d
                elif linear:
                    xn = constraint.project(d)
                elif projector is not None:
                    xn = projector(d, x)
                else:
                    xn = project_center(constraint, z, lam, rho, x_init=x)
                c3 = perf_counter()
                if pool is None:
                    cr = _dual_step(z, xn, lam, rho, L)
                else:
                    cr = sum(pool.map(lambda c: _dual_step(z[c[0]:c[1]], xn, lam[c[0]:c[1]], rho, L), chunks))
            else:
                c0 = perf_counter()
                A = r - x if opts.z_update == "consistent" else r - z
                mu, P, gap, _ = fw_continue(A, mu, opts.fw_eps, K, ridge)
                eig = np.linalg.eigh(P)
                c1 = perf_counter()
                z = _copy_update(opts, eig, r, x, lam, rho, 2.0 * n * mu / rho, pool)
                c2 = perf_counter()
                xn = project_center(constraint, z, lam, rho, x_init=x)
                c3 = perf_counter()
                lam = lam + rho * (xn - z)
                cr = float(np.sum(np.linalg.norm((z - xn) @ L.T, axis=1)))
            c4 = perf_counter()
            bs = diag.block_seconds
            bs["shape"] += c1 - c0
            bs["copies"] += c2 - c1
            bs["center"] += c3 - c2
            bs["dual"] += c4 - c3
            dx = xn - x
            step = float(np.sqrt(dx @ dx))
            diag.consensus_residual.append(cr)
            diag.center_step.append(float(np.linalg.norm(L @ dx)))
            diag.mvee_gap.append(gap)
            x = xn
            # the consensus test uses working units: cr is in original units
            if t > 1 and step <= tol and cr / s <= cr_tol and gap <= opts.fw_eps * n:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    mu, P, _, _ = fw_continue(r - x, mu, opts.fw_eps, K, ridge)
    diag.iterations = t
    diag.converged = converged
    return AdmmState(xhat=x, z=z, lam=lam, mu=mu, P=P, iteration=t, rho=rho)


def _parallel_sweep(pool, chunks, r, x, lam, rho, eta, w, E):
    parts = list(pool.map(lambda c: _consistent_sweep(r[c[0]:c[1]], x, lam[c[0]:c[1]], rho, eta[c[0]:c[1]], w, E), chunks))
    z = np.concatenate([p[0] for p in parts])
    d = sum((b - a) * p[1] for (a, b), p in zip(chunks, parts)) / r.shape[0]
    return z, d


def _min_gain(L):
    return float(np.linalg.svd(L, compute_uv=False)[-1])


def _polish(constraint, x):
    """Re-project a center mapped back from working coordinates (removes round-off)."""
    if constraint is None:
        return x
    if isinstance(constraint, LinearConstraint):
        return constraint.project(x)
    try:
        return project_center(constraint, x[None, :], np.zeros((1, x.size)), 1.0, x_init=x)
    except NewtonDivergence:
        return x


def sip_solve(samples, constraint=None, opts: AdmmOptions | None = None, warm: AdmmState | None = None):
    """Minimum-volume ellipsoid covering ``samples`` with a constrained center.

    Args:
        samples: (s, n) sample points ``r_i``.
        constraint: ``None``, a :class:`LinearConstraint`, or any object with
            ``g``, ``grad_g`` (n x p) and optionally ``hess``/``initializer``.
        opts: solver settings.
        warm: state of a previous solve, already shifted to this problem. Its
            center seeds this solve. When the sample count matches, its copies,
            duals and weights are reused as well.

    Returns:
        ``(ellipsoid, diagnostics, state)``. ``diagnostics.converged`` is
        ``False`` when ``max_outer`` was reached; the result is still valid.
        The KKT residuals are affine-invariant; the residual histories are in
        the units of the samples.
    """
    opts = opts or AdmmOptions()
    r = np.ascontiguousarray(np.atleast_2d(np.asarray(samples, dtype=float)))
    s, n = r.shape
    frame = AffineFrame.whitening(r) if opts.precondition else AffineFrame.identity(n)
    rl = np.ascontiguousarray(frame.to_local(r))
    cl = pull_back(constraint, frame.L, frame.m, frame.Linv)
    diag = AdmmDiagnostics()

    # the starting center is projected in the original coordinates, where the
    # constraint's own initializer selects the branch
    if warm is not None:
        x0 = _feasible_start(constraint, np.asarray(warm.xhat, dtype=float), warm.xhat)
    else:
        x0 = _feasible_start(constraint, r.mean(axis=0))
    x0 = frame.to_local(x0)
    state = _admm_loop(rl, cl, opts, x0, frame.state_to_local(warm), frame.L, diag)
    if opts.kkt_check:
        diag.kkt_residual_admm = kkt_residual(state, rl, cl)
        diag.kkt_residual = diag.kkt_residual_admm
    if opts.refine:
        xr, Pr, ok, info = refine_kkt(rl, state.xhat, state.P, cl)
        diag.refined, diag.refine_info = ok, info
        if ok:
            state = AdmmState(xr, state.z, state.lam, state.mu, Pr, state.iteration, state.rho)
            if opts.kkt_check:
                diag.kkt_residual = kkt_residual(state, rl, cl)

    state = frame.state_to_global(state)
    x = _polish(constraint, state.xhat)
    P = state.P
    if opts.inflate_shape:
        mmax = float(_memberships(r - x, P).max())
        if mmax > 1.0:
            P = P * mmax
            diag.inflation_factor = mmax
    state.xhat, state.P = x, P
    diag.constraint_violation = _violation(constraint, x)
    return Ellipsoid(x, P), diag, state
