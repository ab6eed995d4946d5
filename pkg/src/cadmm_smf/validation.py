"""Named oracle checks grouped by module, used by ``cadmm-smf validate``.

Every check compares a production routine with an independent route (see
:mod:`cadmm_smf.oracles`) or with an analytic identity, and returns
``(passed, detail)``. ``scale`` shrinks the instance counts for quick runs;
the default of 1 runs the full suites.
"""

from __future__ import annotations

import numpy as np

from . import oracles
from .admm import AdmmOptions, AdmmState, kkt_residual, sip_solve
from .ellipsoid import Ellipsoid, minkowski_outer, sample_ellipsoid, trace_optimal_tau
from .models import RangeBearingSensor, example1_samples, scenario_nonlinear
from .mvee import mvee_origin_fw
from .projections import LinearConstraint, QcqpInput, center_update_linear, center_update_smooth, qcqp_project
from .rng import stream

CHECKS: dict = {}


def check(module: str):
    def register(fn):
        CHECKS.setdefault(module, []).append((fn.__name__, fn))
        return fn

    return register


def _count(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def _random_spd(g, n, lo=0.1, hi=10.0):
    Q, _ = np.linalg.qr(g.normal(size=(n, n)))
    return (Q * g.uniform(lo, hi, size=n)) @ Q.T


# ---------------------------------------------------------------------------
# ellipsoid


@check("ellipsoid")
def trace_tau_beats_grid(seed=0, scale=1.0):
    """The closed-form tau is no worse than any of 100 grid values."""
    worst = -np.inf
    for i in range(_count(100, scale)):
        g = stream(seed, "validate", "tau", i)
        n = int(g.integers(2, 6))
        Pf, Q = _random_spd(g, n), _random_spd(g, n)

        def tr(t):
            return np.trace((1 + 1 / t) * Pf + (1 + t) * Q)

        best = tr(trace_optimal_tau(Pf, Q))
        grid = min(tr(t) for t in np.logspace(-3, 3, 100))
        worst = max(worst, (best - grid) / grid)
    return worst <= 1e-12, f"max relative excess over grid {worst:.2e}"


@check("ellipsoid")
def minkowski_containment(seed=0, scale=1.0):
    """Sums of points of both summands lie in the outer ellipsoid."""
    worst = 0.0
    for i in range(_count(20, scale)):
        g = stream(seed, "validate", "minkowski", i)
        n = int(g.integers(2, 6))
        Ef = Ellipsoid(g.normal(size=n), _random_spd(g, n))
        Eq = Ellipsoid(np.zeros(n), _random_spd(g, n))
        tau = float(np.exp(g.uniform(-2, 2)))
        out = minkowski_outer(Ef, Eq.shape, tau)
        a = sample_ellipsoid(Ef, "boundary", 10_000, g)
        b = sample_ellipsoid(Eq, "boundary", 10_000, g)
        worst = max(worst, float(out.membership(a + b).max()))
    return worst <= 1.0 + 1e-12, f"max membership {worst:.15f}"


# ---------------------------------------------------------------------------
# mvee


@check("mvee")
def spg_dual_oracle(seed=0, scale=1.0):
    """Frank-Wolfe matches spectral projected gradient on the same dual."""
    dl = dg = 0.0
    for i in range(_count(100, scale)):
        g = stream(seed, "validate", "mvee", i)
        n = int(g.integers(2, 6))
        s = int(g.integers(n + 1, 201))
        A = g.normal(size=(s, n)) * g.uniform(0.2, 5.0, size=n)
        res = mvee_origin_fw(A, eps=1e-8)
        ref = oracles.mvee_logdet_oracle(A, tol=1e-10)
        dl = max(dl, abs(float(np.linalg.slogdet(res.shape)[1]) - ref))
        dg = max(dg, res.duality_gap / n)
    return dl <= 1e-6 and dg <= 1e-6, f"max logdet difference {dl:.2e}, max gap/n {dg:.2e}"


# ---------------------------------------------------------------------------
# projections


@check("projections")
def qcqp_grid_oracle(seed=0, scale=1.0):
    """The secular-equation projection matches a dense boundary search."""
    worst = 0.0
    for i in range(_count(100, scale)):
        g = stream(seed, "validate", "qcqp", i)
        P = _random_spd(g, 2, 0.05, 20.0)
        r = g.normal(size=2)
        xhat = r + g.normal(size=2) * 5.0
        lam = g.normal(size=2)
        rho = float(np.exp(g.uniform(-1, 2)))
        z = qcqp_project(QcqpInput(P, r, xhat, lam, rho))
        target = xhat + lam / rho
        _, obj = oracles.qcqp_grid_oracle(P, r, target)
        worst = max(worst, abs(float(np.sum((z - target) ** 2)) - obj))
    return worst <= 1e-4, f"max objective difference {worst:.2e}"


@check("projections")
def linear_kkt_oracle(seed=0, scale=1.0):
    """The cached affine projector matches the full KKT system."""
    worst = 0.0
    for i in range(_count(100, scale)):
        g = stream(seed, "validate", "linear", i)
        n = int(g.integers(2, 7))
        p = int(g.integers(1, n))
        s = int(g.integers(2, 50))
        C = g.normal(size=(p, n))
        c = g.normal(size=p)
        z, lam = g.normal(size=(s, n)) * 10, g.normal(size=(s, n))
        rho = float(np.exp(g.uniform(-2, 2)))
        x = center_update_linear(LinearConstraint(C, c), z, lam, rho)
        ref = oracles.linear_kkt_oracle(C, c, z, lam, rho)
        worst = max(worst, float(np.max(np.abs(x - ref))))
    return worst <= 1e-8, f"max abs difference {worst:.2e}"


@check("projections")
def torus_pg_oracle(seed=0, scale=1.0):
    """Newton on the Lagrangian system matches projected gradient on the torus pair."""
    cons = scenario_nonlinear().constraint
    worst = 0.0
    for i in range(_count(50, scale)):
        g = stream(seed, "validate", "torus", i)
        z = g.normal(size=(20, 4)) * np.array([8.0, 8.0, 0.05, 0.05])
        lam = g.normal(size=(20, 4)) * 0.01
        rho = float(np.exp(g.uniform(-1, 1)))
        x = center_update_smooth(cons, z, lam, rho)
        d = np.mean(z - lam / rho, axis=0)
        ref = oracles.torus_projection_pg(d, cons.c1, cons.c2)
        worst = max(worst, float(np.max(np.abs(x - ref))))
    return worst <= 1e-5, f"max abs difference {worst:.2e}"


# ---------------------------------------------------------------------------
# admm


def _example1_solve(seed, rep, s=100):
    cons = LinearConstraint(np.array([[1.0, -1.0]]), np.zeros(1))
    r = example1_samples(s, stream(seed, "example1", s, rep))
    return r, cons, sip_solve(r, cons, AdmmOptions())


@check("admm")
def kkt_residual_sensitivity(seed=0, scale=1.0):
    """Converged solves are near-KKT; moving the center by 0.1 raises the residual 10x."""
    n_conv = n_small = n_sens = 0
    reps = _count(10, scale)
    for rep in range(reps):
        r, cons, (E, diag, st) = _example1_solve(seed, rep)
        if not diag.converged:
            continue
        n_conv += 1
        base = diag.kkt_residual
        n_small += base <= 1e-4
        moved = AdmmState(st.xhat + 0.1 * np.array([1.0, 1.0]) / np.sqrt(2.0), st.z, st.lam, st.mu, st.P)
        n_sens += kkt_residual(moved, r, cons) >= 10.0 * max(base, 1e-300)
    ok = n_conv > 0 and n_small == n_conv and n_sens == n_conv
    return ok, f"{n_conv}/{reps} converged, {n_small} with residual <= 1e-4, {n_sens} sensitive"


@check("admm")
def inflation_containment(seed=0, scale=1.0):
    """After inflation every sample lies in the returned ellipsoid."""
    worst = 0.0
    for rep in range(_count(10, scale)):
        g = stream(seed, "validate", "inflate", rep)
        r = g.normal(size=(60, 3)) * np.array([1.0, 4.0, 0.5])
        cons = LinearConstraint(np.array([[1.0, 1.0, 1.0]]), np.zeros(1))
        E, _, _ = sip_solve(r, cons, AdmmOptions(max_outer=50, refine=False, kkt_check=False))
        worst = max(worst, float(E.membership(r).max()))
    return worst <= 1.0 + 1e-12, f"max membership {worst:.15f}"


@check("admm")
def residual_decay(seed=0, scale=1.0):
    """Consensus residual and center step shrink 100x on the two-dimensional example."""
    worst = 0.0
    for rep in range(_count(5, scale)):
        _, _, (_, diag, _) = _example1_solve(seed, rep)
        cr, st = diag.consensus_residual, diag.center_step
        worst = max(worst, cr[-1] / cr[0], st[-1] / st[0])
    return worst <= 1e-2, f"max final/first ratio {worst:.2e}"


# ---------------------------------------------------------------------------
# filter


@check("filter")
def constrained_estimates(seed=0, scale=1.0):
    """Short EC runs keep every estimate on the torus constraint."""
    from .harness import ExperimentConfig, run_experiment

    cfg = ExperimentConfig(scenario="nonlinear", variants=["EC"], runs=1, steps=_count(10, scale), seed=seed)
    table = run_experiment(cfg, workers=1)
    worst = table.summary()["EC"]["max_violation"]
    return worst <= 1e-6, f"max constraint violation {worst:.2e}"


# ---------------------------------------------------------------------------
# models


@check("models")
def sensor_round_trip(seed=0, scale=1.0):
    """The range-bearing inverse undoes the measurement map."""
    sensor = RangeBearingSensor(-200.0, 50.0)
    g = stream(seed, "validate", "sensor")
    p = g.normal(size=(_count(1000, scale), 2)) * 500.0
    back = sensor.h_inverse(sensor.h(p))
    err = float(np.max(np.abs(back - p)))
    return err <= 1e-8, f"max round-trip error {err:.2e}"


@check("models")
def turn_motion_on_torus(seed=0, scale=1.0):
    """Noise-free coordinated-turn motion keeps an orbit state on the torus."""
    sc = scenario_nonlinear()
    c1, c2 = sc.constraint.c1, sc.constraint.c2
    g = stream(seed, "validate", "turn")
    worst = 0.0
    for _ in range(_count(20, scale)):
        phi = g.uniform(0.0, 2.0 * np.pi)
        x = np.array([c1 * np.cos(phi), c1 * np.sin(phi), -c2 * np.sin(phi), c2 * np.cos(phi)])
        for k in range(50):
            x = sc.motion(x, k)
            worst = max(worst, float(np.max(sc.constraint.block_distance(x))))
    return worst <= 1e-9, f"max block distance {worst:.2e}"


# ---------------------------------------------------------------------------
# harness


@check("harness")
def csv_determinism(seed=0, scale=1.0):
    """Two identical runs give byte-identical CSV."""
    from .harness import ExperimentConfig, metrics_csv, run_experiment

    cfg = ExperimentConfig(scenario="linear", variants=["EC", "UNC"], runs=1, steps=_count(3, scale), seed=seed)
    a = metrics_csv(run_experiment(cfg, workers=1))
    b = metrics_csv(run_experiment(cfg, workers=1))
    return a == b, f"{len(a)} bytes, identical={a == b}"


def run_checks(module=None, seed: int = 0, scale: float = 1.0):
    """Run the checks of ``module`` (all when ``None``); returns ``(module, name, ok, detail)`` rows."""
    out = []
    for mod in sorted(CHECKS) if module is None else [module]:
        for name, fn in CHECKS[mod]:
            try:
                ok, detail = fn(seed=seed, scale=scale)
            except Exception as exc:  # a crash is a failed check, not a CLI error
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            out.append((mod, name, bool(ok), detail))
    return out
