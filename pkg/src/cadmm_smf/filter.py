"""Recursive constrained set-membership filter.

One step maps the state-bounding ellipsoid ``E_k`` to ``E_{k+1}`` in three
phases, each of which bounds a sampled set with :func:`cadmm_smf.admm.sip_solve`:

* predict: bound ``f(E_k)`` (center constrained in the EC variant), then add
  the process-noise ellipsoid with the tau-family Minkowski outer bound;
* measurement set: bound ``h^{-1}(y - v)`` over the noise boundary;
* update: bound the part of the predicted ellipsoid whose position block lies
  in the measurement set (center constrained in EC and MC).

The UNC variant runs the same pipeline with no constraint anywhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict, replace
from typing import Callable

import numpy as np

from .admm import AdmmDiagnostics, AdmmOptions, AdmmState, sip_solve
from .ellipsoid import (
    AcceptanceFailure,
    Ellipsoid,
    ProjectionSelector,
    minkowski_outer,
    sample_ellipsoid,
    sample_intersection,
    sample_mixed,
    trace_optimal_tau,
)
from .models import FilterScenario
from .rng import as_generator


class Variant(str, enum.Enum):
    EC = "EC"
    MC = "MC"
    UNC = "UNC"


def filter_admm_defaults() -> AdmmOptions:
    """Looser ADMM settings used inside the filter.

    Every phase re-bounds a freshly sampled set, so the sampling error dominates
    long before the optimization error does. These settings trade accuracy for
    roughly an order of magnitude in speed, and the KKT diagnostic is skipped. Containment of every sample is still
    exact through shape inflation, and constraints are met exactly by the
    center projection.
    """
    return AdmmOptions(eps_center=1e-4, max_outer=150, fw_eps=1e-3, fw_max_iter=30, refine=False, kkt_check=False)


@dataclass
class SystemModel:
    """Dynamics, sensor and noise bounds.

    ``f(x, k)`` maps states (rows) at step ``k`` to the next step; ``h`` maps
    states to measurements; ``h_inverse`` maps a noise-corrected measurement to
    the position block ``G x``.
    """

    f: Callable
    h: Callable
    h_inverse: Callable
    G: ProjectionSelector
    Q: np.ndarray
    R: np.ndarray

    @classmethod
    def from_scenario(cls, sc: FilterScenario) -> "SystemModel":
        sensor = sc.sensor
        G = sc.selector
        return cls(
            f=sc.motion,
            h=lambda x: sensor.h(G(np.atleast_2d(x))),
            h_inverse=sensor.h_inverse,
            G=G,
            Q=np.asarray(sc.Q, dtype=float),
            R=np.asarray(sc.R, dtype=float),
        )


@dataclass
class FilterOptions:
    variant: Variant = Variant.EC
    samples_pred: int = 200
    samples_meas: int = 100
    samples_update: int = 200
    admm: AdmmOptions = field(default_factory=filter_admm_defaults)
    tau_policy: str | float = "trace_optimal"
    boundary_fraction: float = 0.7
    max_tries_per_sample: int = 500
    fallback_inflation: float = 2.0
    fallback_retries: int = 3
    warm_start: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("samples_pred", "samples_meas", "samples_update"):
            if getattr(self, name) < 3:
                raise ValueError(f"{name} must be at least n + 1")
        if isinstance(self.admm, dict):
            self.admm = AdmmOptions.from_dict(self.admm)
        if self.tau_policy != "trace_optimal":
            if not float(self.tau_policy) > 0:
                raise ValueError("a fixed tau must be positive")
            self.tau_policy = float(self.tau_policy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown filter options: {sorted(unknown)}")
        if "admm" in d:
            base = filter_admm_defaults().to_dict()
            base.update(d["admm"] or {})
            d["admm"] = AdmmOptions.from_dict(base)
        return cls(**d)


@dataclass
class StepResult:
    predicted: Ellipsoid
    measurement_set: Ellipsoid | None
    updated: Ellipsoid
    diagnostics: dict = field(default_factory=dict)
    fallback_used: bool = False
    filtered: Ellipsoid | None = None
    states: dict = field(default_factory=dict)


def _phase_constraint(phase: str, variant: Variant, constraint):
    if variant is Variant.UNC:
        return None
    if phase == "predict" and variant is Variant.MC:
        return None
    return constraint


def _warm(states, phase, shift_to):
    if not states or phase not in states or shift_to is None:
        return None
    # only the center carries over: fresh samples do not correspond to the
    # previous step's samples, so weights, copies and duals start over
    return AdmmState(xhat=np.asarray(shift_to, dtype=float), z=None, lam=None, mu=None, P=states[phase].P)


def predict(E_k: Ellipsoid, model: SystemModel, constraint, opts: FilterOptions, rng, k: int = 0, warm=None):
    """Predicted ellipsoid ``E_{k+1|k}``.

    Returns:
        ``(predicted, filtered, diagnostics, state)`` where ``filtered`` bounds
        the noise-free image ``f(E_k)``.
    """
    rng = as_generator(rng)
    x = sample_mixed(E_k, opts.samples_pred, opts.boundary_fraction, rng)
    r = np.asarray(model.f(x, k), dtype=float)
    cons = _phase_constraint("predict", opts.variant, constraint)
    E_f, diag, state = sip_solve(r, cons, opts.admm, warm=warm)
    if opts.tau_policy == "trace_optimal":
        tau = trace_optimal_tau(E_f.shape, model.Q)
    else:
        tau = float(opts.tau_policy)
    return minkowski_outer(E_f, model.Q, tau), E_f, diag, state


def measurement_ellipsoid(y, model: SystemModel, opts: FilterOptions, rng, warm=None):
    """Bound on the position block consistent with measurement ``y``.

    Returns:
        ``(E_h, diagnostics, state)``. Always solved without a constraint.
    """
    rng = as_generator(rng)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("measurement must be finite")
    m = model.R.shape[0]
    v = sample_ellipsoid(Ellipsoid(np.zeros(m), model.R), "boundary", opts.samples_meas, rng)
    r = np.asarray(model.h_inverse(y - v), dtype=float)
    return sip_solve(r, None, opts.admm, warm=warm)


def update(E_pred: Ellipsoid, E_meas: Ellipsoid, model: SystemModel, constraint, opts: FilterOptions, rng, warm=None):
    """Updated ellipsoid from samples of ``{x in E_pred : G x in E_meas}``.

    When the intersection is too thin to sample, the measurement set is
    inflated by ``fallback_inflation`` up to ``fallback_retries`` times, and in
    the end the predicted ellipsoid alone is sampled.

    Returns:
        ``(updated, diagnostics, state, fallback_used)``.
    """
    rng = as_generator(rng)
    count = opts.samples_update
    tries = opts.max_tries_per_sample * count
    meas = E_meas
    samples = None
    fallback = False
    for attempt in range(opts.fallback_retries + 1):
        try:
            samples = sample_intersection(E_pred, meas, model.G, count, tries, rng)
            break
        except AcceptanceFailure:
            fallback = True
            meas = meas.scaled(opts.fallback_inflation)
    if samples is None:
        samples = sample_mixed(E_pred, count, opts.boundary_fraction, rng)
    cons = _phase_constraint("update", opts.variant, constraint)
    E, diag, state = sip_solve(samples, cons, opts.admm, warm=warm)
    return E, diag, state, fallback


def step(E_k: Ellipsoid, y, model: SystemModel, constraint, opts: FilterOptions, rngs, k: int = 0, states=None) -> StepResult:
    """One filter step.

    Args:
        E_k: current state-bounding ellipsoid.
        y: measurement at step ``k + 1`` or ``None`` when it is missing.
        rngs: mapping with generators (or seeds) for ``"predict"``,
            ``"measure"`` and ``"update"``, or one generator used for all three.
        k: step index passed to the dynamics.
        states: ADMM states of the previous step (from ``StepResult.states``)
            for warm starts.
    """
    if not isinstance(rngs, dict):
        g = as_generator(rngs)
        rngs = {"predict": g, "measure": g, "update": g}
    states = states if (states and opts.warm_start) else {}
    f_center = np.asarray(model.f(E_k.center[None, :], k), dtype=float)[0]
    pred, E_f, d_pred, s_pred = predict(
        E_k, model, constraint, opts, rngs["predict"], k, warm=_warm(states, "predict", f_center)
    )
    diagnostics = {"predict": d_pred}
    new_states = {"predict": s_pred}
    if y is None:
        return StepResult(pred, None, pred, diagnostics, False, E_f, new_states)
    E_h, d_meas, s_meas = measurement_ellipsoid(y, model, opts, rngs["measure"])
    diagnostics["measure"] = d_meas
    new_states["measure"] = s_meas
    upd, d_upd, s_upd, fb = update(
        pred, E_h, model, constraint, opts, rngs["update"], warm=_warm(states, "update", pred.center)
    )
    diagnostics["update"] = d_upd
    new_states["update"] = s_upd
    return StepResult(pred, E_h, upd, diagnostics, fb, E_f, new_states)


def options_for(variant, base: FilterOptions | None = None) -> FilterOptions:
    """Copy of ``base`` with the variant replaced."""
    base = base or FilterOptions()
    return replace(base, variant=Variant(variant))
