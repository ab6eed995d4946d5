"""Monte-Carlo experiment runner and metrics.

Each run simulates one true trajectory and filters it with every requested
variant. The truth and the initial estimate depend only on ``(seed, run)`` so
all variants track the same target. Filter sampling streams are keyed by
``(seed, variant, run, step, phase)``, so the metrics of one variant do not
change when other variants are added to or removed from a config.

The UNC variant is the same pipeline with no constraint anywhere. It is the
controlled ablation for the constrained variants, not a reproduction of any
other published filter.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .filter import FilterOptions, SystemModel, Variant, options_for, step
from .models import (
    FilterScenario,
    constraint_distance,
    constraint_violation,
    scenario_by_name,
    simulate_truth,
)
from .rng import stream

CSV_HEADER = ["variant", "k", "rmse", "logdet", "constraint_dist", "containment", "admm_iters", "inflation"]
PHASES = ("predict", "measure", "update")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Experiment description, loadable from a JSON file.

    Attributes:
        scenario: built-in scenario name (``"linear"``, ``"nonlinear"``) or a
            full scenario dictionary as produced by ``FilterScenario.to_dict``.
        variants: subset of ``EC``, ``MC``, ``UNC``.
        runs: number of Monte-Carlo runs.
        steps: filter steps per run.
        seed: master seed.
        filter: overrides for :class:`FilterOptions` (nested ``admm`` allowed).
        output_dir: where CSV files are written by the CLI.
        workers: process count for independent runs (1 runs in-process).
    """

    scenario: str | dict = "linear"
    variants: list = field(default_factory=lambda: ["EC", "MC", "UNC"])
    runs: int = 20
    steps: int = 50
    seed: int = 0
    filter: dict = field(default_factory=dict)
    output_dir: str = "out"
    workers: int = 1

    def __post_init__(self):
        if int(self.runs) < 1:
            raise ConfigError("runs must be at least 1")
        if int(self.steps) < 1:
            raise ConfigError("steps must be at least 1")
        if int(self.workers) < 1:
            raise ConfigError("workers must be at least 1")
        self.runs, self.steps, self.seed, self.workers = int(self.runs), int(self.steps), int(self.seed), int(self.workers)
        if not self.variants:
            raise ConfigError("at least one variant is required")
        try:
            self.variants = [Variant(v).value for v in self.variants]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants must be distinct")
        self.filter = dict(self.filter or {})
        # validate eagerly so errors surface before any work starts
        try:
            self.filter_options()
            self.build_scenario()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def build_scenario(self) -> FilterScenario:
        if isinstance(self.scenario, dict):
            return FilterScenario.from_dict(self.scenario)
        return scenario_by_name(str(self.scenario))

    def filter_options(self) -> FilterOptions:
        return FilterOptions.from_dict(self.filter)

    @property
    def scenario_name(self) -> str:
        return self.scenario["name"] if isinstance(self.scenario, dict) else str(self.scenario)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON config. Raises ``FileNotFoundError`` or :class:`ConfigError`."""
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


@dataclass
class RunRecord:
    """Per-step quantities of one filtered trajectory."""

    variant: str
    run: int
    error: np.ndarray  # (steps, n) estimate minus truth
    logdet: np.ndarray  # (steps,)
    distance: np.ndarray  # (steps, q) reported constraint distance
    violation: np.ndarray  # (steps,) ||g(center)||_inf
    contained: np.ndarray  # (steps,) bool
    iterations: np.ndarray  # (steps,) mean ADMM iterations over phases
    inflation: np.ndarray  # (steps,) largest inflation factor over phases
    fallbacks: int = 0
    centers: np.ndarray | None = None
    truth: np.ndarray | None = None
    failure: str | None = None


@dataclass
class MetricsTable:
    """Per-(variant, k) aggregates plus the per-run records behind them."""

    scenario: str
    steps: int
    variants: list
    records: dict = field(default_factory=dict)  # variant -> list[RunRecord]

    def _ok(self, variant):
        return [r for r in self.records.get(variant, []) if r.failure is None]

    def failures(self) -> list:
        return [(r.variant, r.run, r.failure) for v in self.variants for r in self.records.get(v, []) if r.failure]

    def rmse(self, variant) -> np.ndarray:
        """``RMSE_k = sqrt(mean over runs of ||xhat_k - x_k||^2)``."""
        recs = self._ok(variant)
        if not recs:
            return np.full(self.steps, np.nan)
        e = np.stack([r.error for r in recs])
        return np.sqrt(np.mean(np.sum(e**2, axis=2), axis=0))

    def rmse_components(self, variant) -> np.ndarray:
        """Per-component RMSE, shape (steps, n)."""
        recs = self._ok(variant)
        e = np.stack([r.error for r in recs])
        return np.sqrt(np.mean(e**2, axis=0))

    def _mean(self, variant, attr) -> np.ndarray:
        recs = self._ok(variant)
        if not recs:
            return np.full(self.steps, np.nan)
        return np.mean(np.stack([np.asarray(getattr(r, attr), dtype=float) for r in recs]), axis=0)

    def logdet(self, variant):
        return self._mean(variant, "logdet")

    def distance(self, variant) -> np.ndarray:
        """Mean reported constraint distance, shape (steps, q)."""
        return self._mean(variant, "distance")

    def containment(self, variant):
        return self._mean(variant, "contained")

    def iterations(self, variant):
        return self._mean(variant, "iterations")

    def inflation(self, variant):
        return self._mean(variant, "inflation")

    def violations(self, variant) -> np.ndarray:
        """``||g(xhat_k)||_inf`` for every run, shape (runs, steps)."""
        return np.stack([r.violation for r in self._ok(variant)])

    def rows(self):
        """CSV rows ordered by variant (config order) then k (1-based)."""
        for v in self.variants:
            if not self.records.get(v):
                continue
            cols = [
                self.rmse(v),
                self.logdet(v),
                np.max(self.distance(v), axis=1),
                self.containment(v),
                self.iterations(v),
                self.inflation(v),
            ]
            for k in range(self.steps):
                yield [v, k + 1] + [float(c[k]) for c in cols]

    def summary(self) -> dict:
        """Per-variant scalars: mean-over-k metrics and violation statistics."""
        out = {}
        for v in self.variants:
            recs = self._ok(v)
            if not recs:
                out[v] = {"runs": 0, "failed": len(self.records.get(v, []))}
                continue
            viol = self.violations(v)
            out[v] = {
                "runs": len(recs),
                "failed": len(self.records.get(v, [])) - len(recs),
                "mean_rmse": float(np.mean(self.rmse(v))),
                "mean_logdet": float(np.mean(self.logdet(v))),
                "max_violation": float(viol.max()),
                "violating_steps_per_run": float(np.mean(np.sum(viol > 1e-3, axis=1))),
                "containment": float(np.mean(self.containment(v))),
                "mean_admm_iters": float(np.mean(self.iterations(v))),
                "fallbacks": int(sum(r.fallbacks for r in recs)),
            }
        return out


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def run_trajectory(cfg: ExperimentConfig, variant: str, run: int) -> RunRecord:
    """Filter one seeded trajectory with one variant. Failures are recorded, not raised."""
    sc = cfg.build_scenario()
    model = SystemModel.from_scenario(sc)
    opts = options_for(variant, cfg.filter_options())
    states_true, meas = simulate_truth(sc, cfg.steps, stream(cfg.seed, "truth", run))
    E = sc.initial_ellipsoid(stream(cfg.seed, "init", run))
    n, T = sc.n, cfg.steps
    q = constraint_distance(sc.constraint, E.center).size
    rec = RunRecord(
        variant=variant,
        run=run,
        error=np.full((T, n), np.nan),
        logdet=np.full(T, np.nan),
        distance=np.full((T, q), np.nan),
        violation=np.full(T, np.nan),
        contained=np.zeros(T, dtype=bool),
        iterations=np.full(T, np.nan),
        inflation=np.full(T, np.nan),
        centers=np.full((T, n), np.nan),
        truth=states_true,
    )
    prev = None
    try:
        for k in range(T):
            rngs = {p: stream(cfg.seed, variant, run, k, p) for p in PHASES}
            res = step(E, meas[k], model, sc.constraint, opts, rngs, k=k, states=prev)
            E, prev = res.updated, res.states
            x = states_true[k]
            rec.centers[k] = E.center
            rec.error[k] = E.center - x
            rec.logdet[k] = E.logdet()
            rec.distance[k] = constraint_distance(sc.constraint, E.center)
            rec.violation[k] = constraint_violation(sc.constraint, E.center)
            rec.contained[k] = E.contains(x)
            diags = list(res.diagnostics.values())
            rec.iterations[k] = np.mean([d.iterations for d in diags])
            rec.inflation[k] = max(d.inflation_factor for d in diags)
            rec.fallbacks += int(res.fallback_used)
    except Exception as exc:  # a failed run is flagged and excluded from aggregates
        rec.failure = f"step {k + 1}: {type(exc).__name__}: {exc}"
    return rec


def _task(args):
    cfg_dict, variant, run = args
    return run_trajectory(ExperimentConfig.from_dict(cfg_dict), variant, run)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> MetricsTable:
    """Run every (variant, run) pair and aggregate in (variant, run, k) order."""
    workers = cfg.workers if workers is None else int(workers)
    tasks = [(v, r) for v in cfg.variants for r in range(cfg.runs)]
    if workers > 1:
        d = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_task, [(d, v, r) for v, r in tasks]))
    else:
        results = [run_trajectory(cfg, v, r) for v, r in tasks]
    table = MetricsTable(cfg.scenario_name, cfg.steps, list(cfg.variants))
    for (v, _), rec in zip(tasks, results):
        table.records.setdefault(v, []).append(rec)
    return table


def metrics_csv(table: MetricsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in table.rows():
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def emit_csv(table: MetricsTable, path) -> Path:
    """Write the metrics table with header ``CSV_HEADER``. Returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(table))
    return path


def _write_rows(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


GNUPLOT_TEMPLATE = """# gnuplot script for the emitted long-format data files
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 900,600
set output '{prefix}_rmse.png'
plot for [v in '{variants}'] '{prefix}_rmse.csv' using 2:(strcol(1) eq v ? $3 : 1/0) with lines title v
set output '{prefix}_logdet.png'
plot for [v in '{variants}'] '{prefix}_logdet.csv' using 2:(strcol(1) eq v ? $3 : 1/0) with lines title v
"""


def emit_plot_data(table: MetricsTable, directory) -> list:
    """Long-format data files mirroring the figure axes.

    Files (prefixed by the scenario name):
        ``_trajectory.csv``: truth and estimated centers of run 0 per variant.
        ``_rmse.csv``: RMSE over k, with per-component columns.
        ``_logdet.csv``: mean log-determinant over k.
        ``_constraint.csv``: mean constraint distance per component over k.
        ``_plot.gp``: optional gnuplot script text.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prefix = table.scenario
    written = []
    variants = [v for v in table.variants if table._ok(v)]
    n = None

    traj_rows = []
    for v in variants:
        rec = table._ok(v)[0]
        n = rec.truth.shape[1]
        for k in range(table.steps):
            traj_rows.append([v, rec.run, k + 1] + list(rec.truth[k]) + list(rec.centers[k]))
    n = n or 0
    p = d / f"{prefix}_trajectory.csv"
    _write_rows(
        p,
        ["variant", "run", "k"] + [f"true_{i}" for i in range(n)] + [f"est_{i}" for i in range(n)],
        traj_rows,
    )
    written.append(p)

    rows = []
    for v in variants:
        total, comp = table.rmse(v), table.rmse_components(v)
        for k in range(table.steps):
            rows.append([v, k + 1, total[k]] + list(comp[k]))
    p = d / f"{prefix}_rmse.csv"
    _write_rows(p, ["variant", "k", "rmse"] + [f"rmse_{i}" for i in range(n)], rows)
    written.append(p)

    rows = [[v, k + 1, ld] for v in variants for k, ld in enumerate(table.logdet(v))]
    p = d / f"{prefix}_logdet.csv"
    _write_rows(p, ["variant", "k", "logdet"], rows)
    written.append(p)

    rows = []
    for v in variants:
        dist = table.distance(v)
        for k in range(table.steps):
            for j, val in enumerate(dist[k]):
                rows.append([v, k + 1, j, val])
    p = d / f"{prefix}_constraint.csv"
    _write_rows(p, ["variant", "k", "component", "distance"], rows)
    written.append(p)

    p = d / f"{prefix}_plot.gp"
    p.write_text(GNUPLOT_TEMPLATE.format(prefix=prefix, variants=" ".join(variants)))
    written.append(p)
    return written


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
