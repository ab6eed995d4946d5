"""Acceptance criteria, each run at its stated tolerance.

Every test reports one PASS/FAIL line (collected again in the terminal
summary) and then asserts the criterion. Criteria 1 and 3 share the same
20-run, 50-step experiments of both scenarios; criteria 2 and 7 share one
Example-1 sweep.
"""

import csv
import json
import os
import time

import numpy as np
import pytest

from cadmm_smf.cli import bench_rows, main
from cadmm_smf.harness import ExperimentConfig, run_experiment
from cadmm_smf.validation import (
    inflation_containment,
    kkt_residual_sensitivity,
    linear_kkt_oracle,
    minkowski_containment,
    qcqp_grid_oracle,
    spg_dual_oracle,
    torus_pg_oracle,
    trace_tau_beats_grid,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def experiments():
    t0 = time.perf_counter()
    tables = {}
    for scenario in ("linear", "nonlinear"):
        cfg = ExperimentConfig(scenario=scenario, variants=["EC", "MC", "UNC"], runs=20, steps=50, seed=0)
        tables[scenario] = run_experiment(cfg, workers=1)
    return tables, time.perf_counter() - t0


@pytest.fixture(scope="module")
def example1_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("example1")
    t0 = time.perf_counter()
    code = main(["example1", "--seed", "0", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    with open(out / "example1.csv") as fh:
        rows = list(csv.DictReader(fh))
    with open(out / "example1_summary.csv") as fh:
        summary = {int(r["s"]): r for r in csv.DictReader(fh)}
    return code, rows, summary, elapsed


def test_criterion_1_constraint_satisfaction(experiments, acceptance_report):
    tables, elapsed = experiments
    parts, ok = [], elapsed <= 600.0
    for scenario, t in tables.items():
        failed = len(t.failures())
        ec, mc = t.violations("EC").max(), t.violations("MC").max()
        unc = float(np.mean(np.sum(t.violations("UNC") > 1e-3, axis=1)))
        ok &= failed == 0 and ec <= 1e-6 and mc <= 1e-6 and unc >= 1.0
        parts.append(f"{scenario}: max|g| EC {ec:.1e} MC {mc:.1e}, UNC {unc:.1f} violating steps/run, {failed} failed runs")
    detail = "; ".join(parts) + f"; {elapsed:.0f} s"
    assert acceptance_report(1, ok, detail), detail


def test_criterion_2_example1_convergence_in_s(example1_sweep, acceptance_report):
    code, rows, summary, elapsed = example1_sweep
    change = abs(float(summary[200]["mean_logdet"]) - float(summary[100]["mean_logdet"]))
    std100 = float(summary[100]["std_logdet"])
    at100 = [r for r in rows if r["s"] == "100"]
    decay = max(
        max(float(r["consensus_final"]) / float(r["consensus_first"]), float(r["step_final"]) / float(r["step_first"]))
        for r in at100
    )
    ok = code == 0 and change < std100 and decay <= 1e-2 and elapsed <= 120.0
    detail = (
        f"|mean logdet(200) - mean logdet(100)| {change:.5f} vs std(100) {std100:.5f}; "
        f"worst final/first residual ratio at s=100 {decay:.1e}; {elapsed:.0f} s"
    )
    assert acceptance_report(2, ok, detail), detail


def test_criterion_3_variant_ordering(experiments, acceptance_report):
    tables, _ = experiments
    parts, ok = [], True
    for scenario, t in tables.items():
        rm = {v: float(np.mean(t.rmse(v))) for v in ("EC", "MC", "UNC")}
        ld = {v: float(np.mean(t.logdet(v))) for v in ("EC", "MC", "UNC")}
        for v in ("EC", "MC"):
            ok &= rm[v] <= rm["UNC"] and ld[v] <= ld["UNC"]
        parts.append(
            f"{scenario}: RMSE " + " ".join(f"{v} {rm[v]:.2f}" for v in rm)
            + ", logdet " + " ".join(f"{v} {ld[v]:.3f}" for v in ld)
        )
    detail = "; ".join(parts)
    assert acceptance_report(3, ok, detail), detail


def test_criterion_4_subsolver_oracles(acceptance_report):
    t0 = time.perf_counter()
    results = {
        "mvee": spg_dual_oracle(seed=0),
        "qcqp": qcqp_grid_oracle(seed=0),
        "linear": linear_kkt_oracle(seed=0),
        "torus": torus_pg_oracle(seed=0),
    }
    elapsed = time.perf_counter() - t0
    ok = all(r[0] for r in results.values()) and elapsed <= 300.0
    detail = "; ".join(f"{k}: {d}" for k, (_, d) in results.items()) + f"; {elapsed:.0f} s"
    assert acceptance_report(4, ok, detail), detail


def test_criterion_5_analytic_identities(acceptance_report):
    results = {
        "tau": trace_tau_beats_grid(seed=0),
        "minkowski": minkowski_containment(seed=0),
        "inflation": inflation_containment(seed=0),
    }
    ok = all(r[0] for r in results.values())
    detail = "; ".join(f"{k}: {d}" for k, (_, d) in results.items())
    assert acceptance_report(5, ok, detail), detail


def test_criterion_6_scaling(acceptance_report):
    rows = bench_rows([5], [400, 800, 1600], repetitions=5, iterations=30, threads=2, seed=0)
    seq = {r[1]: r[4] for r in rows if r[2] == "sequential"}
    par = {r[1]: r[4] for r in rows if r[2] == "parallel"}
    ratios = [seq[800] / seq[400], seq[1600] / seq[800]]
    ok = max(ratios) <= 2.5 and par[1600] <= seq[1600]
    detail = (
        f"per-doubling ratios {ratios[0]:.2f}, {ratios[1]:.2f}; s=1600 sequential {1e3 * seq[1600]:.3f} ms/iter, "
        f"2 threads {1e3 * par[1600]:.3f} ms/iter on {os.cpu_count()} core(s)"
    )
    assert acceptance_report(6, ok, detail), detail


def test_criterion_7_kkt_diagnostic(example1_sweep, acceptance_report):
    _, rows, _, _ = example1_sweep
    conv = [r for r in rows if r["converged"] == "1"]
    worst = max(float(r["kkt_residual"]) for r in conv)
    small = sum(float(r["kkt_residual"]) <= 1e-4 for r in conv)
    sens_ok, sens = kkt_residual_sensitivity(seed=0, scale=5.0)
    ok = small == len(conv) and sens_ok
    detail = f"{small}/{len(conv)} converged solves (of {len(rows)}) with residual <= 1e-4, max {worst:.1e}; perturbation: {sens}"
    assert acceptance_report(7, ok, detail), detail


def test_criterion_8_determinism(tmp_path, acceptance_report):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "nonlinear", "variants": ["EC", "MC", "UNC"], "runs": 2, "steps": 5, "workers": 1}))
    outs = []
    for name, extra in (("a", []), ("b", []), ("c", ["--threads", "2"])):
        assert main(["run", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path / name)] + extra) == 0
        outs.append(tmp_path / name)
    for name in ("x", "y"):
        assert main(["example1", "--s", "20,50", "--reps", "2", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    files = ["metrics.csv", "plot_data/nonlinear_rmse.csv", "plot_data/nonlinear_trajectory.csv"]
    same_run = all((outs[0] / f).read_bytes() == (o / f).read_bytes() for o in outs[1:] for f in files)
    same_ex1 = all(
        (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()
        for f in ("example1.csv", "example1_summary.csv")
    )
    ok = same_run and same_ex1
    detail = f"run CSVs identical across repeats and worker counts: {same_run}; example1 CSVs identical: {same_ex1}"
    assert acceptance_report(8, ok, detail), detail
