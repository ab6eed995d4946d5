"""Command-line entry point.

Commands:
    run        Monte-Carlo filter experiment from a JSON config.
    example1   Sample-count sweep of the two-dimensional bounding problem.
    bench      Per-iteration timings of ``sip_solve``, sequential and threaded.
    validate   Oracle suite; ``--filter NAME`` restricts it to one module.

Exit codes: 0 success, 1 validation or acceptance failure, 2 usage or config
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .admm import BLOCKS, AdmmOptions, sip_solve
from .harness import ConfigError, ExperimentConfig, default_workers, emit_csv, emit_plot_data, run_experiment
from .models import example1_samples
from .projections import LinearConstraint
from .rng import stream

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{path}: the config must be a JSON object")
    return d


def _check_keys(d: dict, allowed, what: str):
    unknown = set(d) - set(allowed)
    if unknown:
        raise UsageError(f"unknown {what} config keys: {sorted(unknown)}")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    d = _load_json(args.config)
    try:
        cfg = ExperimentConfig.from_dict(d)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    if args.threads is not None:
        cfg.workers = max(1, int(args.threads))
    elif "workers" not in d:
        cfg.workers = default_workers()
    out = Path(cfg.output_dir)
    table = run_experiment(cfg)
    emit_csv(table, out / "metrics.csv")
    emit_plot_data(table, out / "plot_data")
    summary = table.summary()
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"scenario {cfg.scenario_name}: {cfg.runs} runs x {cfg.steps} steps, seed {cfg.seed}")
    print(f"{'variant':8s} {'runs':>5s} {'rmse':>10s} {'logdet':>9s} {'max|g|':>10s} {'contain':>8s} {'iters':>7s}")
    for v, s in summary.items():
        if not s.get("runs"):
            print(f"{v:8s} {0:5d}  (all runs failed)")
            continue
        print(
            f"{v:8s} {s['runs']:5d} {s['mean_rmse']:10.3f} {s['mean_logdet']:9.3f} "
            f"{s['max_violation']:10.2e} {s['containment']:8.3f} {s['mean_admm_iters']:7.1f}"
        )
    for v, r, msg in table.failures():
        print(f"run {r} of {v} failed: {msg}", file=sys.stderr)
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# example1

EXAMPLE1_DEFAULTS = {
    "s_list": [20, 50, 100, 200],
    "repetitions": 50,
    "center": [100.0, 100.0],
    "R": [400.0, 0.01],
    "admm": {},
    "history_s": 100,
}

EXAMPLE1_HEADER = [
    "s",
    "rep",
    "logdet",
    "center_x",
    "center_y",
    "consensus_first",
    "consensus_final",
    "step_first",
    "step_final",
    "iterations",
    "converged",
    "kkt_residual",
]


def example1_rows(s_list, repetitions, seed, admm: AdmmOptions, center=(100.0, 100.0), R=(400.0, 0.01)):
    """Solve the Example-1 problem for every (s, repetition); yields ``(row, diagnostics)``.

    The center is constrained to ``x_1 = x_2``. Samples for ``(s, rep)`` come
    from the stream ``(seed, "example1", s, rep)``.
    """
    cons = LinearConstraint(np.array([[1.0, -1.0]]), np.zeros(1))
    for s in s_list:
        for rep in range(repetitions):
            r = example1_samples(int(s), stream(seed, "example1", int(s), rep), center=center, R=R)
            E, diag, _ = sip_solve(r, cons, admm)
            cr, st = diag.consensus_residual, diag.center_step
            row = [
                int(s),
                rep,
                float(E.logdet()),
                float(E.center[0]),
                float(E.center[1]),
                float(cr[0]),
                float(cr[-1]),
                float(st[0]),
                float(st[-1]),
                int(diag.iterations),
                int(diag.converged),
                float(diag.kkt_residual),
            ]
            yield row, diag


def example1_summary(rows):
    """Per-s mean and across-seed standard deviation of logdet and center."""
    by_s = {}
    for row in rows:
        by_s.setdefault(row[0], []).append(row)
    out = []
    for s in sorted(by_s):
        a = np.array([[r[2], r[3], r[4]] for r in by_s[s]])
        ddof = 1 if len(a) > 1 else 0
        out.append(
            [s, len(a), a[:, 0].mean(), a[:, 0].std(ddof=ddof), a[:, 1].mean(), a[:, 2].mean(),
             float(np.max(np.abs(a[:, 1] - a[:, 2])))]
        )
    return out


def cmd_example1(args) -> int:
    d = _load_json(args.config)
    _check_keys(d, EXAMPLE1_DEFAULTS, "example1")
    cfg = {**EXAMPLE1_DEFAULTS, **d}
    if args.s is not None:
        cfg["s_list"] = [int(v) for v in args.s.split(",")]
    if args.reps is not None:
        cfg["repetitions"] = int(args.reps)
    try:
        admm = AdmmOptions.from_dict(cfg["admm"])
        s_list = [int(v) for v in cfg["s_list"]]
        if any(v < 3 for v in s_list) or int(cfg["repetitions"]) < 1:
            raise ValueError("s must be at least 3 and repetitions at least 1")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid example1 config: {exc}") from exc
    seed = int(args.seed or 0)
    out = Path(args.out or "out")
    rows, history = [], None
    for row, diag in example1_rows(s_list, int(cfg["repetitions"]), seed, admm, tuple(cfg["center"]), tuple(cfg["R"])):
        rows.append(row)
        if history is None and row[0] == int(cfg["history_s"]):
            history = diag
    _write(out / "example1.csv", _csv_text(EXAMPLE1_HEADER, rows))
    summary = example1_summary(rows)
    _write(
        out / "example1_summary.csv",
        _csv_text(["s", "repetitions", "mean_logdet", "std_logdet", "mean_center_x", "mean_center_y", "max_center_gap"], summary),
    )
    if history is not None:
        _write(out / "example1_residuals.csv", history.to_csv())
    print(f"{'s':>5s} {'mean logdet':>12s} {'std':>8s} {'center':>22s}")
    for s, _, m, sd, cx, cy, _gap in summary:
        print(f"{s:5d} {m:12.4f} {sd:8.4f}   ({cx:9.4f}, {cy:9.4f})")
    print(f"wrote {out / 'example1.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

BENCH_DEFAULTS = {"n_list": [5], "s_list": [400, 800, 1600], "repetitions": 5, "iterations": 30}
BENCH_HEADER = ["n", "s", "mode", "threads", "median_seconds_per_iteration"] + [
    f"median_{b}_seconds_per_iteration" for b in BLOCKS
]


def bench_rows(n_list, s_list, repetitions: int, iterations: int, threads: int, seed: int = 0):
    """Median per-iteration times after one warm-up solve, sequential and threaded.

    Every solve runs exactly ``iterations`` outer iterations (the tolerance is
    unreachable), so the times are per iteration of the same work.
    """
    rows = []
    modes = [("sequential", 1)] + ([("parallel", threads)] if threads > 1 else [])
    for n in n_list:
        for s in s_list:
            g = stream(seed, "bench", int(n), int(s))
            r = g.normal(size=(int(s), int(n))) * np.linspace(1.0, 3.0, int(n))
            for mode, th in modes:
                opts = AdmmOptions(
                    max_outer=iterations, eps_center=1e-300, refine=False, kkt_check=False, threads=th
                )
                sip_solve(r, None, opts)  # warm-up
                total, blocks = [], {b: [] for b in BLOCKS}
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    _, diag, _ = sip_solve(r, None, opts)
                    total.append((time.perf_counter() - t0) / diag.iterations)
                    for b in BLOCKS:
                        blocks[b].append(diag.block_seconds[b] / diag.iterations)
                rows.append(
                    [int(n), int(s), mode, th, float(np.median(total))]
                    + [float(np.median(blocks[b])) for b in BLOCKS]
                )
    return rows


def cmd_bench(args) -> int:
    d = _load_json(args.config)
    _check_keys(d, BENCH_DEFAULTS, "bench")
    cfg = {**BENCH_DEFAULTS, **d}
    try:
        reps = int(cfg["repetitions"])
        if reps < 5:
            raise ValueError("repetitions must be at least 5")
        n_list = [int(v) for v in cfg["n_list"]]
        s_list = [int(v) for v in cfg["s_list"]]
        if any(s < n + 1 for n in n_list for s in s_list):
            raise ValueError("every s must exceed n")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid bench config: {exc}") from exc
    threads = args.threads if args.threads is not None else max(2, os.cpu_count() or 1)
    rows = bench_rows(n_list, s_list, reps, int(cfg["iterations"]), int(threads), int(args.seed or 0))
    out = Path(args.out or "out")
    _write(out / "bench.csv", _csv_text(BENCH_HEADER, rows))
    print(f"host cores: {os.cpu_count()}")
    print(f"{'n':>3s} {'s':>6s} {'mode':>10s} {'threads':>7s} {'ms/iter':>9s}")
    for row in rows:
        print(f"{row[0]:3d} {row[1]:6d} {row[2]:>10s} {row[3]:7d} {1e3 * row[4]:9.4f}")
    print(f"wrote {out / 'bench.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    from .validation import CHECKS, run_checks

    if args.filter is not None and args.filter not in CHECKS:
        raise UsageError(f"unknown module {args.filter!r}; choose from {sorted(CHECKS)}")
    d = _load_json(args.config)
    _check_keys(d, {"scale"}, "validate")
    scale = float(d.get("scale", 1.0))
    results = run_checks(args.filter, seed=int(args.seed or 0), scale=scale)
    failed = 0
    for module, name, ok, detail in results:
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {module}.{name}: {detail}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadmm-smf", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="parallelism degree (default: all cores)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("run", help="Monte-Carlo filter experiment")
    common(p, config_required=True)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("example1", help="sample-count sweep of the 2-d bounding problem")
    common(p)
    p.add_argument("--s", default=None, help="comma-separated sample counts")
    p.add_argument("--reps", type=int, default=None, help="repetitions per sample count")
    p.set_defaults(func=cmd_example1)
    p = sub.add_parser("bench", help="per-iteration solver timings")
    common(p)
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("validate", help="oracle suite")
    common(p)
    p.add_argument("--filter", default=None, help="run only this module's checks")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
