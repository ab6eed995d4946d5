import json
import time

import pytest

from cadmm_smf.admm import AdmmOptions
from cadmm_smf.cli import BENCH_HEADER, EXAMPLE1_HEADER, example1_rows, main

SMALL = {"scenario": "linear", "variants": ["EC", "MC"], "runs": 1, "steps": 2, "workers": 1}


def _config(tmp_path, d, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", _config(tmp_path, SMALL), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_text().splitlines()[0].startswith("variant,k,rmse")
    assert (out / "plot_data" / "linear_rmse.csv").is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"EC", "MC"}
    assert "wrote" in capsys.readouterr().out


def test_run_is_deterministic(tmp_path):
    cfg = _config(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--seed", "7", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_run_missing_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["{broken", json.dumps({**SMALL, "colour": 1}), json.dumps([1, 2])])
def test_run_bad_config(tmp_path, capsys, text):
    p = tmp_path / "c.json"
    p.write_text(text)
    assert main(["run", "--config", str(p)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_usage_errors():
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["run"]) == 2
    assert main(["bench", "--threads", "0"]) == 2


def test_example1_single_rep_deterministic(tmp_path):
    a = [row for row, _ in example1_rows([20], 1, 0, AdmmOptions())]
    b = [row for row, _ in example1_rows([20], 1, 0, AdmmOptions())]
    assert a == b and len(a) == 1 and len(a[0]) == len(EXAMPLE1_HEADER)
    assert a[0][3] == pytest.approx(a[0][4], abs=1e-6)


def test_example1_command(tmp_path):
    out = tmp_path / "ex"
    assert main(["example1", "--s", "20,50", "--reps", "2", "--out", str(out)]) == 0
    rows = (out / "example1.csv").read_text().splitlines()
    assert rows[0] == ",".join(EXAMPLE1_HEADER) and len(rows) == 5
    assert len((out / "example1_summary.csv").read_text().splitlines()) == 3
    # the residual history is written for the configured s only
    assert not (out / "example1_residuals.csv").exists()


def test_example1_rejects_unknown_key(tmp_path):
    assert main(["example1", "--config", _config(tmp_path, {"sizes": [3]})]) == 2


def test_bench_smoke(tmp_path):
    cfg = _config(tmp_path, {"n_list": [5], "s_list": [50], "iterations": 5})
    t0 = time.perf_counter()
    assert main(["bench", "--config", cfg, "--threads", "2", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 5.0
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == ",".join(BENCH_HEADER)
    assert [l.split(",")[2] for l in lines[1:]] == ["sequential", "parallel"]


def test_bench_rejects_few_repetitions(tmp_path):
    assert main(["bench", "--config", _config(tmp_path, {"repetitions": 2})]) == 2


def test_validate_filter(capsys):
    assert main(["validate", "--filter", "models"]) == 0
    out = capsys.readouterr().out
    assert "PASS models.sensor_round_trip" in out
    assert main(["validate", "--filter", "nothing"]) == 2
