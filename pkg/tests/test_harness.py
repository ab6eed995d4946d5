import json

import numpy as np
import pytest

from cadmm_smf.harness import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    MetricsTable,
    RunRecord,
    emit_csv,
    emit_plot_data,
    metrics_csv,
    run_experiment,
    run_trajectory,
)


def _small(**kw):
    d = {"scenario": "linear", "variants": ["EC", "UNC"], "runs": 2, "steps": 3, "seed": 7}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def small_table():
    return run_experiment(_small())


def test_empty_table_header_only(tmp_path):
    t = MetricsTable("linear", 3, ["EC"])
    p = emit_csv(t, tmp_path / "m.csv")
    assert p.read_text() == ",".join(CSV_HEADER) + "\n"


def test_rows_ordered_by_variant_then_step(small_table):
    lines = metrics_csv(small_table).splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    keys = [tuple(l.split(",")[:2]) for l in lines[1:]]
    assert keys == [("EC", "1"), ("EC", "2"), ("EC", "3"), ("UNC", "1"), ("UNC", "2"), ("UNC", "3")]


def test_rerun_is_byte_identical(small_table):
    assert metrics_csv(run_experiment(_small())) == metrics_csv(small_table)


def test_variant_metrics_independent_of_variant_set(small_table):
    alone = run_experiment(_small(variants=["UNC"]))
    np.testing.assert_array_equal(alone.rmse("UNC"), small_table.rmse("UNC"))


def test_constrained_centers_on_constraint(small_table):
    assert small_table.violations("EC").max() <= 1e-9
    assert small_table.summary()["EC"]["failed"] == 0


def test_rmse_definition():
    rec = RunRecord(
        variant="EC",
        run=0,
        error=np.array([[3.0, 4.0]]),
        logdet=np.zeros(1),
        distance=np.zeros((1, 1)),
        violation=np.zeros(1),
        contained=np.ones(1, dtype=bool),
        iterations=np.ones(1),
        inflation=np.ones(1),
    )
    rec2 = RunRecord(**{**rec.__dict__, "run": 1, "error": np.array([[0.0, 0.0]])})
    t = MetricsTable("x", 1, ["EC"], {"EC": [rec, rec2]})
    np.testing.assert_allclose(t.rmse("EC"), [np.sqrt(12.5)])


def test_failed_run_is_flagged_and_excluded():
    good = RunRecord("EC", 0, np.ones((2, 2)), np.zeros(2), np.zeros((2, 1)), np.zeros(2), np.ones(2, bool), np.ones(2), np.ones(2))
    bad = RunRecord("EC", 1, np.full((2, 2), np.nan), np.zeros(2), np.zeros((2, 1)), np.zeros(2), np.ones(2, bool), np.ones(2), np.ones(2), failure="step 1: boom")
    t = MetricsTable("x", 2, ["EC"], {"EC": [good, bad]})
    assert t.failures() == [("EC", 1, "step 1: boom")]
    np.testing.assert_allclose(t.rmse("EC"), np.sqrt(2.0))
    assert t.summary()["EC"]["failed"] == 1


def test_run_trajectory_records_failure(monkeypatch):
    import cadmm_smf.harness as h

    def explode(*a, **k):
        raise FloatingPointError("bad step")

    monkeypatch.setattr(h, "step", explode)
    rec = run_trajectory(_small(), "EC", 0)
    assert rec.failure.startswith("step 1: FloatingPointError")


def test_plot_data_files(small_table, tmp_path):
    files = emit_plot_data(small_table, tmp_path)
    names = sorted(p.name for p in files)
    assert names == sorted(
        f"linear_{s}" for s in ("trajectory.csv", "rmse.csv", "logdet.csv", "constraint.csv", "plot.gp")
    )
    traj = (tmp_path / "linear_trajectory.csv").read_text().splitlines()
    assert traj[0].startswith("variant,run,k,true_0")
    assert len(traj) == 1 + 2 * 3


@pytest.mark.parametrize(
    "bad",
    [{"runs": 0}, {"steps": 0}, {"variants": ["XYZ"]}, {"variants": []}, {"variants": ["EC", "EC"]}, {"scenario": "spiral"}, {"filter": {"bogus": 1}}, {"colour": "red"}],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        _small(**bad)


def test_config_load_and_round_trip(tmp_path):
    cfg = _small(filter={"samples_pred": 50})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(p).to_dict() == cfg.to_dict()
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_scenario_dict_config():
    from cadmm_smf.models import scenario_nonlinear

    cfg = _small(scenario=scenario_nonlinear().to_dict())
    assert cfg.scenario_name == "nonlinear"
    assert cfg.build_scenario().to_dict() == scenario_nonlinear().to_dict()
