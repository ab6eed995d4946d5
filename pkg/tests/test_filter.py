import numpy as np
import pytest

from cadmm_smf.admm import AdmmOptions
from cadmm_smf.ellipsoid import Ellipsoid, ProjectionSelector, sample_ellipsoid
from cadmm_smf.filter import (
    FilterOptions,
    SystemModel,
    Variant,
    measurement_ellipsoid,
    options_for,
    predict,
    step,
    update,
)
from cadmm_smf.models import InvalidMeasurement, RangeBearingSensor, scenario_linear, simulate_truth
from cadmm_smf.rng import stream


@pytest.fixture(scope="module")
def linear():
    sc = scenario_linear()
    return sc, SystemModel.from_scenario(sc)


def _rngs(seed, variant="EC", k=0):
    return {p: stream(seed, variant, 0, k, p) for p in ("predict", "measure", "update")}


def test_identity_dynamics_keeps_center():
    model = SystemModel(
        f=lambda x, k=0: np.asarray(x),
        h=lambda x: x,
        h_inverse=lambda y: y,
        G=ProjectionSelector(2, (0, 1)),
        Q=1e-12 * np.eye(2),
        R=np.eye(2),
    )
    E = Ellipsoid(np.array([1.0, 2.0]), np.diag([4.0, 1.0]))
    # boundary samples spread around E make E itself the minimum-volume cover,
    # so a tightly solved prediction returns E's center
    opts = FilterOptions(variant="UNC", admm=AdmmOptions())
    pred, E_f, _, _ = predict(E, model, None, opts, np.random.default_rng(0))
    np.testing.assert_allclose(pred.center, E.center, atol=1e-6)
    assert E_f.logdet() == pytest.approx(E.logdet(), abs=1e-6)


def test_linear_predict_center_on_constraint(linear):
    sc, model = linear
    E = sc.initial_ellipsoid(stream(0, "init", 0))
    pred, E_f, _, _ = predict(E, model, sc.constraint, FilterOptions(variant="EC"), np.random.default_rng(1))
    assert np.max(np.abs(sc.constraint.C @ pred.center)) <= 1e-9
    np.testing.assert_array_equal(pred.center, E_f.center)


def test_linear_predict_monte_carlo_containment(linear):
    sc, model = linear
    E = Ellipsoid(np.array([0.0, 0.0, 25.0, 50.0]), np.diag([100.0, 100.0, 25.0, 25.0]))
    opts = FilterOptions(variant="UNC", samples_pred=400)
    pred, _, _, _ = predict(E, model, None, opts, np.random.default_rng(2))
    g = np.random.default_rng(3)
    x = sample_ellipsoid(E, "interior", 10_000, g)
    w = sample_ellipsoid(Ellipsoid(np.zeros(4), model.Q), "interior", 10_000, g)
    assert np.mean(pred.membership(model.f(x, 0) + w) <= 1.0) >= 0.999


def test_measurement_set_noiseless_limit():
    sensor = RangeBearingSensor(15000.0, 0.0)
    model = SystemModel(
        f=lambda x, k=0: x, h=sensor.h, h_inverse=sensor.h_inverse, G=ProjectionSelector(4, (0, 1)), Q=np.eye(4), R=1e-12 * np.eye(2)
    )
    y = sensor.h(np.array([100.0, 200.0]))
    E_h, _, _ = measurement_ellipsoid(y, model, FilterOptions(), np.random.default_rng(4))
    np.testing.assert_allclose(E_h.center, [100.0, 200.0], atol=1e-4)


def test_measurement_set_covers_inverse_samples(linear):
    sc, model = linear
    y = sc.sensor.h(np.array([300.0, 500.0]))
    opts = FilterOptions()
    E_h, _, _ = measurement_ellipsoid(y, model, opts, stream(5, "m"))
    v = sample_ellipsoid(Ellipsoid(np.zeros(2), model.R), "boundary", opts.samples_meas, stream(5, "m"))
    assert E_h.membership(model.h_inverse(y - v)).max() <= 1.0 + 1e-12


def test_measurement_nonpositive_range_rejected(linear):
    _, model = linear
    with pytest.raises(InvalidMeasurement):
        measurement_ellipsoid(np.array([-5000.0, 0.0]), model, FilterOptions(), np.random.default_rng(0))


def test_update_uninformative_measurement(linear):
    sc, model = linear
    E_pred = Ellipsoid(np.array([0.0, 0.0, 25.0, 50.0]), 100.0 * np.eye(4))
    E_meas = Ellipsoid(np.zeros(2), 1e6 * np.eye(2))
    upd, _, _, fb = update(E_pred, E_meas, model, sc.constraint, FilterOptions(samples_update=400), np.random.default_rng(6))
    assert not fb
    assert np.max(np.abs(sc.constraint.C @ upd.center)) <= 1e-9
    assert abs(np.exp(0.5 * (upd.logdet() - E_pred.logdet())) - 1.0) <= 0.10


def test_update_tight_measurement_bounds_position(linear):
    sc, model = linear
    E_pred = Ellipsoid(np.array([0.0, 0.0, 25.0, 50.0]), 100.0 * np.eye(4))
    E_meas = Ellipsoid(np.array([1.0, 2.0]), 0.25 * np.eye(2))
    upd, _, _, _ = update(E_pred, E_meas, model, None, FilterOptions(variant="UNC"), np.random.default_rng(7))
    # the intersection is close to a disk of radius 0.5 times a velocity ball;
    # the minimum-volume cover of a product of two 2-d balls stretches each
    # block by sqrt(2)
    semi = np.sqrt(np.linalg.eigvalsh(upd.shape[:2, :2]))
    assert semi.max() <= 0.5 * np.sqrt(2.0) * 1.1


def test_update_falls_back_on_disjoint_sets(linear):
    sc, model = linear
    E_pred = Ellipsoid(np.zeros(4), np.eye(4))
    E_meas = Ellipsoid(np.array([1e4, 1e4]), np.eye(2))
    opts = FilterOptions(variant="UNC", max_tries_per_sample=5)
    upd, _, _, fb = update(E_pred, E_meas, model, None, opts, np.random.default_rng(8))
    assert fb
    assert upd.membership(E_pred.center) <= 1.0


def test_step_golden_linear(linear):
    sc, model = linear
    E0 = sc.initial_ellipsoid(stream(0, "init", 0))
    truth, meas = simulate_truth(sc, 1, stream(0, "truth", 0))
    res = step(E0, meas[0], model, sc.constraint, options_for("EC"), _rngs(0))
    assert np.max(np.abs(sc.constraint.C @ res.updated.center)) <= 1e-9
    assert res.updated.contains(truth[0])
    assert not res.fallback_used
    assert set(res.diagnostics) == {"predict", "measure", "update"}


def test_step_variants_share_measurement_set(linear):
    sc, model = linear
    E0 = sc.initial_ellipsoid(stream(0, "init", 0))
    _, meas = simulate_truth(sc, 1, stream(0, "truth", 0))
    rng_meas = {"predict": stream(1, "p"), "measure": stream(1, "m"), "update": stream(1, "u")}
    ec = step(E0, meas[0], model, sc.constraint, options_for("EC"), dict(rng_meas))
    rng_meas = {"predict": stream(1, "p"), "measure": stream(1, "m"), "update": stream(1, "u")}
    mc = step(E0, meas[0], model, sc.constraint, options_for("MC"), dict(rng_meas))
    np.testing.assert_array_equal(ec.measurement_set.center, mc.measurement_set.center)
    np.testing.assert_array_equal(ec.measurement_set.shape, mc.measurement_set.shape)
    # the unconstrained predicted center of MC is off the line; EC's is on it
    assert np.max(np.abs(sc.constraint.C @ mc.predicted.center)) > 1e-6
    assert np.max(np.abs(sc.constraint.C @ ec.predicted.center)) <= 1e-9


def test_step_missing_measurement(linear):
    sc, model = linear
    E0 = sc.initial_ellipsoid(stream(0, "init", 0))
    res = step(E0, None, model, sc.constraint, options_for("EC"), np.random.default_rng(9))
    assert res.updated is res.predicted
    assert res.measurement_set is None


def test_options_round_trip_and_validation():
    o = FilterOptions.from_dict({"variant": "MC", "samples_pred": 50, "admm": {"rho": 10.0}})
    assert o.variant is Variant.MC and o.admm.rho == 10.0 and o.admm.max_outer == FilterOptions().admm.max_outer
    with pytest.raises(ValueError):
        FilterOptions.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        FilterOptions(samples_pred=2)
    with pytest.raises(ValueError):
        FilterOptions(tau_policy=-1.0)
    assert options_for("UNC", o).variant is Variant.UNC
