import numpy as np
import pytest

from cadmm_smf.models import (
    ConstantVelocityModel,
    CoordinatedTurnModel,
    FilterScenario,
    InvalidMeasurement,
    NoisePolicy,
    QuadraticPair,
    RangeBearingSensor,
    clip_to_ellipsoid,
    constraint_distance,
    constraint_from_dict,
    constraint_violation,
    example1_samples,
    sinusoid_process_noise,
    scenario_by_name,
    scenario_linear,
    scenario_nonlinear,
    simulate_truth,
)
from cadmm_smf.projections import LinearConstraint
from cadmm_smf.rng import stream


def test_constant_velocity_stays_on_line():
    f = ConstantVelocityModel(1.0)
    x = np.array([0.0, 0.0, 25.0, 50.0])
    pos = []
    for k in range(3):
        pos.append(x[:2].copy())
        x = f(x, k)
    np.testing.assert_allclose(pos, [[0, 0], [25, 50], [50, 100]])
    C = scenario_linear().constraint
    assert np.max(np.abs(C.C @ x)) == 0.0


def test_constant_velocity_vectorized():
    f = ConstantVelocityModel(2.0)
    X = np.random.default_rng(0).normal(size=(7, 4))
    np.testing.assert_allclose(f(X), np.stack([f.matrix() @ x for x in X]))


def test_coordinated_turn_preserves_radius_and_speed():
    sc = scenario_nonlinear()
    x = sc.x0.copy()
    for k in range(200):
        x = sc.motion(x, k)
        assert abs(np.linalg.norm(x[:2]) - 10.0) <= 1e-9
        assert abs(np.linalg.norm(x[2:]) - 0.05) <= 1e-9


def test_coordinated_turn_default_rate_and_zero_limit():
    assert CoordinatedTurnModel().omega == 0.005
    np.testing.assert_allclose(CoordinatedTurnModel(1.0, 0.0).matrix(), ConstantVelocityModel(1.0).matrix())
    np.testing.assert_allclose(CoordinatedTurnModel(1.0, 1e-9).matrix(), ConstantVelocityModel(1.0).matrix(), atol=1e-8)


def test_sensor_round_trip():
    s = RangeBearingSensor(15000.0, 0.0)
    p = np.array([[100.0, 200.0], [-3000.0, -50.0], [15000.0, 10.0]])
    np.testing.assert_allclose(s.h_inverse(s.h(p)), p, atol=1e-9)


def test_sensor_bearing_four_quadrant():
    s = RangeBearingSensor(0.0, 0.0)
    np.testing.assert_allclose(s.h(np.array([-1.0, -1.0])), [np.sqrt(2), -3 * np.pi / 4])


def test_sensor_rejects_nonpositive_range():
    with pytest.raises(InvalidMeasurement):
        RangeBearingSensor(0.0, 0.0).h_inverse(np.array([0.0, 1.0]))


def test_sinusoid_process_noise_values():
    np.testing.assert_allclose(sinusoid_process_noise(0), 0.0)
    np.testing.assert_allclose(sinusoid_process_noise(2), [0.0, 0.0, 1.0, 2.0], atol=1e-15)
    np.testing.assert_allclose(sinusoid_process_noise(1), [1.0, 2.0, np.sqrt(0.5), np.sqrt(2.0)])


def test_sinusoid_process_noise_within_bound():
    Q = scenario_linear().Q
    for k in range(16):
        w = clip_to_ellipsoid(sinusoid_process_noise(k), Q)
        assert w @ np.linalg.solve(Q, w) <= 1.0 + 1e-12


def test_clip_to_ellipsoid_scales_outside_only():
    np.testing.assert_array_equal(clip_to_ellipsoid(np.array([0.5, 0.0]), np.eye(2)), [0.5, 0.0])
    np.testing.assert_allclose(clip_to_ellipsoid(np.array([3.0, 4.0]), np.eye(2)), [0.6, 0.8])


def test_quadratic_pair_residual_and_gradient():
    q = scenario_nonlinear().constraint
    x = np.array([6.0, 8.0, 0.03, 0.04])
    np.testing.assert_allclose(q.g(x), 0.0, atol=1e-14)
    y = np.array([1.0, 2.0, 3.0, 4.0])
    eps = 1e-6
    num = np.column_stack([(q.g(y + eps * e) - q.g(y - eps * e)) / (2 * eps) for e in np.eye(4)]).T
    np.testing.assert_allclose(q.grad_g(y), num, rtol=1e-7)


def test_quadratic_pair_circle_blocks():
    q = scenario_nonlinear().constraint
    idx, rad = q.circle_blocks()
    np.testing.assert_array_equal(idx, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(rad, [10.0, 0.05])
    other = QuadraticPair(np.eye(4), 1.0, np.diag([0.0, 0, 1, 1]), 1.0)
    assert other.circle_blocks() is None


def test_quadratic_pair_initializer_lands_on_torus():
    q = scenario_nonlinear().constraint
    x = q.initializer(np.array([3.0, -4.0, 0.0, 0.0]))
    assert q.distance(x) <= 1e-12
    np.testing.assert_allclose(x[:2], [6.0, -8.0])


def test_constraint_distance_shapes():
    lin, tor = scenario_linear().constraint, scenario_nonlinear().constraint
    assert constraint_distance(None, np.zeros(4)).shape == (1,)
    assert constraint_distance(lin, np.zeros(4)).shape == (1,)
    np.testing.assert_allclose(constraint_distance(tor, np.array([11.0, 0.0, 0.0, 0.05])), [1.0, 0.0])
    assert constraint_violation(None, np.ones(4)) == 0.0
    assert constraint_violation(lin, np.array([1.0, 0.0, 0.0, 0.0])) == pytest.approx(2.0)


@pytest.mark.parametrize("cons", [scenario_linear().constraint, scenario_nonlinear().constraint])
def test_constraint_dict_round_trip(cons):
    back = constraint_from_dict(cons.to_dict())
    assert type(back) is type(cons)
    x = np.array([1.0, -2.0, 0.5, 0.25])
    np.testing.assert_allclose(back.g(x), cons.g(x))
    assert constraint_from_dict(None) is None
    with pytest.raises(ValueError):
        constraint_from_dict({"type": "cubic"})


@pytest.mark.parametrize("name", ["linear", "nonlinear"])
def test_scenario_dict_round_trip(name):
    sc = scenario_by_name(name)
    back = FilterScenario.from_dict(sc.to_dict())
    assert back.to_dict() == sc.to_dict()
    with pytest.raises(ValueError):
        scenario_by_name("spiral")


def test_initial_estimate_projected_and_deterministic():
    for sc in (scenario_linear(), scenario_nonlinear()):
        a = sc.initial_estimate(stream(3, "init", 0))
        b = sc.initial_estimate(stream(3, "init", 0))
        np.testing.assert_array_equal(a, b)
        assert constraint_violation(sc.constraint, a) <= 1e-9


def test_simulate_truth_linear_follows_line_with_noise_bound():
    sc = scenario_linear()
    states, meas = simulate_truth(sc, 50, stream(0, "truth", 0))
    assert states.shape == (50, 4) and meas.shape == (50, 2)
    prev = sc.x0
    for k in range(50):
        w = states[k] - sc.motion(prev, k)
        assert w @ np.linalg.solve(sc.Q, w) <= 1.0 + 1e-12
        v = meas[k] - sc.sensor.h(states[k])
        assert v @ np.linalg.solve(sc.R, v) <= 1.0 + 1e-12
        prev = states[k]


def test_simulate_truth_uniform_policy_deterministic():
    sc = scenario_linear()
    sc.noise_policy = NoisePolicy.UNIFORM_IN_BOUND
    a = simulate_truth(sc, 5, stream(1, "truth", 0))
    b = simulate_truth(sc, 5, stream(1, "truth", 0))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_example1_samples_on_measurement_boundary():
    x = example1_samples(200, stream(0, "example1", 200, 0))
    s = RangeBearingSensor(0.0, 0.0)
    v = s.h(np.array([100.0, 100.0])) - s.h(x)
    m = v[:, 0] ** 2 / 400.0 + v[:, 1] ** 2 / 0.01
    np.testing.assert_allclose(m, 1.0, atol=1e-9)


def test_linear_constraint_is_the_line_pair():
    c = scenario_linear().constraint
    assert isinstance(c, LinearConstraint)
    np.testing.assert_array_equal(c.C, [[2, -1, 0, 0], [0, 0, 2, -1]])
