import numpy as np
import pytest

from cadmm_smf.mvee import (
    DegenerateSpan,
    dual_objective,
    fw_continue,
    fw_direction,
    fw_optimal_step,
    mvee_origin_fw,
)
from cadmm_smf.oracles import mvee_dual_spg

CROSS = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])

# log det of the MVEE shape for the seeded 50-point instance below, from the
# spectral projected-gradient dual solver (oracles.mvee_dual_spg, tol 1e-12)
SPG_LOGDET_50x3 = 5.7894772804591375


def _instance_50x3():
    g = np.random.default_rng(20240501)
    return g.normal(size=(50, 3)) * np.array([1.0, 2.0, 0.5])


def test_symmetric_cross():
    res = mvee_origin_fw(CROSS, eps=1e-12)
    np.testing.assert_allclose(res.weights, 0.25, atol=1e-12)
    np.testing.assert_allclose(res.shape, np.eye(2), atol=1e-12)
    assert abs(res.duality_gap) <= 1e-12


def test_axis_aligned_cross():
    res = mvee_origin_fw(CROSS * np.array([2.0, 1.0]), eps=1e-12)
    np.testing.assert_allclose(res.shape, np.diag([4.0, 1.0]), atol=1e-10)


def test_random_instance_matches_frozen_dual_oracle():
    A = _instance_50x3()
    res = mvee_origin_fw(A, eps=1e-9)
    assert res.duality_gap <= 1e-6 * 3
    assert np.linalg.slogdet(res.shape)[1] == pytest.approx(SPG_LOGDET_50x3, abs=1e-6)


def test_random_instance_matches_live_dual_oracle():
    A = np.random.default_rng(3).normal(size=(120, 4)) * np.array([3.0, 1.0, 0.2, 1.5])
    res = mvee_origin_fw(A, eps=1e-9)
    _, P, _ = mvee_dual_spg(A, tol=1e-11)
    assert np.linalg.slogdet(res.shape)[1] == pytest.approx(np.linalg.slogdet(P)[1], abs=1e-6)


def test_samples_covered_within_gap():
    A = _instance_50x3()
    res = mvee_origin_fw(A, eps=1e-6)
    m = np.einsum("ij,ji->i", A, np.linalg.solve(res.shape, A.T))
    assert m.max() <= 1.0 + 1e-6 + 1e-12


def test_toward_only_reaches_tolerance_slowly():
    A = _instance_50x3()
    fast = mvee_origin_fw(A, eps=1e-4)
    slow = mvee_origin_fw(A, eps=1e-4, away=False)
    assert slow.duality_gap <= 3e-4 and fast.duality_gap <= 3e-4
    assert fast.iterations < slow.iterations


def test_traces_recorded_and_dual_monotone():
    res = mvee_origin_fw(_instance_50x3(), eps=1e-8, record=True)
    assert res.objective_trace.size == res.iterations + 1
    assert np.all(np.diff(res.objective_trace) >= -1e-9)
    assert res.objective_trace[-1] == pytest.approx(dual_objective(res.weights, _instance_50x3()), abs=1e-9)


def test_rank_deficient_raises_without_regularization():
    A = np.array([[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]])
    with pytest.raises(DegenerateSpan):
        mvee_origin_fw(A, regularize=False)
    res = mvee_origin_fw(A)
    assert res.ridge > 0


def test_fw_direction_cross_tie_lowest_index():
    assert fw_direction(np.full(4, 0.25), CROSS) == 0


def test_fw_direction_scaled_pair_tie():
    assert fw_direction(np.array([0.5, 0.5]), np.array([[2.0, 0], [0, 1.0]])) == 0


def test_fw_direction_three_points():
    # M = diag(10/3, 1/3), so the gradient coordinates are (2.7, 0.3, 3)
    A = np.array([[3.0, 0], [1, 0], [0, 1]])
    g = np.einsum("ij,ji->i", A, np.linalg.solve(np.diag([10 / 3, 1 / 3]), A.T))
    np.testing.assert_allclose(g, [2.7, 0.3, 3.0])
    assert fw_direction(np.full(3, 1 / 3), A) == 2


@pytest.mark.parametrize("g, n, kappa", [(2.0, 2, 0.0), (4.0, 2, 1 / 3), (6.0, 3, 1 / 5)])
def test_fw_optimal_step(g, n, kappa):
    assert fw_optimal_step(g, n) == pytest.approx(kappa)


@pytest.mark.parametrize("g, n", [(4.0, 2), (6.0, 3), (11.0, 5)])
def test_fw_optimal_step_maximizes_line_objective(g, n):
    # along the vertex direction log det changes by n log(1-k) + log(1 + k g / (1-k))
    k = np.linspace(0.0, 0.99, 100_001)
    vals = n * np.log1p(-k) + np.log1p(k * g / (1 - k))
    assert fw_optimal_step(g, n) == pytest.approx(k[np.argmax(vals)], abs=1e-4)


def test_fw_continue_matches_full_solve():
    A = _instance_50x3()
    w, P, gap, it = fw_continue(A, np.full(50, 1 / 50), 1e-4, 100_000)
    ref = mvee_origin_fw(A, eps=1e-4, away=False)
    np.testing.assert_allclose(P, ref.shape, rtol=1e-9)
    assert it == ref.iterations < 100_000
    assert gap <= 1e-4 * 3
