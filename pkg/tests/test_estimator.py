import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupled_cv.estimator import (
    EstimateBatch,
    EstimatorError,
    NonMeetingError,
    UnbiasedEstimate,
    deltas,
    h_km,
    h_km_vector,
    pi_hat,
    replicate,
    sigma_hat_full,
    sigma_hat_split,
)
from coupled_cv.kernels import CoupledTrajectory, KernelConfig, gaussian_init, make_kernel, run_coupled_lanes
from coupled_cv.oracle import FiniteChain, FiniteTrajectorySource, make_synthetic_coupling, state_function
from coupled_cv.rng import SharedStream, make_generator

from conftest import identity, square


def hand_trajectory():
    # X_0=1, X_1=3, X_2=5; Y_0=2, Y_1=5 (meets at tau=2)
    xs = np.array([[1.0], [3.0], [5.0]])
    ys = np.array([[2.0], [5.0]])
    return CoupledTrajectory(xs, ys, tau=2)


def batch_of(values):
    return EstimateBatch([UnbiasedEstimate(v, v, 0.0, 1) for v in values], 0, 0)


def random_trajectories(seed, n=20, m=15):
    from coupled_cv.targets import make_gaussian

    kernel = make_kernel(make_gaussian([0.0, 0.0], np.eye(2)), KernelConfig("coupled_rwm", step_size=0.6))
    return run_coupled_lanes(kernel, gaussian_init(2.0, 1.0, 2), 0, m, SharedStream(make_generator(seed), n), 10**5)


class TestHkm:
    def test_hand_example(self):
        est = h_km(hand_trajectory(), identity, 0, 0)
        assert (est.mcmc_part, est.bias_correction, est.value) == (1.0, 1.0, 2.0)
        assert est.tau == 2

    def test_no_correction_when_meeting_early(self):
        traj = hand_trajectory()
        est = h_km(traj, identity, 1, 2)
        assert est.bias_correction == 0.0
        assert est.value == pytest.approx((3.0 + 5.0) / 2)

    def test_trajectory_too_short(self):
        with pytest.raises(EstimatorError):
            h_km(hand_trajectory(), identity, 0, 5)

    def test_unmet_trajectory(self):
        traj = CoupledTrajectory(np.zeros((3, 1)), np.ones((2, 1)), None)
        with pytest.raises(EstimatorError):
            h_km(traj, identity, 0, 1)

    def test_m_below_k(self):
        with pytest.raises(EstimatorError):
            h_km(hand_trajectory(), identity, 2, 1)

    @pytest.mark.parametrize("k,m", [(0, 0), (0, 5), (3, 3), (4, 10), (12, 15)])
    def test_constant_integrand(self, k, m):
        for traj in random_trajectories(1, m=m):
            est = h_km(traj, lambda p: np.full(len(p), 2.5), k, m)
            assert est.value == 2.5
            assert est.bias_correction == 0.0

    def test_value_is_sum_of_parts(self):
        for traj in random_trajectories(2):
            est = h_km(traj, square, 2, 15)
            assert est.value == est.mcmc_part + est.bias_correction

    def test_vector_reduces_to_scalar(self):
        for traj in random_trajectories(3):
            (a,) = h_km_vector(traj, identity, 1, 15)
            assert a == h_km(traj, identity, 1, 15)

    def test_duplicated_components(self):
        for traj in random_trajectories(4):
            a, b = h_km_vector(traj, lambda p: np.stack([p[..., 0], p[..., 0]], axis=-1), 0, 15)
            assert a == b

    def test_matches_naive_loop(self):
        for traj in random_trajectories(5):
            k, m = 2, 15
            h = lambda p: np.atleast_2d(p)[:, 0] ** 3
            n = m - k + 1
            naive = sum(h(traj.xs[t])[0] for t in range(k, m + 1)) / n
            for t in range(k + 1, traj.tau):
                naive += min(1.0, (t - k) / n) * (h(traj.xs[t])[0] - h(traj.ys[t - 1])[0])
            assert h_km(traj, h, k, m).value == pytest.approx(naive, rel=1e-12, abs=1e-12)


class TestLinearity:
    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        a=st.floats(-5, 5),
        b=st.floats(-5, 5),
        k=st.integers(0, 10),
    )
    def test_linear_in_integrand(self, seed, a, b, k):
        m = 15
        h1 = lambda p: p[..., 0]
        h2 = lambda p: np.sin(p[..., 1])
        for traj in random_trajectories(seed, n=4, m=m):
            lhs = h_km(traj, lambda p: a * h1(p) + b * h2(p), k, m).value
            rhs = a * h_km(traj, h1, k, m).value + b * h_km(traj, h2, k, m).value
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(a) + abs(b)) * 10


class TestDeltas:
    def test_hand_example(self):
        np.testing.assert_array_equal(deltas(hand_trajectory(), identity, 4), [1.0, 1.0, 0.0, 0.0, 0.0])

    def test_telescoping_sum_is_h00(self):
        # H_{0:0} = h(X_0) + sum_{t=1}^{tau-1} Delta_t
        for traj in random_trajectories(6):
            d = deltas(traj, square, traj.tau + 2)
            assert math.fsum(d) == pytest.approx(h_km(traj, square, 0, 0).value, rel=1e-12, abs=1e-12)


class TestReplicate:
    def test_identical_seeds_identical_estimates(self, std_normal, init_1d):
        cfg = KernelConfig("coupled_rwm", step_size=1.0)
        (batch,) = replicate(std_normal, cfg, init_1d, identity, 0, 10, 2, 0, seeds=[99, 99])
        assert batch.estimates[0] == batch.estimates[1]

    def test_deterministic_given_root_seed(self, std_normal, init_1d):
        cfg = KernelConfig("coupled_mala", step_size=1.0)
        a = replicate(std_normal, cfg, init_1d, identity, 2, 10, 70, 5)[0].values
        b = replicate(std_normal, cfg, init_1d, identity, 2, 10, 70, 5, workers=3)[0].values
        np.testing.assert_array_equal(a, b)

    def test_non_meeting_aborts(self, std_normal):
        cfg = KernelConfig("coupled_rwm", step_size=1e-3, max_iterations=5)
        far = gaussian_init(0.0, 50.0, 1)
        with pytest.raises(NonMeetingError) as info:
            replicate(std_normal, cfg, far, identity, 0, 0, 4, 0)
        assert info.value.indices

    def test_labels(self, std_normal, init_1d):
        batches = replicate(
            std_normal, KernelConfig(step_size=1.0), init_1d,
            lambda p: np.stack([p[..., 0], p[..., 0] ** 2], -1), 0, 5, 4, 1, labels=["x", "x2"],
        )
        assert [b.h_label for b in batches] == ["x", "x2"]
        assert all(len(b) == 4 for b in batches)

    @pytest.mark.parametrize("kind", ["coupled_rwm", "coupled_mala"])
    @pytest.mark.parametrize("k,m", [(0, 0), (0, 10), (5, 20)])
    def test_unbiased_on_gaussian(self, std_normal, kind, k, m):
        init = gaussian_init(2.0, 1.0, 1)
        batches = replicate(
            std_normal, KernelConfig(kind, step_size=1.0), init,
            lambda p: np.stack([p[..., 0], p[..., 0] ** 2], -1), k, m, 1500, 123,
        )
        for batch, truth in zip(batches, (0.0, 1.0)):
            se = math.sqrt(sigma_hat_full(batch) / len(batch))
            assert abs(pi_hat(batch) - truth) <= 4 * se


class TestFiniteChainUnbiasedness:
    @pytest.mark.parametrize("k,m,p", [(0, 0, 0.5), (0, 5, 0.3), (3, 10, 0.5), (5, 20, 0.2)])
    def test_matches_stationary_mean(self, k, m, p):
        chain = FiniteChain([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]], [1.0, 0.0, 0.0])
        h_values = np.array([0.0, 1.0, 4.0])
        source = FiniteTrajectorySource(make_synthetic_coupling(chain, p))
        h = state_function(h_values)
        vals = np.array([h_km(t, h, k, m).value for t in source.trajectories(20_000, k, m, seed=11)])
        truth = chain.stationary @ h_values
        assert abs(vals.mean() - truth) <= 4 * vals.std(ddof=1) / math.sqrt(vals.size)


class TestAggregates:
    @pytest.mark.parametrize("values,expected", [([1, 2, 3], 2.0), ([7.5], 7.5), ([1, 2, 3, 4], 2.5)])
    def test_pi_hat(self, values, expected):
        assert pi_hat(batch_of(values)) == expected

    def test_pi_hat_empty(self):
        with pytest.raises(EstimatorError):
            pi_hat([])

    @pytest.mark.parametrize(
        "values,expected", [([1, 2, 3, 4], 0.25), ([3, 3, 3, 3, 3], 0.0), ([0, 2, 100, 100], 1.0)]
    )
    def test_sigma_split(self, values, expected):
        assert sigma_hat_split(batch_of(values)) == expected

    def test_sigma_split_unbiased_flag(self):
        assert sigma_hat_split([1, 2, 3, 4], unbiased=True) == 0.5

    def test_sigma_split_needs_four(self):
        with pytest.raises(EstimatorError):
            sigma_hat_split([1, 2, 3])

    @pytest.mark.parametrize("values,expected", [([1, 3], 2.0), ([4, 4, 4], 0.0), ([1, 2, 3, 4], 5 / 3)])
    def test_sigma_full(self, values, expected):
        assert sigma_hat_full(batch_of(values)) == pytest.approx(expected, rel=1e-15)

    def test_sigma_full_needs_two(self):
        with pytest.raises(EstimatorError):
            sigma_hat_full([1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=40))
    def test_split_matches_numpy(self, values):
        half = np.array(values[: len(values) // 2])
        assert sigma_hat_split(values) == pytest.approx(half.var(), rel=1e-9, abs=1e-6)

    def test_subset_keeps_replicate_ids(self):
        b = batch_of([1, 2, 3, 4]).subset([2, 3])
        assert b.replicate_ids == [2, 3]
        assert list(b.values) == [3, 4]
