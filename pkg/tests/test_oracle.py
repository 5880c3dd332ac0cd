import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupled_cv.estimator import h_km
from coupled_cv.oracle import (
    ConvergenceError,
    FiniteChain,
    FiniteTrajectorySource,
    exact_asymptotic_variance,
    exact_d_bound_decomposition,
    exact_lambda,
    exact_moment_bound,
    exact_tv,
    make_synthetic_coupling,
    meeting_probability_per_step,
    state_function,
    tv_sup_norm,
)
from coupled_cv.rkhs import KernelSpec, embedding_distance, fit_geometric_tail, gram

TWO_STATE = [[0.7, 0.3], [0.2, 0.8]]
IID = [[0.5, 0.5], [0.5, 0.5]]


@st.composite
def chains(draw, n_min=2, n_max=5):
    n = draw(st.integers(n_min, n_max))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n), size=n)
    P = 0.5 * P + 0.5 / n  # keeps the chain irreducible and aperiodic
    init = rng.dirichlet(np.ones(n))
    return FiniteChain(P, init), rng


def autocovariance_oracle(P, h, n_terms=4000):
    """Var_pi(h) + 2 sum_t Cov(h(X_0), h(X_t)) by brute-force summation."""
    pi = FiniteChain(P, np.full(len(P), 1 / len(P))).stationary
    hc = h - pi @ h
    total = pi @ hc**2
    v = hc.copy()
    for _ in range(n_terms):
        v = P @ v
        total += 2 * pi @ (hc * v)
    return total


class TestFiniteChain:
    def test_stationary(self):
        chain = FiniteChain(TWO_STATE, [1.0, 0.0])
        np.testing.assert_allclose(chain.stationary, [0.4, 0.6], atol=1e-14)
        np.testing.assert_allclose(chain.stationary @ chain.transition, chain.stationary, atol=1e-10)

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            FiniteChain([[0.5, 0.4], [0.5, 0.5]], [1.0, 0.0])

    def test_rejects_bad_init(self):
        with pytest.raises(ValueError):
            FiniteChain(IID, [0.7, 0.7])

    def test_from_text(self, tmp_path):
        path = tmp_path / "chain.txt"
        path.write_text("0.7 0.3\n0.2 0.8\n\n1 0\n", encoding="utf-8")
        chain = FiniteChain.from_text(path)
        np.testing.assert_array_equal(chain.transition, TWO_STATE)
        np.testing.assert_array_equal(chain.init, [1.0, 0.0])


class TestTv:
    def test_equal(self):
        assert exact_tv([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_disjoint(self):
        assert exact_tv([1, 0], [0, 1]) == 1.0

    def test_example(self):
        assert exact_tv([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3, abs=1e-15)

    def test_sup_norm_is_twice(self):
        assert tv_sup_norm([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.6, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            exact_tv([1.0], [0.5, 0.5])


class TestLambda:
    def test_stationary_start(self):
        chain = FiniteChain(TWO_STATE, [0.4, 0.6])
        assert exact_lambda(chain) == pytest.approx(0.0, abs=1e-15)

    def test_one_step_mixing(self):
        assert exact_lambda(FiniteChain(IID, [1.0, 0.0])) == 0.5

    def test_not_converged(self):
        slow = FiniteChain([[0.999999, 0.000001], [0.000001, 0.999999]], [1.0, 0.0])
        with pytest.raises(ConvergenceError):
            exact_lambda(slow, t_max=10)

    @settings(max_examples=30, deadline=None)
    @given(chains())
    def test_at_most_one(self, drawn):
        chain, _ = drawn
        assert 0.0 <= exact_lambda(chain) <= 1.0
        assert exact_lambda(chain, sup_norm=True) == pytest.approx(2 * exact_lambda(chain))


class TestAsymptoticVariance:
    def test_constant(self):
        assert exact_asymptotic_variance(FiniteChain(TWO_STATE, [1, 0]), [3.0, 3.0]) == pytest.approx(0.0, abs=1e-14)

    def test_iid(self):
        chain = FiniteChain([[0.25, 0.75], [0.25, 0.75]], [1.0, 0.0])
        assert exact_asymptotic_variance(chain, [0.0, 1.0]) == pytest.approx(0.1875, rel=1e-12)

    def test_closed_form(self):
        a, b = 0.3, 0.2
        closed = a * b * (2 - a - b) / (a + b) ** 3
        assert closed == pytest.approx(0.72)
        value = exact_asymptotic_variance(FiniteChain([[1 - a, a], [b, 1 - b]], [1, 0]), [0.0, 1.0])
        assert value == pytest.approx(0.72, rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(chains())
    def test_matches_autocovariance_sum(self, drawn):
        chain, rng = drawn
        h = rng.standard_normal(chain.n)
        expected = autocovariance_oracle(chain.transition, h)
        assert exact_asymptotic_variance(chain, h) == pytest.approx(expected, rel=1e-8, abs=1e-12)


class TestMoments:
    def test_constant_one(self):
        for eta in (0.1, 1.0, 3.0):
            assert exact_moment_bound(FiniteChain(TWO_STATE, [1, 0]), [1.0, 1.0], eta) == pytest.approx(1.0)

    def test_stationary_start(self):
        chain = FiniteChain(TWO_STATE, [0.4, 0.6])
        h = np.array([-1.0, 2.0])
        assert exact_moment_bound(chain, h, 1.0) == pytest.approx(chain.stationary @ np.abs(h) ** 3, rel=1e-12)

    def test_two_state_example(self):
        assert exact_moment_bound(FiniteChain(IID, [1, 0]), [0.0, 1.0], 2.0) == 0.5


class TestDecomposition:
    def test_zero_integrand(self):
        pi_term, norm_term, lam_h = exact_d_bound_decomposition(FiniteChain(IID, [1, 0]), [0, 0], 2.0, KernelSpec(1.0))
        assert (pi_term, norm_term) == (0.0, 0.0)
        assert lam_h >= 0

    def test_stationary_start(self):
        chain = FiniteChain(TWO_STATE, [0.4, 0.6])
        h = [0.5, 2.0]
        pi_term, norm_term, lam_h = exact_d_bound_decomposition(chain, h, 1.0, KernelSpec(1.0))
        assert lam_h == pytest.approx(0.0, abs=1e-12)
        assert pi_term == pytest.approx(exact_moment_bound(chain, h, 1.0), rel=1e-12)

    def test_two_state_dominates(self):
        chain = FiniteChain(IID, [1, 0])
        pi_term, norm_term, lam_h = exact_d_bound_decomposition(chain, [0.0, 1.0], 2.0, KernelSpec(1.0))
        assert pi_term + norm_term * lam_h >= 0.5

    @settings(max_examples=40, deadline=None)
    @given(chains(), st.floats(0.1, 3.0), st.floats(0.3, 3.0))
    def test_domination_property(self, drawn, eta, bw):
        chain, rng = drawn
        h = rng.standard_normal(chain.n)
        pi_term, norm_term, lam_h = exact_d_bound_decomposition(chain, h, eta, KernelSpec(bw))
        assert pi_term + norm_term * lam_h >= exact_moment_bound(chain, h, eta) * (1 - 1e-10)

    @settings(max_examples=40, deadline=None)
    @given(chains(), st.floats(0.3, 3.0))
    def test_lambda_h_below_sup_norm_lambda(self, drawn, bw):
        chain, _ = drawn
        _, _, lam_h = exact_d_bound_decomposition(chain, np.ones(chain.n), 1.0, KernelSpec(bw))
        assert lam_h <= exact_lambda(chain, sup_norm=True) + 1e-12
        G = gram(chain.coords, KernelSpec(bw))
        for law in chain.laws(20):
            assert embedding_distance(chain.stationary, law, G) <= tv_sup_norm(chain.stationary, law) + 1e-12


class TestSyntheticCoupling:
    def test_meet_prob_one(self):
        # The first move X_1 ~ P(X_0, .) happens before the pair is coupled, so tau <= 2
        # with P(tau = 1) = P(X_1 = Y_0).
        kernel = make_synthetic_coupling(FiniteChain(IID, [1, 0]), 1.0)
        taus = np.array([t.tau for t in FiniteTrajectorySource(kernel).trajectories(20_000, 0, 0, seed=0)])
        assert taus.max() == 2
        np.testing.assert_allclose(kernel.exact_tail(4), [1.0, 0.5, 0.0, 0.0, 0.0])
        assert abs(np.mean(taus == 1) - 0.5) <= 4 * math.sqrt(0.25 / taus.size)

    def test_meet_prob_one_identical_laws(self):
        # Constant chain started at its absorbing state: X_1 = Y_0 surely.
        kernel = make_synthetic_coupling(FiniteChain([[1.0, 0.0], [1.0, 0.0]], [1, 0]), 1.0)
        assert all(t.tau == 1 for t in FiniteTrajectorySource(kernel).trajectories(500, 0, 0, seed=0))

    def test_tail_at_three(self):
        source = FiniteTrajectorySource(make_synthetic_coupling(FiniteChain(IID, [1, 0]), 0.5), chunk_size=25_000)
        taus = np.array([t.tau for t in source.trajectories(100_000, 0, 0, seed=1)])
        assert abs(np.mean(taus > 3) - 0.125) <= 3 * math.sqrt(0.125 * 0.875 / 1e5)

    def test_exact_tail_two_state(self):
        for P in (IID, TWO_STATE):
            kernel = make_synthetic_coupling(FiniteChain(P, [1, 0]), 0.5)
            assert kernel.exact_geometric
            t = np.arange(1, 31)
            np.testing.assert_allclose(kernel.exact_tail(30)[1:] / 0.5**t, kernel.exact_tail(1)[1] / 0.5, rtol=1e-12)
            assert kernel.envelope_constant(0.5) <= 1.0 + 1e-12

    def test_fitted_tail_recovers_delta(self):
        source = FiniteTrajectorySource(make_synthetic_coupling(FiniteChain(IID, [1, 0]), 0.5), chunk_size=25_000)
        taus = [t.tau for t in source.trajectories(100_000, 0, 0, seed=2)]
        assert abs(fit_geometric_tail(taus).delta - 0.5) <= 0.03

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.05, 1.0))
    def test_two_state_meeting_is_minimal(self, a, b, frac):
        # one-step meeting probability p + (1 - p) * max(0, max_i rx_i + ry_i - 1), the least possible
        P = np.array([[1 - a, a], [b, 1 - b]])
        mass = P.min(axis=0).sum()
        p = frac * mass
        kernel = make_synthetic_coupling(FiniteChain(P, [1, 0]), p)
        nu = P.min(axis=0) / mass
        if p < 1:
            rx = (P[0] - p * nu) / (1 - p)
            ry = (P[1] - p * nu) / (1 - p)
            expected = p + (1 - p) * max(0.0, float(np.max(rx + ry - 1)))
        else:
            expected = 1.0
        assert meeting_probability_per_step(kernel)[0, 1] == pytest.approx(expected, abs=1e-12)

    def test_overlapping_residuals_flagged(self):
        kernel = make_synthetic_coupling(FiniteChain([[0.6, 0.4], [0.45, 0.55]], [1, 0]), 0.5)
        assert not kernel.exact_geometric

    def test_exceeds_minorization(self):
        with pytest.raises(ValueError, match="minorization"):
            make_synthetic_coupling(FiniteChain([[0.9, 0.1], [0.1, 0.9]], [1, 0]), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(chains(2, 4), st.floats(0.05, 1.0))
    def test_marginals_and_faithfulness(self, drawn, frac):
        chain, _ = drawn
        mass = chain.transition.min(axis=0).sum()
        kernel = make_synthetic_coupling(chain, frac * mass)
        n = chain.n
        mx, my = kernel.marginals()
        for x in range(n):
            for y in range(n):
                np.testing.assert_allclose(mx[x, y], chain.transition[x], atol=1e-12)
                np.testing.assert_allclose(my[x, y], chain.transition[y], atol=1e-12)
        diag = np.arange(n) * (n + 1)
        np.testing.assert_allclose(kernel.joint[diag][:, diag].sum(axis=1), 1.0, atol=1e-12)
        off = ~np.eye(n, dtype=bool)
        assert np.all(meeting_probability_per_step(kernel)[off] >= frac * mass - 1e-12)

    def test_exact_tail_matches_simulation(self):
        chain = FiniteChain([[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]], [1, 0, 0])
        kernel = make_synthetic_coupling(chain, 0.4)
        taus = np.array([t.tau for t in FiniteTrajectorySource(kernel).trajectories(50_000, 0, 0, seed=3)])
        exact = kernel.exact_tail(8)
        for t in range(9):
            se = math.sqrt(exact[t] * (1 - exact[t]) / taus.size) + 1e-12
            assert abs(np.mean(taus > t) - exact[t]) <= 4 * se


class TestVarianceLink:
    def test_scaled_variance_close_to_asymptotic(self):
        chain = FiniteChain(TWO_STATE, [1, 0])
        source = FiniteTrajectorySource(make_synthetic_coupling(chain, 0.5))
        h = state_function([0.0, 1.0])
        k, m = 20, 200
        vals = np.array([h_km(t, h, k, m).value for t in source.trajectories(20_000, k, m, seed=4)])
        scaled = (m - k + 1) * vals.var(ddof=1)
        assert scaled == pytest.approx(exact_asymptotic_variance(chain, [0.0, 1.0]), rel=0.2)
