import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.engine import substream
from rwre_lab.environment import EnvironmentRealization, TransitionVector, make_model
from rwre_lab.errors import TooLarge
from rwre_lab.oracle import (
    classical_grad,
    classical_lmgf,
    classical_rate,
    classical_tilt,
    enumerate_averaged_mgf,
    enumerate_quenched_mgf,
    path_weight,
)
from rwre_lab.walk import simulate_batch, theta_increments

P07 = TransitionVector(np.array([0.7, 0.3]))

thetas_1d = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


class TestClassicalForms:
    def test_zero_theta(self):
        assert classical_lmgf(P07, 0.0) == 0.0

    def test_pinned_value(self):
        assert classical_lmgf(P07, 0.5) == pytest.approx(0.2897280436, abs=1e-9)

    @given(theta=thetas_1d)
    def test_uniform_p_even(self, theta):
        p = TransitionVector(np.array([0.5, 0.5]))
        assert classical_lmgf(p, theta) == pytest.approx(
            classical_lmgf(p, -theta), abs=1e-12
        )

    def test_tilt_identity_at_zero(self):
        assert classical_tilt(P07, 0.0).probs == pytest.approx(P07.probs)

    def test_tilt_pinned(self):
        t = classical_tilt(P07, 0.5)
        assert t.probs == pytest.approx([0.8638095, 0.1361905], abs=1e-6)

    @given(theta=thetas_1d)
    def test_tilt_group_property(self, theta):
        back = classical_tilt(classical_tilt(P07, theta), -theta)
        assert back.probs == pytest.approx(P07.probs, abs=1e-12)

    @given(theta=st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
    @settings(max_examples=50)
    def test_grad_matches_finite_difference(self, theta):
        h = 1e-6
        fd = (classical_lmgf(P07, theta + h) - classical_lmgf(P07, theta - h)) / (2 * h)
        assert classical_grad(P07, theta)[0] == pytest.approx(fd, abs=1e-8)

    def test_rate_pinned_and_dual(self):
        xi = classical_grad(P07, 0.5)[0]
        assert xi == pytest.approx(0.7276190572, abs=1e-9)
        I = classical_rate(P07, xi)
        assert I == pytest.approx(0.0740814850, abs=1e-8)
        # duality: I(grad Lambda(theta)) = theta grad - Lambda
        assert I == pytest.approx(0.5 * xi - classical_lmgf(P07, 0.5), abs=1e-8)

    def test_rate_closed_form_d1(self):
        # independent route: the binary-entropy form of the d=1 rate
        for x in (0.1, 0.4, 0.7276190572):
            closed = (1 + x) / 2 * math.log((1 + x) / 1.4) + (1 - x) / 2 * math.log(
                (1 - x) / 0.6
            )
            assert classical_rate(P07, x) == pytest.approx(closed, abs=1e-7)

    def test_rate_outside_reachable_set(self):
        assert classical_rate(P07, 1.5) == math.inf
        assert classical_rate(
            TransitionVector(np.full(4, 0.25)), np.array([0.8, 0.8])
        ) == math.inf


class TestPathWeight:
    def test_single_steps_are_mean_kernel(self, symmetric_mixture_d1):
        mean = symmetric_mixture_d1.law.mean_kernel().probs
        assert path_weight(symmetric_mixture_d1, [0]) == pytest.approx(mean[0])
        assert path_weight(symmetric_mixture_d1, [1]) == pytest.approx(mean[1])

    def test_revisit_hand_value(self, symmetric_mixture_d1):
        # R,L,R revisits the origin: E[pi(R)^2] * E[pi(L)] = 0.34 * 0.5
        assert path_weight(symmetric_mixture_d1, [0, 1, 0]) == pytest.approx(
            0.17, abs=1e-15
        )

    def test_no_revisit_factorizes(self, symmetric_mixture_d1):
        # R,R,R: three distinct sites, each visited once
        assert path_weight(symmetric_mixture_d1, [0, 0, 0]) == pytest.approx(0.125)


class TestAveragedEnumeration:
    def test_single_step(self, drifted_mixture_d1):
        theta = 0.4
        mean = drifted_mixture_d1.law.mean_kernel().probs
        want = mean[0] * math.exp(theta) + mean[1] * math.exp(-theta)
        assert enumerate_averaged_mgf(drifted_mixture_d1, theta, 1) == pytest.approx(
            want, rel=1e-14
        )

    def test_n2_closed_form(self, symmetric_mixture_d1):
        for theta in (0.0, 0.3, 1.0, -0.7):
            want = 0.25 * math.exp(2 * theta) + 0.5 + 0.25 * math.exp(-2 * theta)
            got = enumerate_averaged_mgf(symmetric_mixture_d1, theta, 2)
            assert got == pytest.approx(want, rel=1e-13)

    @pytest.mark.parametrize("n", [1, 3, 5])
    def test_total_probability(self, classical_d2, n):
        assert enumerate_averaged_mgf(classical_d2, np.zeros(2), n) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_total_probability_d4(self, mixture_d4):
        assert enumerate_averaged_mgf(mixture_d4, np.zeros(4), 4) == pytest.approx(
            1.0, abs=1e-12
        )

    def test_matches_sum_of_path_weights(self, drifted_mixture_d1):
        # brute-force recomposition from path_weight, n=4 over 16 paths
        theta, n = 0.6, 4
        total = 0.0
        for code in range(2**n):
            steps = [(code >> i) & 1 for i in range(n)]
            disp = sum(1 if s == 0 else -1 for s in steps)
            total += path_weight(drifted_mixture_d1, steps) * math.exp(theta * disp)
        got = enumerate_averaged_mgf(drifted_mixture_d1, theta, n)
        assert got == pytest.approx(total, rel=1e-12)

    def test_monotone_in_theta_with_positive_drift(self, mixture_d4):
        vals = [
            enumerate_averaged_mgf(mixture_d4, np.array([t, 0.0, 0.0, 0.0]), 4)
            for t in (0.0, 0.1, 0.2, 0.4)
        ]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_n_jobs_bit_stable(self, mixture_d4):
        theta = np.array([0.2, -0.1, 0.0, 0.05])
        a = enumerate_averaged_mgf(mixture_d4, theta, 4, n_jobs=1)
        b = enumerate_averaged_mgf(mixture_d4, theta, 4, n_jobs=4)
        assert a == b

    def test_guard(self, mixture_d4):
        with pytest.raises(TooLarge):
            enumerate_averaged_mgf(mixture_d4, np.zeros(4), 9)  # 9*3 = 27 bits


class TestQuenchedEnumeration:
    def test_constant_environment_product_structure(self):
        const = make_model(2, 0.1, [{"+1": 0.4, "-1": 0.1, "+2": 0.3, "-2": 0.2}], [1.0])
        env = EnvironmentRealization(const, seed=5)
        theta = np.array([0.3, -0.2])
        for n in (1, 4, 9):
            want = n * classical_lmgf(const.law.components[0], theta)
            assert enumerate_quenched_mgf(env, theta, n) == pytest.approx(
                want, rel=1e-12
            )

    def test_zero_theta(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=9)
        assert enumerate_quenched_mgf(env, np.zeros(2), 7) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_guard(self, mixture_d4):
        env = EnvironmentRealization(mixture_d4, seed=1)
        with pytest.raises(TooLarge):
            enumerate_quenched_mgf(env, np.zeros(4), 30)

    def test_matches_direct_monte_carlo(self, classical_d2):
        # same frozen environment for every walker; z-score on the raw mean
        theta, n, W, envseed = np.array([0.4, 0.1]), 12, 20000, 11
        env = EnvironmentRealization(classical_d2, seed=envseed)
        dp = math.exp(enumerate_quenched_mgf(env, theta, n))
        steps = simulate_batch(
            classical_d2,
            np.full(W, envseed, dtype=np.uint64),
            np.zeros(2, np.int64),
            n,
            rng=substream(31, 0),
        )
        vals = np.exp(theta_increments(steps.reshape(-1), theta).reshape(W, n).sum(axis=1))
        se = vals.std(ddof=1) / math.sqrt(W)
        assert abs(vals.mean() - dp) < 3 * se

    def test_jensen_against_averaged(self, classical_d2):
        # E_env[log E_walk] <= log E_env E_walk, up to realization sampling error
        theta, n, reps = np.array([0.4, 0.1]), 6, 40
        qs = [
            enumerate_quenched_mgf(EnvironmentRealization(classical_d2, seed=k), theta, n)
            for k in range(reps)
        ]
        avg = math.log(enumerate_averaged_mgf(classical_d2, theta, n))
        se = np.std(qs, ddof=1) / math.sqrt(reps)
        assert np.mean(qs) <= avg + 3 * se
