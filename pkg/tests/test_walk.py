import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.engine import EstimatorSummary, substream
from rwre_lab.environment import EnvironmentRealization
from rwre_lab.errors import EmptyPath, ZeroProbabilityStep
from rwre_lab.walk import (
    KernelSpec,
    PathRecord,
    base_kernel,
    batch_log_likelihood_ratio,
    class_table_kernel,
    log_likelihood_ratio,
    mean_velocity,
    simulate_batch,
    simulate_path,
    theta_increments,
)


class TestSimulatePath:
    def test_reproducible(self, symmetric_mixture_d1):
        env = EnvironmentRealization(symmetric_mixture_d1, seed=3)
        p1 = simulate_path(env, base_kernel(), 500, substream(1, 0))
        p2 = simulate_path(env, base_kernel(), 500, substream(1, 0))
        assert np.array_equal(p1.steps, p2.steps)

    def test_always_right_kernel_gives_straight_path(self, classical_d1):
        env = EnvironmentRealization(classical_d1, seed=0)
        right = class_table_kernel("right", np.array([[1.0, 0.0]]))
        p = simulate_path(env, right, 50, substream(2, 0))
        assert np.array_equal(p.positions()[:, 0], np.arange(51))
        assert p.kernel_tag == "right"

    def test_batch_matches_sequential_with_shared_uniforms(self, mixture_d4):
        env_seed = 77
        n = 200
        u = substream(4, 4).random((n, 1))
        batch = simulate_batch(
            mixture_d4, np.uint64(env_seed), np.zeros(4, np.int64), n, uniforms=u
        )

        class _Replay:
            def __init__(self, u):
                self.u = u.ravel()
                self.i = 0

            def random(self, k):
                out = self.u[self.i : self.i + k]
                self.i += k
                return out

        env = EnvironmentRealization(mixture_d4, seed=env_seed)
        seq = simulate_path(env, base_kernel(), n, _Replay(u))
        assert np.array_equal(batch[0], seq.steps)

    def test_levels_match_positions(self, mixture_d4):
        env = EnvironmentRealization(mixture_d4, seed=8)
        p = simulate_path(env, base_kernel(), 300, substream(5, 1))
        pos = p.positions()
        for axis in range(4):
            assert np.array_equal(p.levels(axis), pos[:, axis] - pos[0, axis])
        u = np.array([0.5, -0.5, 0.25, 0.0])
        assert p.projected_levels(u) == pytest.approx((pos - pos[0]) @ u)


class TestVelocity:
    def test_straight_path_velocity(self):
        p = PathRecord(start=np.zeros(2, np.int64), steps=np.zeros(10, np.int8))
        assert mean_velocity(p) == pytest.approx([1.0, 0.0])

    def test_empty_path_raises(self):
        p = PathRecord(start=np.zeros(1, np.int64), steps=np.zeros(0, np.int8))
        with pytest.raises(EmptyPath):
            mean_velocity(p)

    def test_symmetric_mixture_velocity_zero(self, symmetric_mixture_d1):
        # annealed drift is zero by mirror symmetry; CLT band across replicas
        reps, n = 400, 1500
        seeds = substream(6, 0).integers(0, 2**64, size=reps, dtype=np.uint64)
        steps = simulate_batch(
            symmetric_mixture_d1, seeds, np.zeros(1, np.int64), n, rng=substream(6, 1)
        )
        v = theta_increments(steps, np.ones(1)).sum(axis=1) / n
        s = EstimatorSummary.from_samples(v)
        assert abs(s.mean) < 4 * s.stderr + 1e-12


class TestLikelihoodRatio:
    def test_identical_kernels_zero(self, drifted_mixture_d1):
        env = EnvironmentRealization(drifted_mixture_d1, seed=1)
        p = simulate_path(env, base_kernel(), 200, substream(7, 0))
        assert log_likelihood_ratio(p, env, base_kernel(), base_kernel()) == 0.0

    def test_ellipticity_bound_on_tilt(self, classical_d1):
        # exponentially tilted row against the base: per-step and averaged
        # log-ratios stay inside [log delta, -log delta]
        env = EnvironmentRealization(classical_d1, seed=2)
        theta = 0.5
        row = classical_d1.law.components[0].probs * np.exp([theta, -theta])
        row = row / row.sum()
        tilt = class_table_kernel("tilt", row[None, :])
        p = simulate_path(env, tilt, 400, substream(8, 0))
        val = log_likelihood_ratio(p, env, tilt, base_kernel())
        delta = classical_d1.delta
        assert np.log(delta) <= val / p.n <= -np.log(delta)

    def test_zero_probability_step_raises(self, classical_d1):
        env = EnvironmentRealization(classical_d1, seed=3)
        right = class_table_kernel("right", np.array([[1.0, 0.0]]))
        p = simulate_path(env, right, 10, substream(9, 0))
        left_only = class_table_kernel("left", np.array([[0.0, 1.0]]))
        with pytest.raises(ZeroProbabilityStep):
            log_likelihood_ratio(p, env, base_kernel(), left_only)

    def test_batch_matches_sequential(self, drifted_mixture_d1):
        m = drifted_mixture_d1
        seeds = np.array([11, 12], dtype=np.uint64)
        steps = simulate_batch(m, seeds, np.zeros(1, np.int64), 150, rng=substream(10, 0))
        theta = 0.3
        tilted = m.law.prob_table() * np.exp([theta, -theta])
        tilted = tilted / tilted.sum(axis=1, keepdims=True)
        got = batch_log_likelihood_ratio(
            m, seeds, steps, tilted, m.law.prob_table()
        )
        for w in range(2):
            env = EnvironmentRealization(m, seed=int(seeds[w]))
            p = PathRecord(start=np.zeros(1, np.int64), steps=steps[w])
            want = log_likelihood_ratio(
                p, env, class_table_kernel("t", tilted), base_kernel()
            )
            assert got[w] == pytest.approx(want, rel=1e-10)
