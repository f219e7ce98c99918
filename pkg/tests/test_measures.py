import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwre_lab.engine import substream
from rwre_lab.environment import EnvironmentRealization, make_model
from rwre_lab.errors import EmptyMeasure
from rwre_lab.measures import (
    EmpiricalMeasure,
    accumulate,
    marginal_balance,
    measure_from_csv,
    measure_from_pairs,
    measure_to_csv,
    projected_entropy,
    xi_of,
)
from rwre_lab.walk import PathRecord, base_kernel, mean_velocity, simulate_path

step_lists = st.lists(st.integers(min_value=0, max_value=3), min_size=1, max_size=60)


def d2_path(step_idx):
    return PathRecord(start=np.zeros(2, np.int64), steps=np.array(step_idx, np.int8))


class TestAccumulate:
    def test_right_walk_single_class(self):
        model = make_model(1, 0.3, [[0.7, 0.3]], [1.0])
        env = EnvironmentRealization(model, seed=0)
        p = PathRecord(start=np.zeros(1, np.int64), steps=np.zeros(8, np.int8))
        mu = accumulate(p, env)
        assert mu.counts[0, 0] == 8 and mu.n == 8

    def test_total_equals_path_length(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=1)
        p = d2_path([0, 3])
        assert accumulate(p, env).n == 2

    def test_empty_path(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=1)
        with pytest.raises(EmptyMeasure):
            accumulate(d2_path([]), env)

    def test_base_walk_conditionals_match_rows(self, drifted_mixture_d1):
        env = EnvironmentRealization(drifted_mixture_d1, seed=7)
        p = simulate_path(env, base_kernel(), 40_000, substream(50, 0))
        mu = accumulate(p, env)
        cond = mu.step_conditional()
        marg = mu.class_marginal()
        table = drifted_mixture_d1.law.prob_table()
        for k in range(2):
            n_k = mu.counts[k].sum()
            assert n_k > 1000
            for z in range(2):
                se = math.sqrt(table[k, z] * (1 - table[k, z]) / n_k)
                assert abs(cond[k, z] - table[k, z]) < 4 * se
        assert marg == pytest.approx([0.5, 0.5], abs=0.05)

    def test_merge_is_concatenation(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=2)
        p1 = d2_path([0, 1, 2])
        p2 = d2_path([3, 3])
        merged = accumulate(p1, env).merge(accumulate(p2, env))
        assert merged.n == 5
        both = accumulate(d2_path([0, 1, 2]), env).counts + accumulate(p2, env).counts
        assert np.array_equal(merged.counts, both)

    def test_from_pairs_matches_accumulate(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=3)
        p = d2_path([0, 2, 1, 0, 3])
        classes = env.site_components(p.positions()[:-1])
        mu = measure_from_pairs(classes, p.steps, 1, 2)
        assert np.array_equal(mu.counts, accumulate(p, env).counts)


class TestXi:
    def test_point_mass(self):
        mu = EmpiricalMeasure(np.array([[5, 0, 0, 0]]))
        assert xi_of(mu) == pytest.approx([1.0, 0.0])

    def test_symmetric_zero(self):
        mu = EmpiricalMeasure(np.array([[3, 3, 2, 2]]))
        assert xi_of(mu) == pytest.approx([0.0, 0.0])

    @given(step_idx=step_lists)
    @settings(max_examples=80)
    def test_equals_mean_velocity(self, classical_d2, step_idx):
        env = EnvironmentRealization(classical_d2, seed=4)
        p = d2_path(step_idx)
        assert xi_of(accumulate(p, env)) == pytest.approx(
            mean_velocity(p), abs=1e-12
        )

    def test_empty(self):
        with pytest.raises(EmptyMeasure):
            xi_of(EmpiricalMeasure(np.zeros((1, 4), dtype=int)))


class TestProjectedEntropy:
    def test_matched_counts_zero(self, classical_d1):
        mu = EmpiricalMeasure(np.array([[7, 3]]))  # exactly the base row
        assert projected_entropy(mu, classical_d1) == pytest.approx(0.0, abs=1e-15)

    def test_point_mass_at_floor(self, classical_d1):
        # all mass on the delta-probability step
        mu = EmpiricalMeasure(np.array([[0, 11]]))
        assert projected_entropy(mu, classical_d1) == pytest.approx(
            -math.log(classical_d1.delta)
        )

    def test_base_walk_entropy_vanishes(self, drifted_mixture_d1):
        env = EnvironmentRealization(drifted_mixture_d1, seed=8)
        p = simulate_path(env, base_kernel(), 20_000, substream(51, 0))
        h = projected_entropy(accumulate(p, env), drifted_mixture_d1)
        # chi-square scaling: KL of fitted multinomial ~ alphabet/(2n)
        assert 0.0 <= h < 20 * 4 / (2 * p.n)

    @given(
        counts=st.lists(
            st.lists(st.integers(min_value=0, max_value=30), min_size=4, max_size=4),
            min_size=2,
            max_size=2,
        )
    )
    @settings(max_examples=100)
    def test_gibbs_nonnegative(self, nestling_d2, counts):
        mu = EmpiricalMeasure(np.array(counts))
        if mu.n == 0:
            return
        assert projected_entropy(mu, nestling_d2) >= 0.0


class TestBalance:
    def test_single_class_zero(self, classical_d2):
        env = EnvironmentRealization(classical_d2, seed=5)
        assert marginal_balance(d2_path([0, 1, 2, 3]), env) == 0.0

    @given(step_idx=step_lists)
    @settings(max_examples=80)
    def test_telescoping_bound(self, nestling_d2, step_idx):
        env = EnvironmentRealization(nestling_d2, seed=6)
        p = d2_path(step_idx)
        K = nestling_d2.law.n_components
        assert marginal_balance(p, env) <= K / p.n + 1e-15

    def test_decays_with_length(self, nestling_d2):
        env = EnvironmentRealization(nestling_d2, seed=7)
        rng = substream(52, 0)
        short = simulate_path(env, base_kernel(), 50, rng)
        long = simulate_path(env, base_kernel(), 5000, rng)
        assert marginal_balance(long, env) <= marginal_balance(short, env) + 1e-12
        assert marginal_balance(long, env) <= 2 / 5000


class TestCsv:
    def test_round_trip(self, tmp_path):
        mu = EmpiricalMeasure(np.array([[1, 2, 3, 4], [0, 5, 0, 7]]))
        f = tmp_path / "mu.csv"
        measure_to_csv(mu, f)
        back = measure_from_csv(f, 2, 2)
        assert np.array_equal(back.counts, mu.counts)
