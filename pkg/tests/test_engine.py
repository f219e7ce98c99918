import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.engine import (
    Cache,
    EstimatorSummary,
    RunManifest,
    Stopwatch,
    derive_id,
    run_parallel,
    stable_hash,
    substream,
)
from rwre_lab.errors import TaskError

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestSubstream:
    def test_deterministic(self):
        a = substream(123, 7).random(5)
        b = substream(123, 7).random(5)
        assert np.array_equal(a, b)

    def test_distinct_ids_distinct_streams(self):
        a = substream(123, 0).random(100)
        b = substream(123, 1).random(100)
        assert not np.array_equal(a, b)

    def test_pairwise_correlation_smoke(self):
        n = 10_000
        a = substream(9, 0).random(n)
        b = substream(9, 1).random(n)
        r = np.corrcoef(a, b)[0, 1]
        assert abs(r) < 4.0 / np.sqrt(n)

    def test_derive_id_stable(self):
        assert derive_id("h", (1, 2, 3)) == derive_id("h", (1, 2, 3))
        assert derive_id("h", (1, 2, 3)) != derive_id("h", (1, 2, 4))


class TestEstimatorSummary:
    @given(st.lists(finite, min_size=2, max_size=40), st.integers(1, 39))
    def test_merge_matches_pooled(self, xs, cut):
        cut = min(cut, len(xs) - 1)
        a = EstimatorSummary.from_samples(xs[:cut])
        b = EstimatorSummary.from_samples(xs[cut:])
        merged = a.merge(b)
        pooled = EstimatorSummary.from_samples(xs)
        assert merged.count == pooled.count
        assert merged.total == pytest.approx(pooled.total, rel=1e-12, abs=1e-9)
        assert merged.total_sq == pytest.approx(pooled.total_sq, rel=1e-12, abs=1e-9)

    def test_moments_match_numpy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 2.0, size=1000)
        s = EstimatorSummary.from_samples(x)
        assert s.mean == pytest.approx(x.mean())
        assert s.variance == pytest.approx(x.var(ddof=1), rel=1e-10)
        assert s.stderr == pytest.approx(x.std(ddof=1) / np.sqrt(x.size), rel=1e-10)

    def test_ci_widens_with_level(self):
        s = EstimatorSummary.from_samples(np.arange(100.0))
        lo95, hi95 = s.ci(0.95)
        lo99, hi99 = s.ci(0.99)
        assert lo99 < lo95 < hi95 < hi99

    def test_batch_means_sees_correlation(self):
        # AR(1) with strong positive correlation: naive iid stderr lies low
        rng = np.random.default_rng(1)
        n, rho = 20_000, 0.95
        eps = rng.normal(size=n)
        x = np.empty(n)
        x[0] = eps[0]
        for i in range(1, n):
            x[i] = rho * x[i - 1] + np.sqrt(1 - rho**2) * eps[i]
        naive = EstimatorSummary.from_samples(x)
        batched = EstimatorSummary.from_samples(x, batch_size=500)
        assert batched.stderr > 3 * naive.stderr
        assert batched.mean == pytest.approx(x.mean())

    def test_merge_batch_size_mismatch(self):
        a = EstimatorSummary.from_samples([1.0, 2.0], batch_size=1)
        b = EstimatorSummary.from_samples([1.0, 2.0], batch_size=2)
        with pytest.raises(ValueError):
            a.merge(b)


class TestRunParallel:
    def test_ordered_results(self):
        tasks = [lambda i=i: i * i for i in range(10)]
        assert run_parallel(tasks) == [i * i for i in range(10)]

    def test_threaded_matches_sequential(self):
        def make(i):
            def task():
                rng = substream(55, i)
                return float(rng.random(1000).sum())

            return task

        tasks = [make(i) for i in range(16)]
        seq = run_parallel(tasks, n_jobs=1)
        par = run_parallel(tasks, n_jobs=4)
        assert seq == par

    def test_reduce_in_task_order(self):
        tasks = [lambda i=i: [i] for i in range(5)]
        acc = run_parallel(tasks, reduce=lambda a, b: a + b, n_jobs=3)
        assert acc == [0, 1, 2, 3, 4]

    def test_failure_attribution(self):
        def boom():
            raise RuntimeError("nope")

        with pytest.raises(TaskError) as exc:
            run_parallel([lambda: 1, boom, lambda: 3])
        assert exc.value.task_id == 1


class TestCache:
    def test_roundtrip(self, tmp_path):
        c = Cache(tmp_path)
        key = {"op": "blocks", "seed": 1}
        c.put(key, {"S": np.arange(3)})
        out = c.get(key)
        assert np.array_equal(out["S"], np.arange(3))

    def test_corrupt_entry_recomputed(self, tmp_path):
        c = Cache(tmp_path)
        key = {"op": "x"}
        c.put(key, 42)
        path = c._path(key)
        path.write_bytes(b"garbage" * 10)
        calls = []

        def produce():
            calls.append(1)
            return 43

        assert c.get_or_compute(key, produce) == 43
        assert calls == [1]
        assert c.get(key) == 43

    def test_get_or_compute_hits(self, tmp_path):
        c = Cache(tmp_path)
        calls = []

        def produce():
            calls.append(1)
            return "v"

        assert c.get_or_compute({"k": 1}, produce) == "v"
        assert c.get_or_compute({"k": 1}, produce) == "v"
        assert len(calls) == 1


class TestManifest:
    def test_hash_key_order_invariant(self):
        assert stable_hash({"a": 1, "b": [2, 3]}) == stable_hash({"b": [2, 3], "a": 1})
        assert stable_hash({"a": 1}) != stable_hash({"a": 2})

    def test_manifest_written(self, tmp_path):
        m = RunManifest(config={"model": {"dimension": 1}}, master_seed=7)
        with Stopwatch() as sw:
            pass
        m.wall_time_s = sw.elapsed
        out = tmp_path / "manifest.json"
        m.write(out)
        text = out.read_text()
        assert "config_hash" in text and "master_seed" in text and "version" in text

    def test_numpy_values_hashable(self):
        h = stable_hash({"theta": np.array([0.5, 0.0]), "n": np.int64(3)})
        assert isinstance(h, str) and len(h) == 64
