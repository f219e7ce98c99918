"""Reproducibility plumbing: keyed RNG substreams, summaries, cache, manifests.

Every stochastic routine takes a Generator argument; substream() builds them
from (master_seed, task_id) pairs with a counter-based bit generator so task
results do not depend on scheduling or on how work is batched.
"""

from __future__ import annotations

import hashlib
import json
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import CorruptEntry, TaskError

_MASK = 0xFFFFFFFFFFFFFFFF


def substream(master_seed: int, task_id: int) -> np.random.Generator:
    """Independent, reproducible stream keyed by (master_seed, task_id)."""
    key = [master_seed & _MASK, task_id & _MASK]
    return np.random.Generator(np.random.Philox(key=key))


def derive_id(*parts) -> int:
    """Collapse a tuple of hashable parts into a 64-bit task id."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass
class EstimatorSummary:
    """Mergeable first/second moment accumulator.

    Merging is exact in the sense that (count, total, total_sq) add
    componentwise, so any partition of the sample reduces to the same state.
    """

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    batch_size: int = 1

    @classmethod
    def from_samples(cls, x, batch_size: int = 1) -> "EstimatorSummary":
        """Summarize samples; batch_size > 1 averages consecutive batches
        first (batch means), which is the honest variance for correlated
        sequences. Trailing remainder samples are dropped in batch mode."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if batch_size > 1:
            nb = x.size // batch_size
            x = x[: nb * batch_size].reshape(nb, batch_size).mean(axis=1)
        return cls(
            count=int(x.size),
            total=float(x.sum()),
            total_sq=float((x * x).sum()),
            batch_size=batch_size,
        )

    def merge(self, other: "EstimatorSummary") -> "EstimatorSummary":
        if self.batch_size != other.batch_size:
            raise ValueError("cannot merge summaries with different batch sizes")
        return EstimatorSummary(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
            self.batch_size,
        )

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")

    @property
    def variance(self) -> float:
        """Sample variance of the (batch-mean) entries."""
        if self.count < 2:
            return float("nan")
        m = self.mean
        v = (self.total_sq - self.count * m * m) / (self.count - 1)
        return max(v, 0.0)

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return float("inf")
        return float(np.sqrt(self.variance / self.count))

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = NormalDist().inv_cdf(0.5 + level / 2.0)
        return (self.mean - z * self.stderr, self.mean + z * self.stderr)


def run_parallel(
    tasks: Sequence[Callable[[], Any]],
    reduce: Callable[[Any, Any], Any] | None = None,
    n_jobs: int = 1,
):
    """Run tasks, collect results in task-index order, optionally fold them.

    The reduction order is the task order regardless of completion order, so
    a parallel run reproduces the sequential result bit for bit whenever each
    task owns its substream.
    """
    if n_jobs <= 1:
        results = []
        for i, t in enumerate(tasks):
            try:
                results.append(t())
            except Exception as e:  # noqa: BLE001 - attributed and re-raised
                raise TaskError(i, str(e)) from e
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(t) for t in tasks]
            results = []
            for i, f in enumerate(futures):
                try:
                    results.append(f.result())
                except Exception as e:  # noqa: BLE001
                    raise TaskError(i, str(e)) from e
    if reduce is None:
        return results
    acc = results[0]
    for r in results[1:]:
        acc = reduce(acc, r)
    return acc


def stable_hash(obj) -> str:
    """Deterministic hex digest of a JSON-able structure."""
    blob = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(blob).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"unhashable config entry {type(o)}")


class Cache:
    """Content-addressed pickle store with integrity checks.

    Entries are keyed by the stable hash of a description dict. A checksum
    mismatch raises CorruptEntry inside get(); get_or_compute treats that as
    a miss and recomputes.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: dict) -> Path:
        return self.root / f"{stable_hash(key)}.pkl"

    def get(self, key: dict):
        path = self._path(key)
        if not path.exists():
            return None
        raw = path.read_bytes()
        if len(raw) < 32:
            raise CorruptEntry(str(path))
        digest, payload = raw[:32], raw[32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CorruptEntry(str(path))
        return pickle.loads(payload)

    def put(self, key: dict, value) -> None:
        payload = pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)
        digest = hashlib.sha256(payload).digest()
        self._path(key).write_bytes(digest + payload)

    def get_or_compute(self, key: dict, fn: Callable[[], Any]):
        try:
            hit = self.get(key)
        except CorruptEntry:
            hit = None
        if hit is not None:
            return hit
        value = fn()
        self.put(key, value)
        return value


PACKAGE_VERSION = "0.1.0"


@dataclass
class RunManifest:
    """What a run was: enough to reproduce it and to detect config drift."""

    config: dict
    master_seed: int
    version: str = PACKAGE_VERSION
    params: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def config_hash(self) -> str:
        return stable_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "version": self.version,
            "params": self.params,
            "wall_time_s": self.wall_time_s,
            "config": self.config,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)
        )


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False
