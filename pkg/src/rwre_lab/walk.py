"""Quenched walk simulation under the base kernel or any environment kernel.

Two entry points: simulate_path runs one walk through an arbitrary KernelSpec;
simulate_batch advances many walkers at once (vectorized across walkers, one
numpy pass per time step) for kernels that are a function of the site class.
All bulk estimators in the package sit on simulate_batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .environment import (
    EnvironmentRealization,
    Step,
    TransitionVector,
    site_uniforms,
    step_vectors,
    steps,
)
from .errors import DimensionMismatch, EmptyPath, ZeroProbabilityStep

BASE_KERNEL_TAG = "base"


@dataclass(frozen=True)
class KernelSpec:
    """Named environment kernel: (realization, site) -> transition row."""

    tag: str
    row_fn: Callable[[EnvironmentRealization, np.ndarray], np.ndarray] | None = None

    def row(self, env: EnvironmentRealization, site: np.ndarray) -> np.ndarray:
        if self.row_fn is None:
            return env.kernel_rows(site[None, :])[0]
        return np.asarray(self.row_fn(env, site), dtype=np.float64)


def base_kernel() -> KernelSpec:
    return KernelSpec(BASE_KERNEL_TAG, None)


def class_table_kernel(tag: str, table: np.ndarray) -> KernelSpec:
    """Kernel that depends on the site only through its component class.

    table is (K, 2d): row k is used at sites of class k. Rows need not be
    the base rows (e.g. exponentially tilted rows), but must be stochastic.
    """
    table = np.asarray(table, dtype=np.float64)

    def row_fn(env, site):
        return table[env.site_component(site)]

    return KernelSpec(tag, row_fn)


@dataclass
class PathRecord:
    """A walk: integer start site and step indices in canonical order."""

    start: np.ndarray
    steps: np.ndarray
    kernel_tag: str = BASE_KERNEL_TAG
    _positions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.int64)
        self.steps = np.asarray(self.steps, dtype=np.int8)

    @property
    def d(self) -> int:
        return self.start.size

    @property
    def n(self) -> int:
        return self.steps.size

    def positions(self) -> np.ndarray:
        """(n+1, d) visited sites, X_0 first. Cached after first call."""
        if self._positions is None:
            vecs = step_vectors(self.d)
            disp = np.vstack([np.zeros((1, self.d), np.int64), vecs[self.steps]])
            self._positions = self.start + np.cumsum(disp, axis=0)
        return self._positions

    def levels(self, axis: int = 0) -> np.ndarray:
        """(n+1,) integer heights <X_i - X_0, e_axis>."""
        inc = axis_increments(self.steps, axis, self.d)
        out = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(inc, out=out[1:])
        return out

    def projected_levels(self, u: np.ndarray) -> np.ndarray:
        """(n+1,) float heights <X_i - X_0, u> for an arbitrary direction."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.d,):
            raise DimensionMismatch(f"direction shape {u.shape}")
        tz = step_vectors(self.d).astype(np.float64) @ u
        out = np.zeros(self.n + 1)
        np.cumsum(tz[self.steps], out=out[1:])
        return out


def axis_increments(step_idx: np.ndarray, axis: int, d: int) -> np.ndarray:
    """Map step indices to their e_axis increment in {-1, 0, +1}."""
    table = np.zeros(2 * d, dtype=np.int64)
    table[2 * axis] = 1
    table[2 * axis + 1] = -1
    return table[step_idx]


def theta_increments(step_idx: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Map step indices to <theta, z>."""
    d = theta.size
    tz = step_vectors(d).astype(np.float64) @ theta
    return tz[step_idx]


def simulate_path(
    env: EnvironmentRealization,
    kernel: KernelSpec,
    n_steps: int,
    rng: np.random.Generator,
    start: Sequence[int] | None = None,
) -> PathRecord:
    """One sequential walk. Use simulate_batch for anything bulk."""
    d = env.model.dimension
    x0 = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, np.int64)
    x = x0.copy()
    out = np.empty(n_steps, dtype=np.int8)
    vecs = step_vectors(d)
    u = rng.random(n_steps)
    for t in range(n_steps):
        row = kernel.row(env, x)
        # same selection rule as simulate_batch so shared uniforms agree
        s = int((np.cumsum(row) < u[t]).sum())
        s = min(s, 2 * d - 1)  # guard u landing on the float roundoff tail
        out[t] = s
        x += vecs[s]
    return PathRecord(start=x0, steps=out, kernel_tag=kernel.tag)


def simulate_batch(
    model,
    env_seeds,
    starts,
    n_steps: int,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
    table: np.ndarray | None = None,
) -> np.ndarray:
    """Advance W walkers n_steps under a class-table kernel, vectorized.

    env_seeds: scalar or (W,) uint64, one environment per walker.
    starts: (d,) or (W, d) integer start sites.
    uniforms: optional (n_steps, W) block for common-random-number reuse;
      drawn from rng when absent.
    table: optional (K, 2d) kernel rows per class; defaults to the base law.

    Returns (W, n_steps) int8 step indices.
    """
    d = model.dimension
    if table is None:
        table = model.law.prob_table()
    cum_rows = np.cumsum(np.asarray(table, np.float64), axis=1)
    cum_weights = np.cumsum(model.law.weights)[:-1]
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim == 1:
        starts = starts[None, :]
    seeds = np.asarray(env_seeds, dtype=np.uint64)
    W = max(starts.shape[0], seeds.size if seeds.ndim else 1)
    if uniforms is None:
        if rng is None:
            raise ValueError("need rng or uniforms")
        uniforms = rng.random((n_steps, W))
    pos = np.broadcast_to(starts, (W, d)).copy()
    vecs = step_vectors(d)
    out = np.empty((W, n_steps), dtype=np.int8)
    for t in range(n_steps):
        u_site = site_uniforms(seeds, pos)
        idx = np.searchsorted(cum_weights, u_site, side="right")
        rows = cum_rows[idx]
        s = (rows < uniforms[t][:, None]).sum(axis=1)
        np.minimum(s, 2 * d - 1, out=s)
        out[:, t] = s
        pos += vecs[s]
    return out


def mean_velocity(path: PathRecord) -> np.ndarray:
    """(X_n - X_0)/n."""
    if path.n == 0:
        raise EmptyPath("velocity of an empty path")
    pos = path.positions()
    return (pos[-1] - pos[0]).astype(np.float64) / path.n


def log_likelihood_ratio(
    path: PathRecord,
    env: EnvironmentRealization,
    kernel_num: KernelSpec,
    kernel_den: KernelSpec,
) -> float:
    """sum_i log(num(X_i, Z_{i+1}) / den(X_i, Z_{i+1})) along the path."""
    if path.n == 0:
        raise EmptyPath("likelihood ratio of an empty path")
    pos = path.positions()
    total = 0.0
    for t in range(path.n):
        s = int(path.steps[t])
        a = kernel_num.row(env, pos[t])[s]
        b = kernel_den.row(env, pos[t])[s]
        if b <= 0.0:
            raise ZeroProbabilityStep(f"denominator kernel forbids step at t={t}")
        if a <= 0.0:
            total = -np.inf
            continue
        total += float(np.log(a) - np.log(b))
    return total


def batch_log_likelihood_ratio(
    model,
    env_seeds,
    step_idx: np.ndarray,
    table_num: np.ndarray,
    table_den: np.ndarray,
    starts=None,
) -> np.ndarray:
    """Vectorized per-walker log-ratio for class-table kernels.

    step_idx: (W, n) from simulate_batch; tables: (K, 2d).
    """
    d = model.dimension
    W, n = step_idx.shape
    starts = np.zeros((W, d), np.int64) if starts is None else np.asarray(starts)
    if starts.ndim == 1:
        starts = np.broadcast_to(starts, (W, d))
    cum_weights = np.cumsum(model.law.weights)[:-1]
    seeds = np.asarray(env_seeds, dtype=np.uint64)
    log_ratio = np.log(np.asarray(table_num)) - np.log(np.asarray(table_den))
    pos = starts.copy()
    vecs = step_vectors(d)
    out = np.zeros(W)
    for t in range(n):
        u_site = site_uniforms(seeds, pos)
        idx = np.searchsorted(cum_weights, u_site, side="right")
        s = step_idx[:, t].astype(np.intp)
        out += log_ratio[idx, s]
        pos += vecs[s]
    return out
