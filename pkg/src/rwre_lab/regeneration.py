"""Regeneration structure of directionally transient walks.

A time j regenerates when the walk's height along the chosen axis is a strict
record and is never undercut afterwards. On a finite path "afterwards" means
the observed remainder, and times with fewer than confirm_horizon observed
subsequent steps are left unconfirmed; the false-confirmation probability of
a confirmed time decays exponentially in the observed look-ahead.

Blocks between consecutive confirmed times (discarding everything before the
first one) are the i.i.d. currency of every averaged estimator downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .environment import EnvironmentModel, classify_nestling, step_vectors
from .errors import (
    BudgetExhausted,
    InsufficientSamples,
    NestlingWithoutOverride,
    TooFewRegenerations,
)
from .walk import PathRecord, axis_increments, simulate_batch


def backtrack_time(path: PathRecord, axis: int = 0) -> int | None:
    """First time the height drops below its starting value; None if never."""
    lev = path.levels(axis)
    below = np.flatnonzero(lev < 0)
    return int(below[0]) if below.size else None


def confirmed_times_from_levels(levels: np.ndarray, confirm_horizon: int) -> np.ndarray:
    """Times j in [1, n - confirm_horizon] that are strict records never
    undercut in the observed remainder. levels is the (n+1,) height sequence."""
    n = levels.size - 1
    if n <= confirm_horizon:
        return np.empty(0, dtype=np.int64)
    prefix_max = np.maximum.accumulate(levels)
    # suffix_min[j] = min(levels[j+1:]); +inf past the end
    suffix_min = np.empty(levels.size, dtype=np.float64)
    suffix_min[-1] = np.inf
    suffix_min[:-1] = np.minimum.accumulate(levels[::-1])[::-1][1:]
    j = np.arange(1, n + 1)
    ok = (
        (levels[1:] > prefix_max[:-1])
        & (levels[1:] <= suffix_min[1:])
        & (j <= n - confirm_horizon)
    )
    return j[ok].astype(np.int64)


@dataclass(frozen=True)
class RegenerationRecord:
    """Confirmed regeneration times of one path along one axis."""

    times: np.ndarray
    axis: int
    confirm_horizon: int
    n_steps: int
    backtracked: bool  # did the height ever drop below the start

    @property
    def count(self) -> int:
        return int(self.times.size)


def detect_regenerations(
    path: PathRecord, confirm_horizon: int, axis: int = 0
) -> RegenerationRecord:
    lev = path.levels(axis)
    times = confirmed_times_from_levels(lev, confirm_horizon)
    return RegenerationRecord(
        times=times,
        axis=axis,
        confirm_horizon=confirm_horizon,
        n_steps=path.n,
        backtracked=bool((lev < 0).any()),
    )


@dataclass(frozen=True)
class RegenBlock:
    """One inter-regeneration block: duration, displacement, its steps."""

    duration: int
    displacement: np.ndarray
    steps: np.ndarray | None = None


class BlockSample:
    """Column store of regeneration blocks: S (B, d) and T (B,).

    Everything the renewal functional needs, mergeable by concatenation.
    """

    def __init__(self, S: np.ndarray, T: np.ndarray):
        self.T = np.asarray(T, dtype=np.int64)
        S = np.asarray(S, dtype=np.int64)
        self.S = S if S.ndim == 2 else S.reshape(self.T.size, -1)

    def __len__(self) -> int:
        return int(self.T.size)

    @property
    def d(self) -> int:
        return self.S.shape[1]

    def __iter__(self) -> Iterator[RegenBlock]:
        for i in range(len(self)):
            yield RegenBlock(int(self.T[i]), self.S[i])

    @classmethod
    def from_blocks(cls, blocks: Sequence[RegenBlock]) -> "BlockSample":
        S = np.stack([b.displacement for b in blocks])
        T = np.asarray([b.duration for b in blocks])
        return cls(S, T)

    def merge(self, other: "BlockSample") -> "BlockSample":
        return BlockSample(np.vstack([self.S, other.S]), np.concatenate([self.T, other.T]))

    def take(self, count: int) -> "BlockSample":
        return BlockSample(self.S[:count], self.T[:count])


def extract_blocks(
    path: PathRecord, record: RegenerationRecord, keep_steps: bool = False
) -> list[RegenBlock]:
    """Blocks between consecutive confirmed times; the walk before the first
    confirmed time has a different law and is dropped."""
    if record.count < 2:
        raise TooFewRegenerations(
            f"{record.count} confirmed times; need at least 2 for one block"
        )
    pos = path.positions()
    out = []
    t = record.times
    for a, b in zip(t[:-1], t[1:]):
        out.append(
            RegenBlock(
                duration=int(b - a),
                displacement=(pos[b] - pos[a]).copy(),
                steps=path.steps[a:b].copy() if keep_steps else None,
            )
        )
    return out


@dataclass
class SimConfig:
    """Budget knobs for trajectory-based block sampling."""

    trajectory_len: int = 4096
    batch_walkers: int = 64
    confirm_horizon: int | None = None  # default: 10 * ceil(1/delta) * d
    axis: int = 0
    max_total_steps: int = 500_000_000

    def horizon_for(self, model: EnvironmentModel) -> int:
        if self.confirm_horizon is not None:
            return int(self.confirm_horizon)
        return 10 * math.ceil(1.0 / model.delta) * model.dimension


def default_confirm_horizon(model: EnvironmentModel) -> int:
    return SimConfig().horizon_for(model)


def sample_blocks(
    model: EnvironmentModel,
    count: int,
    sim: SimConfig,
    rng: np.random.Generator,
    table: np.ndarray | None = None,
    allow_nestling: bool = False,
) -> tuple[BlockSample, dict]:
    """Sample `count` i.i.d. blocks from fresh environments.

    Each batch simulates sim.batch_walkers trajectories in independent
    environments, detects confirmed regeneration times per trajectory, and
    keeps the blocks between them. Nestling models regenerate too rarely for
    any accuracy claim; they are refused unless allow_nestling is set.
    """
    report = classify_nestling(model)
    if not report.nonnestling and not allow_nestling:
        raise NestlingWithoutOverride(
            "model is nestling along every direction; pass allow_nestling=True "
            "to sample anyway (no accuracy claim)"
        )
    horizon = sim.horizon_for(model)
    if sim.trajectory_len <= 2 * horizon:
        raise ValueError("trajectory_len must exceed twice the confirm horizon")
    S_parts, T_parts = [], []
    got = 0
    steps_spent = 0
    n_traj = 0
    n_candidates = 0
    n_confirmed = 0
    max_T = 0
    while got < count:
        if steps_spent >= sim.max_total_steps:
            raise BudgetExhausted(
                f"{steps_spent} steps simulated, {got}/{count} blocks found"
            )
        W = sim.batch_walkers
        seeds = rng.integers(0, 2**64, size=W, dtype=np.uint64)
        steps_idx = simulate_batch(
            model, seeds, np.zeros(model.dimension, np.int64),
            sim.trajectory_len, rng=rng, table=table,
        )
        steps_spent += W * sim.trajectory_len
        n_traj += W
        inc = axis_increments(steps_idx.ravel(), sim.axis, model.dimension).reshape(
            W, sim.trajectory_len
        )
        levels = np.zeros((W, sim.trajectory_len + 1), dtype=np.int64)
        np.cumsum(inc, axis=1, out=levels[:, 1:])
        vec_tab = step_vectors(model.dimension)
        for w in range(W):
            times = confirmed_times_from_levels(levels[w], horizon)
            # candidates without the horizon cut-off feed the discard stat
            all_times = confirmed_times_from_levels(levels[w], 0)
            n_candidates += all_times.size
            n_confirmed += times.size
            if times.size < 2:
                continue
            T_w = np.diff(times)
            cum = np.vstack(
                [np.zeros(model.dimension, np.int64), np.cumsum(vec_tab[steps_idx[w]], axis=0)]
            )
            S_w = cum[times[1:]] - cum[times[:-1]]
            S_parts.append(S_w)
            T_parts.append(T_w)
            got += T_w.size
            if T_w.size:
                max_T = max(max_T, int(T_w.max()))
    sample = BlockSample(np.vstack(S_parts), np.concatenate(T_parts)).take(count)
    diagnostics = {
        "n_trajectories": n_traj,
        "total_steps": steps_spent,
        "confirm_horizon": horizon,
        "blocks_found": got,
        "candidates_seen": int(n_candidates),
        "unconfirmed_tail_fraction": float(1.0 - n_confirmed / max(n_candidates, 1)),
        "max_duration": int(max(max_T, int(sample.T.max()) if len(sample) else 0)),
        "mean_duration": float(sample.T.mean()) if len(sample) else float("nan"),
        "nonnestling": bool(report.nonnestling),
    }
    return sample, diagnostics


@dataclass(frozen=True)
class TailReport:
    """Exponential-tail check of block durations via split log-survival fits."""

    decay_rate: float
    near_rate: float
    far_rate: float
    subexponential: bool
    n_blocks: int


def tau_tail_diagnostic(blocks: BlockSample, min_blocks: int = 1000) -> TailReport:
    """Fit the log-survival slope of T over a near and a far quantile range.

    The verdict is subexponential when the far-tail decay rate falls below
    half the near-tail rate; strongly exponential tails keep both rates close
    so the verdict is stable under sample growth at fixed thresholds.
    """
    if len(blocks) < min_blocks:
        raise InsufficientSamples(f"{len(blocks)} blocks < {min_blocks}")
    T = np.sort(blocks.T)
    n = T.size
    if T[0] == T[-1]:
        return TailReport(math.inf, math.inf, math.inf, False, n)

    def rate_on(q_lo: float, q_hi: float) -> float:
        lo = T[min(int(q_lo * n), n - 2)]
        hi = T[min(int(q_hi * n), n - 1)]
        if hi <= lo:
            hi = lo + 1
        ts = np.arange(lo, hi + 1)
        surv = 1.0 - np.searchsorted(T, ts, side="right") / n
        keep = surv > 0
        if keep.sum() < 2:
            return math.inf
        slope = np.polyfit(ts[keep], np.log(surv[keep]), 1)[0]
        return float(-slope)

    near = rate_on(0.50, 0.90)
    far = rate_on(0.90, 0.995)
    overall = rate_on(0.50, 0.995)
    return TailReport(
        decay_rate=overall,
        near_rate=near,
        far_rate=far,
        subexponential=bool(far < 0.5 * near),
        n_blocks=n,
    )
