"""Harmonic-function estimation from level-hitting walks.

h_n at a site is the quenched expectation, over base walks started there in
the frozen realization, of exp{<theta, X_{H_n} - X_0> - lambda*H_n} on the
event that the level-n hitting time H_n is a regeneration time; g_n adds the
requirement that the walk never dips below its start. A single walk yields
every level's record at once, so all levels up to n_max share one batch of
walks, and the Cesaro average over levels 2..n_max is the working estimate.

All of this runs on a vectorized multi-site engine: one stepping pass serves
many (site, walk) pairs, with early exit once every walk has either confirmed
the top level or hit the step cap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import minimum_filter1d

from .engine import derive_id, substream
from .environment import EnvironmentRealization, step_vectors
from .errors import (
    BudgetExhausted,
    HorizonExhausted,
    MissingNeighbor,
    NonpositiveH,
)

DEFAULT_CHUNK = 32


def window_min_after(levels: np.ndarray, horizon: int) -> np.ndarray:
    """wm[:, t] = min(levels[:, t+1 : t+1+horizon]).

    Entries whose window extends past the end of the array are padding
    artifacts; callers must mask them out (they are never confirmable).
    """
    la = minimum_filter1d(
        levels, size=horizon, axis=1, mode="nearest", origin=-(horizon // 2)
    )
    out = np.empty_like(levels)
    out[:, :-1] = la[:, 1:]
    out[:, -1] = levels[:, -1]
    return out


@dataclass
class LevelWalkStats:
    """Per-walk confirmed weights for every level of one engine run."""

    h_weights: np.ndarray  # (walks, n_levels) float, 0 where unconfirmed
    g_weights: np.ndarray  # as h_weights, never-below-start variant
    reached: np.ndarray  # (walks, n_levels) bool: H_i observed within cap
    confirmable: np.ndarray  # bool: full confirm window observed
    steps_run: int

    @property
    def n_levels(self) -> int:
        return self.h_weights.shape[1]

    def exhausted_fraction(self, level: int) -> float:
        return float(1.0 - self.reached[:, level - 1].mean())


def default_step_cap(n_levels: int, confirm_horizon: int) -> int:
    return 8 * n_levels + 2 * confirm_horizon


def level_walks_multi(
    env: EnvironmentRealization,
    sites: np.ndarray,
    theta,
    lam: float,
    n_levels: int,
    walks: int,
    confirm_horizon: int,
    uniforms: np.ndarray,
    step_cap: int | None = None,
    axis: int = 0,
) -> list[LevelWalkStats]:
    """One stepping pass for `walks` base walks from each of several sites.

    uniforms is (step_cap, n_sites*walks), site-major columns. The loop exits
    as soon as every walk has observed its confirm window past the top level,
    so batching sites costs at most the slowest site's horizon.
    """
    model = env.model
    d = model.dimension
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, d)
    n_sites = sites.shape[0]
    W = n_sites * walks
    cap = default_step_cap(n_levels, confirm_horizon) if step_cap is None else step_cap
    if uniforms.shape != (cap, W):
        raise ValueError(f"uniforms shape {uniforms.shape}, expected {(cap, W)}")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))

    vecs = step_vectors(d)
    lev_inc = vecs[:, axis].astype(np.int64)
    tz = vecs.astype(np.float64) @ theta
    cum_rows = np.cumsum(model.law.prob_table(), axis=1)

    pos = np.repeat(sites, walks, axis=0)
    levels = np.zeros((W, cap + 1), dtype=np.int64)
    tproj = np.zeros((W, cap + 1))
    pm = np.zeros(W, dtype=np.int64)
    t_top = np.full(W, -1, dtype=np.int64)
    t = 0
    while t < cap:
        stop = min(t + DEFAULT_CHUNK, cap)
        while t < stop:
            comp = env.site_components(pos)
            s = (cum_rows[comp] < uniforms[t][:, None]).sum(axis=1)
            np.minimum(s, 2 * d - 1, out=s)
            levels[:, t + 1] = levels[:, t] + lev_inc[s]
            tproj[:, t + 1] = tproj[:, t] + tz[s]
            pos += vecs[s]
            np.maximum(pm, levels[:, t + 1], out=pm)
            t_top[(t_top < 0) & (pm >= n_levels)] = t + 1
            t += 1
        if ((t_top >= 0) & (t_top + confirm_horizon <= t)).all():
            break
    T = t
    levels = levels[:, : T + 1]
    tproj = tproj[:, : T + 1]

    # prefix max is nondecreasing and passes through every record level, so
    # H_i = #{t: prefix_max[t] < i}; beyond T means the level was never hit
    pmax = np.maximum.accumulate(levels, axis=1)
    pmin = np.minimum.accumulate(levels, axis=1)
    wm = window_min_after(levels, confirm_horizon)

    idx = np.arange(W)
    h_w = np.zeros((W, n_levels))
    g_w = np.zeros((W, n_levels))
    reached = np.zeros((W, n_levels), dtype=bool)
    confirmable = np.zeros((W, n_levels), dtype=bool)
    for i in range(1, n_levels + 1):
        H = (pmax < i).sum(axis=1)
        hit = H <= T
        ok_window = hit & (H + confirm_horizon <= T)
        Hc = np.minimum(H, T)
        confirmed = ok_window & (wm[idx, Hc] >= i)
        weight = np.exp(tproj[idx, Hc] - lam * Hc)
        h_w[:, i - 1] = np.where(confirmed, weight, 0.0)
        end = np.minimum(Hc + confirm_horizon, T)
        g_ok = confirmed & (pmin[idx, end] >= 0)
        g_w[:, i - 1] = np.where(g_ok, weight, 0.0)
        reached[:, i - 1] = hit
        confirmable[:, i - 1] = ok_window

    return [
        LevelWalkStats(
            h_weights=h_w[j * walks : (j + 1) * walks],
            g_weights=g_w[j * walks : (j + 1) * walks],
            reached=reached[j * walks : (j + 1) * walks],
            confirmable=confirmable[j * walks : (j + 1) * walks],
            steps_run=T,
        )
        for j in range(n_sites)
    ]


def run_level_walks(
    env: EnvironmentRealization,
    site,
    theta,
    lam: float,
    n_levels: int,
    walks: int,
    confirm_horizon: int,
    rng: np.random.Generator,
    step_cap: int | None = None,
) -> LevelWalkStats:
    """Single-site engine run with freshly drawn uniforms."""
    cap = default_step_cap(n_levels, confirm_horizon) if step_cap is None else step_cap
    u = rng.random((cap, walks))
    stats = level_walks_multi(
        env, np.asarray(site), theta, lam, n_levels, walks, confirm_horizon, u, cap
    )[0]
    if not stats.reached[:, -1].any():
        raise HorizonExhausted(
            f"no walk of {walks} reached level {n_levels} within {cap} steps"
        )
    return stats


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    m = float(x.mean())
    se = float(x.std(ddof=1)) / math.sqrt(x.size) if x.size > 1 else math.inf
    return m, se


def estimate_h_n(
    env, site, theta, lam, n, walks, confirm_horizon, rng, step_cap=None
) -> tuple[float, float]:
    """Mean confirmed weight at level n; walks that never confirm count 0."""
    stats = run_level_walks(
        env, site, theta, lam, n, walks, confirm_horizon, rng, step_cap
    )
    return _mean_se(stats.h_weights[:, n - 1])


def estimate_g_n(
    env, site, theta, lam, n, walks, confirm_horizon, rng, step_cap=None
) -> tuple[float, float]:
    """As estimate_h_n, on the event the walk also never dips below start."""
    stats = run_level_walks(
        env, site, theta, lam, n, walks, confirm_horizon, rng, step_cap
    )
    return _mean_se(stats.g_weights[:, n - 1])


def cesaro_weights(stats: LevelWalkStats) -> np.ndarray:
    """Per-walk average of levels 2..n_max (the Cesaro combination)."""
    if stats.n_levels < 2:
        raise ValueError("Cesaro average needs n_max >= 2")
    return stats.h_weights[:, 1:].mean(axis=1)


def cesaro_h(
    env, site, theta, lam, n_max, walks, confirm_horizon, rng, step_cap=None
) -> tuple[float, float]:
    """Cesaro average of h_i over i = 2..n_max from one shared walk batch."""
    stats = run_level_walks(
        env, site, theta, lam, n_max, walks, confirm_horizon, rng, step_cap
    )
    return _mean_se(cesaro_weights(stats))


@dataclass
class HarmonicEstimate:
    """Per-site h values for one (theta, lambda); never extrapolated."""

    theta: np.ndarray
    lam: float
    n_max: int
    walks: int
    confirm_horizon: int
    values: dict = field(default_factory=dict)  # site tuple -> (h, stderr)
    g_values: dict = field(default_factory=dict)

    def value(self, site) -> tuple[float, float]:
        key = tuple(int(c) for c in np.asarray(site).ravel())
        if key not in self.values:
            raise MissingNeighbor(f"h not estimated at {key}")
        return self.values[key]

    def to_csv(self, path) -> None:
        d = self.theta.size
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [f"x_{i+1}" for i in range(d)]
                + ["h", "stderr", "g", "n_max", "walks"]
            )
            for key, (h, se) in sorted(self.values.items()):
                g = self.g_values.get(key, ("", ""))[0]
                w.writerow([*key, h, se, g, self.n_max, self.walks])


class HarmonicSource:
    """Budgeted, cached h provider for one (env, theta, lambda).

    stream_mode picks how per-site walk uniforms are drawn:
      "site"   - an independent substream keyed by the site coordinates; the
                 natural choice for residual diagnostics (independent errors).
      "shared" - one uniform block reused at every site (common random
                 numbers). Neighboring estimates then share their Monte Carlo
                 error, which largely cancels in the h ratios of a tilted
                 kernel row; the default for tilted sampling.
    Both are deterministic per site, so cache hits never depend on query
    order or batch composition.
    """

    def __init__(
        self,
        env: EnvironmentRealization,
        theta,
        lam: float,
        n_max: int = 8,
        walks: int = 200,
        confirm_horizon: int = 32,
        master_seed: int = 0,
        stream_mode: str = "site",
        max_sites: int | None = None,
        step_cap: int | None = None,
    ):
        if stream_mode not in ("site", "shared"):
            raise ValueError(f"unknown stream_mode {stream_mode!r}")
        self.env = env
        self.theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        self.lam = float(lam)
        self.n_max = int(n_max)
        self.walks = int(walks)
        self.confirm_horizon = int(confirm_horizon)
        self.master_seed = int(master_seed)
        self.stream_mode = stream_mode
        self.max_sites = max_sites
        self.step_cap = (
            default_step_cap(self.n_max, self.confirm_horizon)
            if step_cap is None
            else int(step_cap)
        )
        self._cache: dict[tuple, tuple[float, float]] = {}
        self._shared_u: np.ndarray | None = None
        self.n_exhausted_walks = 0
        self.n_estimated_sites = 0

    def _key(self, site) -> tuple:
        return tuple(int(c) for c in np.asarray(site).ravel())

    def _site_uniforms(self, key: tuple) -> np.ndarray:
        if self.stream_mode == "shared":
            if self._shared_u is None:
                rng = substream(self.master_seed, derive_id("h-shared"))
                self._shared_u = rng.random((self.step_cap, self.walks))
            return self._shared_u
        rng = substream(self.master_seed, derive_id("h-site", key))
        return rng.random((self.step_cap, self.walks))

    def prefetch(self, sites: Iterable) -> None:
        """Estimate h at every not-yet-cached site in one engine pass."""
        missing = []
        seen = set()
        for s in sites:
            key = self._key(s)
            if key not in self._cache and key not in seen:
                missing.append(key)
                seen.add(key)
        if not missing:
            return
        if (
            self.max_sites is not None
            and self.n_estimated_sites + len(missing) > self.max_sites
        ):
            raise BudgetExhausted(
                f"h budget {self.max_sites} sites; "
                f"{self.n_estimated_sites} used, {len(missing)} more requested"
            )
        u = np.hstack([self._site_uniforms(k) for k in missing])
        stats = level_walks_multi(
            self.env,
            np.asarray(missing, dtype=np.int64),
            self.theta,
            self.lam,
            self.n_max,
            self.walks,
            self.confirm_horizon,
            u,
            self.step_cap,
        )
        for key, st in zip(missing, stats):
            h, se = _mean_se(cesaro_weights(st))
            self.n_exhausted_walks += int((~st.reached[:, -1]).sum())
            self.n_estimated_sites += 1
            if h <= 0.0:
                raise NonpositiveH(
                    f"h estimate at {key} is {h}; walks or step cap undersized"
                )
            self._cache[key] = (h, se)

    def value(self, site) -> tuple[float, float]:
        key = self._key(site)
        if key not in self._cache:
            self.prefetch([key])
        return self._cache[key]

    def known(self, site) -> bool:
        return self._key(site) in self._cache

    def as_estimate(self) -> HarmonicEstimate:
        out = HarmonicEstimate(
            theta=self.theta,
            lam=self.lam,
            n_max=self.n_max,
            walks=self.walks,
            confirm_horizon=self.confirm_horizon,
        )
        out.values.update(self._cache)
        return out


def harmonic_residual(
    env: EnvironmentRealization,
    site,
    h_values: Mapping[tuple, tuple[float, float]] | HarmonicEstimate | HarmonicSource,
    theta,
    lam: float,
) -> tuple[float, float]:
    """h(x) - sum_z pi_x(z) e^{<theta,z>-lambda} h(x+z), raw and h(x)-relative.

    Needs h at the site and all 2d neighbors; refuses to fill gaps.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    d = env.model.dimension
    site = np.asarray(site, dtype=np.int64)

    def lookup(x) -> float:
        key = tuple(int(c) for c in x)
        if isinstance(h_values, (HarmonicEstimate, HarmonicSource)):
            if isinstance(h_values, HarmonicSource) and not h_values.known(key):
                raise MissingNeighbor(f"h not estimated at {key}")
            return h_values.value(key)[0]
        if key not in h_values:
            raise MissingNeighbor(f"h not estimated at {key}")
        v = h_values[key]
        return float(v[0] if isinstance(v, tuple) else v)

    h0 = lookup(site)
    row = env.kernel_rows(site[None, :])[0]
    vecs = step_vectors(d)
    tz = vecs.astype(np.float64) @ theta
    acc = 0.0
    for z in range(2 * d):
        acc += row[z] * math.exp(tz[z] - lam) * lookup(site + vecs[z])
    resid = h0 - acc
    return resid, resid / h0
