"""Exponentially tilted walk kernels and the identities they certify.

The tilted kernel at a site reweights the base row by e^{<theta,z>-lambda}
times the ratio of harmonic estimates at the two endpoints, then renormalizes.
With the exact harmonic function the renormalization would be a no-op, so the
raw row sums are kept as a diagnostic of h error.

Sampling this kernel gives a chain whose velocity, entropy production, and
conditioned-block statistics must agree with independent estimates computed
from regeneration blocks; the certificate ops below package those checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .engine import EstimatorSummary, substream
from .environment import (
    EnvironmentRealization,
    SiteLawMixture,
    TransitionVector,
    step_vectors,
    steps,
)
from .errors import InsufficientSamples, WindowViolation
from .harmonic import HarmonicSource
from .lmgf_rate import solve_lambda_a
from .measures import EmpiricalMeasure, measure_from_pairs
from .regeneration import SimConfig, confirmed_times_from_levels, sample_blocks
from .walk import PathRecord, simulate_batch


@dataclass(frozen=True)
class VisitCounts:
    """Per-step visit history at one site: counts over the 2d steps."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.size % 2 != 0:
            raise ValueError(f"counts shape {c.shape}")
        if (c < 0).any():
            raise ValueError("negative visit count")
        object.__setattr__(self, "counts", c)

    @property
    def n_o(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_dict(cls, d: int, named: dict) -> "VisitCounts":
        c = np.zeros(2 * d, dtype=np.int64)
        for s in steps(d):
            c[s.index] = named.get(s.name, 0)
        return cls(c)


def bayes_kernel_q(law: SiteLawMixture, counts) -> TransitionVector:
    """Posterior-predictive step kernel after observing `counts` exits.

    q(z) = E[pi(0,z) prod_w pi(0,w)^{n_w}] / E[prod_w pi(0,w)^{n_w}], exact
    for a finite mixture. Zero counts reduce to the mean kernel.
    """
    from .environment import site_moment

    c = counts.counts if isinstance(counts, VisitCounts) else np.asarray(counts)
    den = site_moment(law, c)
    q = np.empty(2 * law.d)
    for z in range(2 * law.d):
        bump = c.astype(np.float64).copy()
        bump[z] += 1
        q[z] = site_moment(law, bump) / den
    return TransitionVector(q)


class TiltedKernel:
    """h-transform of the base kernel at one (theta, lambda) in one env.

    Rows are cached per site. raw_sums tracks the pre-normalization row sums;
    their spread around 1 measures harmonic-estimation error.
    """

    def __init__(
        self,
        env: EnvironmentRealization,
        theta,
        lam: float,
        h_source=None,
        n_max: int = 6,
        walks: int = 200,
        confirm_horizon: int = 20,
        master_seed: int = 0,
        speculative: bool = True,
    ):
        self.env = env
        self.theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        self.lam = float(lam)
        d = env.model.dimension
        self.vecs = step_vectors(d)
        tz = self.vecs.astype(np.float64) @ self.theta
        self.exp_factor = np.exp(tz - self.lam)
        if h_source is None:
            h_source = HarmonicSource(
                env,
                self.theta,
                self.lam,
                n_max=n_max,
                walks=walks,
                confirm_horizon=confirm_horizon,
                master_seed=master_seed,
                stream_mode="shared",
            )
        self.h_source = h_source
        self._rows: dict[tuple, tuple[np.ndarray, float]] = {}
        self.raw_sums: list[float] = []
        mean_row = env.model.law.mean_kernel().probs
        self._ahead = self.vecs[int(np.argmax(mean_row * self.exp_factor))]
        self._speculative = speculative and hasattr(h_source, "prefetch")

    @property
    def d(self) -> int:
        return self.env.model.dimension

    def row(self, site) -> tuple[np.ndarray, float]:
        """(renormalized probabilities, raw row sum) at the site."""
        site = np.asarray(site, dtype=np.int64)
        key = tuple(int(c) for c in site)
        cached = self._rows.get(key)
        if cached is not None:
            return cached
        if self._speculative:
            # fetch this neighborhood plus the one a modal step ahead in a
            # single engine pass; the chain usually moves there next
            ahead = site + self._ahead
            targets = [site, ahead]
            targets += [site + z for z in self.vecs]
            targets += [ahead + z for z in self.vecs]
            self.h_source.prefetch(targets)
        h0 = self._h(site)
        raw = self.env.kernel_rows(site[None, :])[0] * self.exp_factor
        for z in range(2 * self.d):
            raw[z] *= self._h(site + self.vecs[z]) / h0
        raw_sum = float(raw.sum())
        probs = raw / raw_sum
        self._rows[key] = (probs, raw_sum)
        self.raw_sums.append(raw_sum)
        return probs, raw_sum

    def _h(self, site) -> float:
        v = self.h_source.value(site)
        return float(v[0] if isinstance(v, tuple) else v)

    def row_sum_report(self) -> dict:
        s = np.asarray(self.raw_sums)
        if s.size == 0:
            return {"count": 0, "mean": math.nan, "mean_abs_dev": math.nan}
        return {
            "count": int(s.size),
            "mean": float(s.mean()),
            "mean_abs_dev": float(np.abs(s - 1.0).mean()),
        }


def tilted_kernel_at(tk: TiltedKernel, site) -> TransitionVector:
    probs, _ = tk.row(site)
    return TransitionVector(probs)


@dataclass
class TiltedChainStats:
    """Post-burn-in statistics of one tilted-chain run."""

    burn_in: int
    n_steps: int
    measure: EmpiricalMeasure
    kl_series: np.ndarray  # per-step KL(tilted row || base row)
    increments: np.ndarray  # (n_steps, d) step vectors
    row_sum_report: dict

    def velocity(self, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        d = self.increments.shape[1]
        mean = np.empty(d)
        se = np.empty(d)
        for i in range(d):
            s = EstimatorSummary.from_samples(self.increments[:, i], batch_size)
            mean[i] = s.mean
            se[i] = s.stderr
        return mean, se


def _pilot_burn_in(tk: TiltedKernel, rng, pilot_steps: int = 256) -> int:
    """10x the mean spacing of confirmed level records in a pilot run."""
    pos = np.zeros(tk.d, dtype=np.int64)
    levels = np.zeros(pilot_steps + 1, dtype=np.int64)
    for t in range(pilot_steps):
        probs, _ = tk.row(pos)
        u = rng.random()
        s = min(int((np.cumsum(probs) < u).sum()), 2 * tk.d - 1)
        pos = pos + tk.vecs[s]
        levels[t + 1] = levels[t] + tk.vecs[s, 0]
    horizon = min(32, pilot_steps // 4)
    times = confirmed_times_from_levels(levels, horizon)
    if times.size >= 2:
        spacing = float(np.diff(times).mean())
    elif times.size == 1:
        spacing = float(times[0])
    else:
        spacing = float(pilot_steps)
    return int(min(max(10 * spacing, 64), 20 * pilot_steps))


def sample_tilted_path(
    tk: TiltedKernel,
    n_steps: int,
    burn_in: int | None = None,
    rng: np.random.Generator | None = None,
    start=None,
) -> tuple[PathRecord, TiltedChainStats]:
    """Run the tilted chain; collect statistics only after burn_in steps."""
    if rng is None:
        rng = substream(0, 0)
    if burn_in is None:
        burn_in = _pilot_burn_in(tk, rng)
    d = tk.d
    pos = (
        np.zeros(d, dtype=np.int64)
        if start is None
        else np.asarray(start, dtype=np.int64).copy()
    )
    start_site = pos.copy()
    total = burn_in + n_steps
    step_idx = np.empty(total, dtype=np.int8)
    sites = np.empty((n_steps, d), dtype=np.int64)
    rows = np.empty((n_steps, 2 * d))
    log_table = np.log(tk.env.model.law.prob_table())
    for t in range(total):
        probs, _ = tk.row(pos)
        if t >= burn_in:
            k = t - burn_in
            sites[k] = pos
            rows[k] = probs
        u = rng.random()
        s = min(int((np.cumsum(probs) < u).sum()), 2 * d - 1)
        step_idx[t] = s
        pos = pos + tk.vecs[s]
    tail = step_idx[burn_in:]
    classes = tk.env.site_components(sites)
    kl = (rows * (np.log(rows) - log_table[classes])).sum(axis=1)
    measure = measure_from_pairs(
        classes, tail.astype(np.intp), tk.env.model.law.n_components, d
    )
    stats = TiltedChainStats(
        burn_in=burn_in,
        n_steps=n_steps,
        measure=measure,
        kl_series=kl,
        increments=tk.vecs[tail].astype(np.float64),
        row_sum_report=tk.row_sum_report(),
    )
    return PathRecord(start_site, step_idx, kernel_tag="tilted"), stats


def entropy_rate(
    tk: TiltedKernel, stats: TiltedChainStats, batch_size: int = 64
) -> tuple[float, float]:
    """Ergodic average of per-site KL(tilted row || base row), batch means."""
    s = EstimatorSummary.from_samples(stats.kl_series, batch_size)
    return s.mean, s.stderr


@dataclass
class TiltBudgets:
    """Sampling budget for certificate and conditioning runs."""

    n_blocks: int = 20000
    chain_steps: int = 100000
    burn_in: int | None = None
    walks: int = 200
    n_max: int = 6
    confirm_horizon: int = 20
    env_seed: int | None = None
    block_sim: SimConfig | None = None


@dataclass
class MinimizerCertificate:
    theta: np.ndarray
    lam: float
    lambda_stderr: float
    xi_hat: np.ndarray
    xi_stderr: np.ndarray
    grad_hat: np.ndarray
    grad_stderr: np.ndarray
    entropy: float
    entropy_stderr: float
    duality_gap: float
    combined_stderr: float
    row_sum_report: dict
    budgets: dict

    def gap_ok(self, n_sigma: float = 4.0) -> bool:
        return self.duality_gap <= n_sigma * self.combined_stderr

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "lambda": self.lam,
            "lambda_stderr": self.lambda_stderr,
            "xi_hat": self.xi_hat.tolist(),
            "xi_stderr": self.xi_stderr.tolist(),
            "grad_hat": self.grad_hat.tolist(),
            "grad_stderr": self.grad_stderr.tolist(),
            "entropy": self.entropy,
            "entropy_stderr": self.entropy_stderr,
            "duality_gap": self.duality_gap,
            "combined_stderr": self.combined_stderr,
            "row_sum_report": self.row_sum_report,
            "budgets": self.budgets,
        }


def minimizer_certificate(
    model,
    theta,
    budgets: TiltBudgets,
    rng: np.random.Generator,
    blocks=None,
    return_chain: bool = False,
):
    """Assemble the duality check |H - (<theta,xi> - lambda)| with stderrs.

    Block estimates give lambda and grad; an independent tilted chain gives
    xi_hat and the entropy. Pass a pre-sampled BlockSample to reuse one.
    With return_chain the tuple (cert, kernel, stats, path) comes back so the
    chain can feed further diagnostics without a second long run.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    sim = budgets.block_sim or SimConfig()
    if blocks is None:
        blocks, _ = sample_blocks(model, budgets.n_blocks, sim, rng)
    pt = solve_lambda_a(blocks, theta)
    env_seed = (
        int(rng.integers(0, 2**63)) if budgets.env_seed is None else budgets.env_seed
    )
    env = EnvironmentRealization(model, env_seed)
    tk = TiltedKernel(
        env,
        theta,
        pt.lam,
        n_max=budgets.n_max,
        walks=budgets.walks,
        confirm_horizon=budgets.confirm_horizon,
        master_seed=env_seed,
    )
    path, stats = sample_tilted_path(tk, budgets.chain_steps, budgets.burn_in, rng)
    xi_hat, xi_se = stats.velocity()
    H_hat, H_se = entropy_rate(tk, stats)
    gap = abs(H_hat - (float(theta @ xi_hat) - pt.lam))
    combined = H_se + float(np.abs(theta) @ xi_se) + pt.lambda_stderr
    cert = MinimizerCertificate(
        theta=theta,
        lam=pt.lam,
        lambda_stderr=pt.lambda_stderr,
        xi_hat=xi_hat,
        xi_stderr=xi_se,
        grad_hat=pt.grad,
        grad_stderr=pt.grad_stderr,
        entropy=H_hat,
        entropy_stderr=H_se,
        duality_gap=gap,
        combined_stderr=combined,
        row_sum_report=stats.row_sum_report,
        budgets={
            "n_blocks": int(blocks.T.size),
            "chain_steps": budgets.chain_steps,
            "burn_in": stats.burn_in,
            "walks": budgets.walks,
            "n_max": budgets.n_max,
            "confirm_horizon": budgets.confirm_horizon,
            "env_seed": env_seed,
        },
    )
    if return_chain:
        return cert, tk, stats, path
    return cert


@dataclass(frozen=True)
class LocalObservable:
    """Observable for conditioned expectations, with a declared window.

    fn(env_view, site, next_steps) -> float, where next_steps is exactly the
    next K step indices and env_view only answers queries within levels
    [-N, +M] of the site (WindowViolation otherwise).
    """

    fn: Callable
    N: int = 0
    M: int = 0
    K: int = 0


class WindowedEnvView:
    """Realization view that enforces a level window around a base site."""

    def __init__(self, env: EnvironmentRealization, base_level: int, N: int, M: int):
        self._env = env
        self._lo = base_level - N
        self._hi = base_level + M

    def _check(self, site):
        lev = int(np.asarray(site)[0])
        if not self._lo <= lev <= self._hi:
            raise WindowViolation(
                f"query at level {lev} outside declared window "
                f"[{self._lo}, {self._hi}]"
            )

    def site_component(self, site) -> int:
        self._check(site)
        return self._env.site_component(site)

    def site_kernel(self, site):
        self._check(site)
        return self._env.site_kernel(site)


@dataclass
class ConditioningBudgets:
    replicas: int = 4000
    lam: float | None = None
    n_blocks: int = 20000
    confirm_horizon: int = 24
    max_steps: int = 384
    block_sim: SimConfig | None = None


def _conditioned_block_batch(
    model, theta, lam, nmk, budgets: ConditioningBudgets, rng
):
    """Simulate replicas, keep those that never undercut the origin level and
    show J confirmed regenerations, and return per-replica raw material."""
    N, M, K = nmk
    J = N + M + K + 1
    L = budgets.max_steps
    horizon = budgets.confirm_horizon
    d = model.dimension
    vecs = step_vectors(d)
    lev_inc = vecs[:, 0]
    R = budgets.replicas
    out = []
    n_rejected_backtrack = 0
    n_rejected_short = 0
    attempts = 0
    while len(out) < R and attempts < 40:
        attempts += 1
        want = R - len(out)
        batch = int(want * 2.2) + 32
        seeds = rng.integers(0, 2**63, size=batch).astype(np.uint64)
        steps_r = simulate_batch(
            model, seeds, np.zeros(d, dtype=np.int64), L, rng=rng
        )
        levels = np.zeros((batch, L + 1), dtype=np.int64)
        np.cumsum(lev_inc[steps_r], axis=1, out=levels[:, 1:])
        for r in range(batch):
            if len(out) >= R:
                break
            times = confirmed_times_from_levels(levels[r], horizon)
            if times.size < J:
                n_rejected_short += 1
                continue
            tau_j = int(times[J - 1])
            if tau_j + K > L:
                n_rejected_short += 1
                continue
            if levels[r].min() < 0:
                n_rejected_backtrack += 1
                continue
            out.append((int(seeds[r]), steps_r[r], levels[r], times[:J]))
    if len(out) < R:
        raise InsufficientSamples(
            f"{len(out)}/{R} conditioned replicas after {attempts} batches"
        )
    diag = {
        "rejected_backtrack": n_rejected_backtrack,
        "rejected_short": n_rejected_short,
        "replicas": R,
    }
    return out, diag


def _ratio_stderr(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    value = float(num.mean() / den.mean())
    resid = num - value * den
    se = float(resid.std(ddof=1) / (math.sqrt(num.size) * den.mean()))
    return value, se


def conditioned_expectation(
    model,
    theta,
    f: LocalObservable,
    budgets: ConditioningBudgets,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Expectation of f under the velocity-conditioned path measure.

    Averages f over the (N+1)-th inter-record block, weighted by the
    exponential weight of the first J = N+M+K+1 blocks, normalized by the
    weighted mean duration of a single block.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    lam = budgets.lam
    if lam is None:
        blocks, _ = sample_blocks(
            model, budgets.n_blocks, budgets.block_sim or SimConfig(), rng
        )
        lam = solve_lambda_a(blocks, theta).lam
    d = model.dimension
    vecs = step_vectors(d)
    tz = vecs.astype(np.float64) @ theta
    reps, _ = _conditioned_block_batch(
        model, theta, lam, (f.N, f.M, f.K), budgets, rng
    )
    J = f.N + f.M + f.K + 1
    num = np.empty(len(reps))
    den = np.empty(len(reps))
    for i, (seed, steps_r, levels, times) in enumerate(reps):
        env = EnvironmentRealization(model, seed)
        tproj = np.concatenate([[0.0], np.cumsum(tz[steps_r])])
        tau_j = int(times[J - 1])
        tau_1 = int(times[0])
        w_j = math.exp(tproj[tau_j] - lam * tau_j)
        den[i] = tau_1 * math.exp(tproj[tau_1] - lam * tau_1)
        j_lo = 0 if f.N == 0 else int(times[f.N - 1])
        j_hi = int(times[f.N])
        pos = np.zeros(d, dtype=np.int64) + vecs[steps_r[:j_lo]].sum(axis=0)
        acc = 0.0
        for j in range(j_lo, j_hi):
            view = WindowedEnvView(env, int(levels[j]), f.N, f.M)
            # the next K steps out of time j start with steps_r[j]
            nxt = tuple(int(s) for s in steps_r[j : j + f.K])
            acc += float(f.fn(view, pos.copy(), nxt))
            pos = pos + vecs[steps_r[j]]
        num[i] = acc * w_j
    return _ratio_stderr(num, den)


def conditioned_cell_distribution(
    model,
    theta,
    budgets: ConditioningBudgets,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """All (component class, next step) cell values of the conditioned
    measure in one replica pass: the vector form of conditioned_expectation
    with f = indicator(class, step), window (0, 0, 1)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    lam = budgets.lam
    if lam is None:
        blocks, _ = sample_blocks(
            model, budgets.n_blocks, budgets.block_sim or SimConfig(), rng
        )
        lam = solve_lambda_a(blocks, theta).lam
    d = model.dimension
    K_comp = model.law.n_components
    vecs = step_vectors(d)
    tz = vecs.astype(np.float64) @ theta
    reps, diag = _conditioned_block_batch(model, theta, lam, (0, 0, 1), budgets, rng)
    R = len(reps)
    num = np.zeros((R, K_comp, 2 * d))
    den = np.empty(R)
    for i, (seed, steps_r, levels, times) in enumerate(reps):
        env = EnvironmentRealization(model, seed)
        tau_2 = int(times[1])
        tau_1 = int(times[0])
        tproj = float(tz[steps_r[:tau_2]].sum())
        w_j = math.exp(tproj - lam * tau_2)
        den[i] = tau_1 * math.exp(float(tz[steps_r[:tau_1]].sum()) - lam * tau_1)
        sites = np.zeros((tau_1, d), dtype=np.int64)
        np.cumsum(vecs[steps_r[: tau_1 - 1]], axis=0, out=sites[1:])
        classes = env.site_components(sites)
        for j in range(tau_1):
            num[i, classes[j], steps_r[j]] += w_j
    values = np.empty((K_comp, 2 * d))
    stderrs = np.empty((K_comp, 2 * d))
    for k in range(K_comp):
        for z in range(2 * d):
            values[k, z], stderrs[k, z] = _ratio_stderr(num[:, k, z], den)
    diag["raw_total"] = float(values.sum())
    diag["lambda"] = float(lam)
    return values, stderrs, diag
