"""Growth-rate and rate-function estimation from regeneration blocks.

The averaged growth rate lambda(theta) is pinned as the root in lambda of
E[exp{<theta,S> - lambda*T}] = 1 over the block sample; the functional is
strictly decreasing in lambda (T >= 1), so bisection on an a-priori bracket
always lands. The gradient is the ratio estimator E[S w]/E[T w], and rate
functions come out of Legendre duality by solving grad = xi in theta.

Everything here reuses one immutable BlockSample across theta and lambda, so
the estimated maps are smooth in their arguments (common random numbers) and
solves are deterministic given the sample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import substream
from .environment import EnvironmentModel, EnvironmentRealization
from .errors import (
    BracketFailure,
    DegenerateDenominator,
    InsufficientSamples,
    NonfiniteWeight,
)
from .regeneration import BlockSample
from .walk import simulate_batch, theta_increments

_EXP_SHIFT_THRESHOLD = 50.0


@dataclass(frozen=True)
class ThetaPoint:
    """One solved dual point: theta, lambda estimate, gradient, errors."""

    theta: np.ndarray
    lam: float
    lambda_stderr: float
    grad: np.ndarray
    grad_stderr: np.ndarray
    n_blocks: int


@dataclass(frozen=True)
class RateQuery:
    """Legendre transform result at one velocity xi."""

    xi: np.ndarray
    I_value: float
    theta_star: np.ndarray | None
    converged: bool
    grad_gap: float = math.nan  # |grad(theta_star) - xi|_inf at exit


@dataclass(frozen=True)
class QuenchedLmgfEstimate:
    """(1/n) log of an inner-MC average in one fixed realization."""

    theta: np.ndarray
    n: int
    value: float
    stderr: float
    reps: int
    env_seed: int


def _weights(blocks: BlockSample, theta: np.ndarray, lam: float):
    """exp{<theta,S> - lam*T} per block, computed around the max exponent.

    Returns (weights, shift) with true weight = weights * e^shift; shift is 0
    unless the raw exponent exceeds the overflow threshold.
    """
    if len(blocks) == 0:
        raise InsufficientSamples("no blocks")
    expo = blocks.S @ theta - lam * blocks.T
    if not np.isfinite(expo).all():
        raise NonfiniteWeight("non-finite exponent <theta,S> - lambda*T")
    shift = 0.0
    m = float(expo.max())
    if m > _EXP_SHIFT_THRESHOLD:
        shift = m
    return np.exp(expo - shift), shift


def renewal_functional(
    blocks: BlockSample, theta, lam: float
) -> tuple[float, float]:
    """Sample mean and stderr of exp{<theta,S> - lambda*T} over blocks."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    w, shift = _weights(blocks, theta, lam)
    scale = math.exp(shift) if shift else 1.0
    mean = float(w.mean()) * scale
    if len(blocks) < 2:
        return mean, math.inf
    se = float(w.std(ddof=1)) / math.sqrt(len(blocks)) * scale
    return mean, se


def solve_lambda_a(blocks: BlockSample, theta, tol: float = 1e-8) -> ThetaPoint:
    """Root of the renewal identity in lambda, by bisection plus one polish.

    The bracket [min_b <theta,S_b>/T_b - 1, |theta| max|S| / min T + 1]
    pins the root for any nonempty sample: at the left edge every block
    weight exceeds e, at the right edge every weight is below 1/e.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if len(blocks) == 0:
        raise InsufficientSamples("no blocks")
    ratios = (blocks.S @ theta) / blocks.T
    lo = float(ratios.min()) - 1.0
    hi = (
        float(np.linalg.norm(theta))
        * float(np.abs(blocks.S).max())
        / float(blocks.T.min())
        + 1.0
    )

    def f(lam: float) -> float:
        w, shift = _weights(blocks, theta, lam)
        return float(np.log(w.mean()) + shift)  # log-mean: same root, stabler

    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo > 0.0 > f_hi):
        raise BracketFailure(
            f"renewal functional not bracketed on [{lo:.6g}, {hi:.6g}]: "
            f"log-means ({f_lo:.3g}, {f_hi:.3g})"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    # one Newton step: d/dlam E[w] = -E[T w]; the e^shift scale cancels
    w, shift = _weights(blocks, theta, lam)
    lam += (float(w.mean()) - math.exp(-shift)) / float((blocks.T * w).mean())

    w, shift = _weights(blocks, theta, lam)
    scale = math.exp(shift) if shift else 1.0
    B = len(blocks)
    se_mean = float(w.std(ddof=1)) / math.sqrt(B) * scale if B > 1 else math.inf
    denom = float((blocks.T * w).mean()) * scale
    lam_se = se_mean / denom if denom > 0 else math.inf
    grad, grad_se = grad_lambda_a(blocks, theta, lam, with_stderr=True)
    return ThetaPoint(
        theta=theta,
        lam=float(lam),
        lambda_stderr=float(lam_se),
        grad=grad,
        grad_stderr=grad_se,
        n_blocks=B,
    )


def grad_lambda_a(
    blocks: BlockSample, theta, lam: float, with_stderr: bool = False
):
    """Componentwise ratio E[S w] / E[T w] with  w = exp{<theta,S> - lam T}.

    with_stderr adds the delta-method stderr of each ratio component.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    w, _ = _weights(blocks, theta, lam)  # common scale cancels in the ratio
    tw = blocks.T * w
    denom = float(tw.mean())
    if denom <= 0.0:
        raise DegenerateDenominator("E[T w] = 0")
    sw = blocks.S * w[:, None]
    grad = sw.mean(axis=0) / denom
    if not with_stderr:
        return grad
    # Var(a/b) ~ Var(a - r b) / (b_mean^2 n) per component, r the ratio
    B = len(blocks)
    resid = sw - grad[None, :] * tw[:, None]
    if B > 1:
        se = resid.std(axis=0, ddof=1) / (denom * math.sqrt(B))
    else:
        se = np.full(blocks.d, math.inf)
    return grad, se


def direct_lmgf_averaged(
    model: EnvironmentModel,
    theta,
    n: int,
    reps: int,
    rng: np.random.Generator,
    chunk: int = 65536,
) -> tuple[float, float]:
    """(1/n) log mean of e^{<theta,X_n>} over fresh (environment, walk) pairs.

    Stderr by the delta method on the log of the mean.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    d = model.dimension
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < reps:
        W = min(chunk, reps - done)
        seeds = rng.integers(0, 2**64, size=W, dtype=np.uint64)
        steps = simulate_batch(model, seeds, np.zeros(d, np.int64), n, rng=rng)
        vals = np.exp(theta_increments(steps.reshape(-1), theta).reshape(W, n).sum(axis=1))
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        done += W
    mean = total / reps
    var = max(total_sq / reps - mean * mean, 0.0) * reps / max(reps - 1, 1)
    se_mean = math.sqrt(var / reps)
    return math.log(mean) / n, se_mean / (mean * n)


def direct_lmgf_quenched(
    env: EnvironmentRealization,
    theta,
    n: int,
    reps: int,
    rng: np.random.Generator,
    chunk: int = 65536,
) -> QuenchedLmgfEstimate:
    """Inner Monte Carlo over walks in the one fixed realization."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    d = env.model.dimension
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < reps:
        W = min(chunk, reps - done)
        seeds = np.full(W, env.seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
        steps = simulate_batch(env.model, seeds, np.zeros(d, np.int64), n, rng=rng)
        vals = np.exp(theta_increments(steps.reshape(-1), theta).reshape(W, n).sum(axis=1))
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        done += W
    mean = total / reps
    var = max(total_sq / reps - mean * mean, 0.0) * reps / max(reps - 1, 1)
    se_mean = math.sqrt(var / reps)
    return QuenchedLmgfEstimate(
        theta=theta,
        n=n,
        value=math.log(mean) / n,
        stderr=se_mean / (mean * n),
        reps=reps,
        env_seed=env.seed,
    )


def rate_I_a(
    blocks: BlockSample,
    xi,
    tol: float = 1e-6,
    max_iter: int = 40,
    fd_step: float = 1e-4,
) -> RateQuery:
    """Legendre transform I(xi) = sup_theta {<theta,xi> - lambda(theta)}.

    Velocities outside the closed l1 unit ball are unreachable: I = +inf,
    exactly (no solve attempted). Inside, solve grad lambda(theta) = xi by
    damped Newton with a finite-difference Hessian; each evaluation re-solves
    lambda on the same block sample. Near flat pieces of lambda the equation
    may be unsolvable; the best dual value found is returned with
    converged=False rather than a guess.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    d = blocks.d
    if np.abs(xi).sum() > 1.0 + 1e-12:
        return RateQuery(xi=xi, I_value=math.inf, theta_star=None, converged=True)

    def grad_at(theta: np.ndarray) -> tuple[np.ndarray, ThetaPoint]:
        pt = solve_lambda_a(blocks, theta, tol=1e-10)
        return pt.grad, pt

    theta = np.zeros(d)
    g, pt = grad_at(theta)
    best = (float(np.abs(g - xi).max()), theta.copy(), pt)
    for _ in range(max_iter):
        gap = float(np.abs(g - xi).max())
        if gap < best[0]:
            best = (gap, theta.copy(), pt)
        if gap <= tol:
            break
        # Hessian of lambda by forward differences of the gradient
        H = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            gj, _ = grad_at(theta + e)
            H[:, j] = (gj - g) / fd_step
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, xi - g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, xi - g, rcond=None)[0]
        # backtrack until the residual shrinks
        scale = 1.0
        for _ in range(25):
            g_new, pt_new = grad_at(theta + scale * step)
            if np.abs(g_new - xi).max() < gap:
                theta = theta + scale * step
                g, pt = g_new, pt_new
                break
            scale *= 0.5
        else:
            break  # no descent direction left: flat piece or boundary
    gap = float(np.abs(g - xi).max())
    if gap < best[0]:
        best = (gap, theta.copy(), pt)
    gap, theta, pt = best
    return RateQuery(
        xi=xi,
        I_value=float(theta @ xi - pt.lam),
        theta_star=theta,
        converged=bool(gap <= tol),
        grad_gap=gap,
    )


def solve_theta_grid(
    blocks: BlockSample, thetas, tol: float = 1e-8
) -> list[ThetaPoint]:
    """solve_lambda_a across a grid, sharing the one block sample."""
    return [solve_lambda_a(blocks, th, tol=tol) for th in thetas]


def write_theta_csv(points: list[ThetaPoint], path) -> None:
    d = points[0].theta.size if points else 0
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [f"theta_{i+1}" for i in range(d)]
            + ["lambda", "lambda_stderr"]
            + [f"grad_{i+1}" for i in range(d)]
            + ["n_blocks"]
        )
        for p in points:
            w.writerow(
                [*map(float, p.theta), p.lam, p.lambda_stderr, *map(float, p.grad), p.n_blocks]
            )


def write_rate_csv(queries: list[RateQuery], path) -> None:
    d = queries[0].xi.size if queries else 0
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [f"xi_{i+1}" for i in range(d)]
            + ["I"]
            + [f"theta_star_{i+1}" for i in range(d)]
            + ["converged"]
        )
        for q in queries:
            star = (
                [*map(float, q.theta_star)] if q.theta_star is not None else [""] * d
            )
            w.writerow([*map(float, q.xi), q.I_value, *star, q.converged])
