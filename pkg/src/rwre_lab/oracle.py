"""Exact reference computations used as ground truth in tests.

Three independent routes live here: closed forms for walks in a constant
environment, exhaustive enumeration of the averaged moment generating
function at small n (exact mixture moments per visited site), and a
transfer-operator iteration for the quenched MGF on a frozen realization.
None of them share code with the Monte Carlo estimators they check.
"""

from __future__ import annotations

import math
from functools import partial

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .engine import run_parallel
from .environment import (
    EnvironmentModel,
    EnvironmentRealization,
    TransitionVector,
    step_vectors,
)
from .errors import TooLarge

# enumeration touches (2d)^n leaves; 2^25 of them is the agreed ceiling
MAX_ENUM_BITS = 25.0
# transfer-operator patch has (2n+1)^d states
MAX_DP_STATES = 4_000_000


def classical_lmgf(p: TransitionVector, theta) -> float:
    """log sum_z p_z e^{<theta,z>}: the growth rate when every site is p."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    tz = step_vectors(p.d).astype(np.float64) @ theta
    return float(logsumexp(tz, b=p.probs))


def classical_grad(p: TransitionVector, theta) -> np.ndarray:
    """Gradient of classical_lmgf: the drift of the tilted kernel."""
    return classical_tilt(p, theta).drift()


def classical_tilt(p: TransitionVector, theta) -> TransitionVector:
    """p_z e^{<theta,z>} renormalized."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    tz = step_vectors(p.d).astype(np.float64) @ theta
    w = p.probs * np.exp(tz - tz.max())
    return TransitionVector(w / w.sum())


def classical_rate(p: TransitionVector, xi) -> float:
    """Legendre transform sup_theta {<theta,xi> - classical_lmgf(p,theta)}.

    Velocities outside the closed unit l1 ball are unreachable: +inf.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    if np.abs(xi).sum() > 1.0 + 1e-12:
        return math.inf

    def objective(theta):
        return classical_lmgf(p, theta) - float(theta @ xi)

    def grad(theta):
        return classical_grad(p, theta) - xi

    res = minimize(objective, np.zeros(p.d), jac=grad, method="BFGS")
    return float(-res.fun)


def path_weight(model: EnvironmentModel, step_idx) -> float:
    """Averaged probability of one step sequence.

    The environment is i.i.d. across sites, so the weight factorizes over
    visited sites into exact mixture moments of the per-site visit counts.
    Revisits are what separate this from a product of mean-kernel entries.
    """
    d = model.dimension
    vecs = step_vectors(d)
    table = model.law.prob_table()
    counts: dict[tuple, np.ndarray] = {}
    x = np.zeros(d, dtype=np.int64)
    for s in np.asarray(step_idx, dtype=np.int64):
        key = tuple(x)
        c = counts.setdefault(key, np.zeros(2 * d))
        c[s] += 1
        x = x + vecs[s]
    total = 1.0
    for c in counts.values():
        total *= float(model.law.weights @ np.prod(table**c, axis=1))
    return total


def enumerate_averaged_mgf(
    model: EnvironmentModel, theta, n: int, n_jobs: int = 1
) -> float:
    """Exact E[exp<theta, X_n>] under the averaged path law.

    Depth-first over all (2d)^n step sequences with the weight maintained
    incrementally: per visited site a vector of per-component probability
    products, so extending a path by one step costs one ratio of mixture
    moments. Leaf contributions are combined with compensated summation in
    a fixed branch order, so the result is bit-stable and independent of
    n_jobs.
    """
    d = model.dimension
    two_d = 2 * d
    if n * math.log2(two_d) > MAX_ENUM_BITS:
        raise TooLarge(f"(2d)^n = {two_d}^{n} paths exceeds the enumeration budget")
    if n == 0:
        return 1.0
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    tz = step_vectors(d).astype(np.float64) @ theta
    ffac = tuple(math.exp(t) for t in tz)
    table = model.law.prob_table()
    cols = tuple(tuple(table[:, s]) for s in range(two_d))
    w = tuple(float(x) for x in model.law.weights)
    # pack sites into one integer: coordinates stay in [-n, n], n <= 25
    deltas = []
    for i in range(d):
        deltas.append(64**i)
        deltas.append(-(64**i))
    deltas = tuple(deltas)
    origin = sum(32 * 64**i for i in range(d))

    def branch_total(s0: int) -> float:
        u: dict[int, tuple] = {origin: cols[s0]}
        acc = [0.0, 0.0]  # running Kahan (sum, compensation)

        def rec(key: int, depth: int, weight: float, tfac: float):
            if depth == n:
                y = weight * tfac - acc[1]
                t = acc[0] + y
                acc[1] = (t - acc[0]) - y
                acc[0] = t
                return
            for s in range(two_d):
                old = u.get(key)
                if old is None:
                    new = cols[s]
                    old_m = 1.0
                else:
                    new = tuple(a * b for a, b in zip(old, cols[s]))
                    old_m = sum(a * b for a, b in zip(w, old))
                new_m = sum(a * b for a, b in zip(w, new))
                u[key] = new
                rec(key + deltas[s], depth + 1, weight * (new_m / old_m), tfac * ffac[s])
                if old is None:
                    del u[key]
                else:
                    u[key] = old

        m0 = sum(a * b for a, b in zip(w, cols[s0]))
        rec(origin + deltas[s0], 1, m0, ffac[s0])
        return acc[0]

    parts = run_parallel([partial(branch_total, s) for s in range(two_d)], n_jobs=n_jobs)
    total, comp = 0.0, 0.0
    for p in parts:
        y = p - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def enumerate_quenched_mgf(env: EnvironmentRealization, theta, n: int) -> float:
    """Exact log E_o^omega[exp<theta, X_n>] for one frozen realization.

    Transfer-operator iteration on the radius-n patch around the origin;
    the walk cannot leave it in n steps, so the sum is exact.
    """
    d = env.model.dimension
    side = 2 * n + 1
    if side**d > MAX_DP_STATES:
        raise TooLarge(f"patch has {side}^{d} states, budget {MAX_DP_STATES}")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    tz = step_vectors(d).astype(np.float64) @ theta
    grids = np.meshgrid(*[np.arange(-n, n + 1)] * d, indexing="ij")
    sites = np.stack([g.ravel() for g in grids], axis=1)
    comp = env.site_components(sites).reshape((side,) * d)
    table = env.model.law.prob_table()
    v = np.zeros((side,) * d)
    v[(n,) * d] = 1.0
    full = slice(None)
    for _ in range(n):
        vn = np.zeros_like(v)
        for s in range(2 * d):
            axis, fwd = divmod(s, 2)
            flow = v * table[comp, s] * math.exp(tz[s])
            src = [full] * d
            dst = [full] * d
            if fwd == 0:  # +e_axis
                src[axis], dst[axis] = slice(0, side - 1), slice(1, side)
            else:
                src[axis], dst[axis] = slice(1, side), slice(0, side - 1)
            vn[tuple(dst)] += flow[tuple(src)]
        v = vn
    return float(np.log(v.sum()))
