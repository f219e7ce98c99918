"""Environment models: site laws, realizations, exact mixture moments.

A model is an i.i.d. field of transition vectors on the 2d nearest-neighbor
steps, drawn from a finite mixture of named components. A realization binds a
model to a seed; the component at a site is a pure function of (seed, site),
so environments are reproducible, shift-consistent, and never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import chi2

from .errors import DimensionMismatch, EllipticityViolation, SimplexViolation

_SIMPLEX_TOL = 1e-12

# SplitMix64 finalizer constants; the site hash chains one round per coordinate.
_M1 = np.uint64(0x9E3779B97F4A7C15)
_A = np.uint64(0xBF58476D1CE4E5B9)
_B = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _A
    z = (z ^ (z >> _S27)) * _B
    return z ^ (z >> _S31)


@dataclass(frozen=True, order=True)
class Step:
    """A signed unit step: axis in [0, d), sign in {-1, +1}."""

    axis: int
    sign: int

    def __post_init__(self):
        if self.axis < 0 or self.sign not in (-1, 1):
            raise ValueError(f"bad step ({self.axis}, {self.sign})")

    @property
    def index(self) -> int:
        # canonical order +e1, -e1, +e2, -e2, ...
        return 2 * self.axis + (0 if self.sign > 0 else 1)

    @property
    def name(self) -> str:
        return f"{'+' if self.sign > 0 else '-'}{self.axis + 1}"

    def __neg__(self) -> "Step":
        return Step(self.axis, -self.sign)

    def vec(self, d: int) -> np.ndarray:
        v = np.zeros(d, dtype=np.int64)
        v[self.axis] = self.sign
        return v


def steps(d: int) -> tuple[Step, ...]:
    """All 2d steps in canonical index order."""
    return tuple(Step(i, s) for i in range(d) for s in (1, -1))


def step_from_name(name: str, d: int) -> Step:
    sign = {"+": 1, "-": -1}.get(name[:1])
    try:
        axis = int(name[1:]) - 1
    except ValueError:
        axis = -1
    if sign is None or not 0 <= axis < d:
        raise ValueError(f"unknown step name {name!r} for d={d}")
    return Step(axis, sign)


def step_vectors(d: int) -> np.ndarray:
    """(2d, d) int array of step displacement vectors in canonical order."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        out[2 * i, i] = 1
        out[2 * i + 1, i] = -1
    return out


@dataclass(frozen=True)
class TransitionVector:
    """One site's transition probabilities over the 2d steps, canonical order."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size % 2 != 0 or p.size == 0:
            raise DimensionMismatch(f"expected 2d probabilities, got shape {p.shape}")
        if (p < 0).any() or abs(p.sum() - 1.0) > _SIMPLEX_TOL:
            raise SimplexViolation(f"probabilities sum to {p.sum()!r}")
        object.__setattr__(self, "probs", p)

    @property
    def d(self) -> int:
        return self.probs.size // 2

    def prob(self, step: Step) -> float:
        return float(self.probs[step.index])

    def drift(self) -> np.ndarray:
        """Mean displacement sum_z p(z) z."""
        return self.probs @ step_vectors(self.d).astype(np.float64)

    def as_dict(self) -> dict[str, float]:
        return {s.name: float(self.probs[s.index]) for s in steps(self.d)}

    @classmethod
    def from_dict(cls, probs: Mapping[str, float], d: int) -> "TransitionVector":
        if len(probs) != 2 * d:
            raise DimensionMismatch(
                f"component names {sorted(probs)} do not cover the 2d={2*d} steps"
            )
        row = np.zeros(2 * d)
        seen = set()
        for name, p in probs.items():
            s = step_from_name(name, d)
            if s.index in seen:
                raise SimplexViolation(f"duplicate step {name!r}")
            seen.add(s.index)
            row[s.index] = p
        return cls(row)


@dataclass(frozen=True)
class SiteLawMixture:
    """Finite mixture over component transition vectors."""

    components: tuple[TransitionVector, ...]
    weights: np.ndarray

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=np.float64)
        if not comps:
            raise SimplexViolation("mixture needs at least one component")
        if w.shape != (len(comps),):
            raise DimensionMismatch("weights do not match component count")
        if (w < 0).any() or abs(w.sum() - 1.0) > _SIMPLEX_TOL:
            raise SimplexViolation(f"weights sum to {w.sum()!r}")
        d = comps[0].d
        if any(c.d != d for c in comps):
            raise DimensionMismatch("components of mixed dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def n_components(self) -> int:
        return len(self.components)

    def prob_table(self) -> np.ndarray:
        """(K, 2d) component probability rows."""
        return np.stack([c.probs for c in self.components])

    def mean_kernel(self) -> TransitionVector:
        """The annealed one-step kernel E[pi(0, .)]."""
        return TransitionVector(self.weights @ self.prob_table())


@dataclass(frozen=True)
class EnvironmentModel:
    """Uniformly elliptic i.i.d. environment: dimension, floor delta, site law."""

    dimension: int
    delta: float
    law: SiteLawMixture

    def __post_init__(self):
        if self.dimension < 1:
            raise DimensionMismatch(f"dimension {self.dimension} < 1")
        if self.law.d != self.dimension:
            raise DimensionMismatch(
                f"law has d={self.law.d}, model says {self.dimension}"
            )
        if not 0.0 < self.delta <= 1.0 / (2 * self.dimension):
            raise EllipticityViolation(
                f"delta={self.delta} outside (0, 1/(2d)] for d={self.dimension}"
            )
        for k, c in enumerate(self.law.components):
            if (c.probs < self.delta - 1e-15).any():
                raise EllipticityViolation(
                    f"component {k} has entry below delta={self.delta}"
                )

    @property
    def n_steps(self) -> int:
        return 2 * self.dimension


def make_model(
    dimension: int,
    delta: float,
    components: Sequence[Mapping[str, float] | Sequence[float]],
    weights: Sequence[float],
) -> EnvironmentModel:
    """Validate and build a model from step-name maps or canonical rows."""
    comps = []
    for c in components:
        if isinstance(c, Mapping):
            comps.append(TransitionVector.from_dict(c, dimension))
        else:
            comps.append(TransitionVector(np.asarray(c, dtype=np.float64)))
    law = SiteLawMixture(tuple(comps), np.asarray(weights, dtype=np.float64))
    return EnvironmentModel(dimension, float(delta), law)


def site_moment(law: SiteLawMixture, counts: Mapping[Step, int] | np.ndarray) -> float:
    """Exact E[prod_z pi(0,z)^{n_z}] for a finite mixture.

    counts may be a Step->int mapping or a (2d,) integer array in canonical
    order. All-zero counts give 1 for any law.
    """
    c = np.zeros(2 * law.d)
    if isinstance(counts, Mapping):
        for s, n in counts.items():
            c[s.index] = n
    else:
        c = np.asarray(counts, dtype=np.float64)
        if c.shape != (2 * law.d,):
            raise DimensionMismatch(f"counts shape {c.shape} for d={law.d}")
    if (c < 0).any():
        raise ValueError("negative visit count")
    per_comp = np.prod(law.prob_table() ** c, axis=1)
    return float(law.weights @ per_comp)


@dataclass(frozen=True)
class EnvironmentRealization:
    """A concrete environment: component index at each site from (seed, site).

    The lookup is a keyed SplitMix64-style hash chained over coordinates, so
    it is stateless, order-of-query independent, and identical across
    processes. Shifting the viewpoint is plain coordinate translation.
    """

    model: EnvironmentModel
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "_cum_weights", np.cumsum(self.model.law.weights)[:-1]
        )
        object.__setattr__(self, "_table", self.model.law.prob_table())

    def site_components(self, sites: np.ndarray) -> np.ndarray:
        """Component indices for an (m, d) array of integer sites."""
        sites = np.asarray(sites, dtype=np.int64)
        if sites.ndim == 1:
            sites = sites[None, :]
        if sites.shape[1] != self.model.dimension:
            raise DimensionMismatch(
                f"sites have d={sites.shape[1]}, model d={self.model.dimension}"
            )
        return _site_components_raw(
            np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), sites, self._cum_weights
        )

    def site_component(self, site: Sequence[int]) -> int:
        return int(self.site_components(np.asarray(site, dtype=np.int64))[0])

    def site_kernel(self, site: Sequence[int]) -> TransitionVector:
        return self.model.law.components[self.site_component(site)]

    def kernel_rows(self, sites: np.ndarray) -> np.ndarray:
        """(m, 2d) probability rows at the given sites."""
        return self._table[self.site_components(sites)]


def _site_components_raw(
    seed: np.uint64, sites: np.ndarray, cum_weights: np.ndarray
) -> np.ndarray:
    u = site_uniforms(seed, sites)
    return np.searchsorted(cum_weights, u, side="right").astype(np.intp)


def site_uniforms(seed, sites: np.ndarray) -> np.ndarray:
    """Uniform(0,1) variate per site, keyed by (seed, site coordinates).

    seed may be a scalar or an (m,) uint64 array (one environment per row).
    """
    sites = np.asarray(sites, dtype=np.int64)
    k = np.broadcast_to(np.asarray(seed, dtype=np.uint64), sites.shape[:1]).copy()
    k = _mix64(k ^ _M1)
    su = sites.view(np.uint64)
    for i in range(sites.shape[1]):
        k = _mix64(k ^ (su[:, i] * _M1 + np.uint64(i + 1)))
    return k.astype(np.float64) * 2.0**-64


@dataclass(frozen=True)
class NestlingReport:
    """Drift geometry verdict: nonnestling iff some direction sees all drifts."""

    nonnestling: bool
    direction: np.ndarray | None
    min_projection: float
    drifts: np.ndarray = field(repr=False, default=None)


def classify_nestling(model: EnvironmentModel) -> NestlingReport:
    """Exact separation test on the finite drift set.

    Nonnestling iff zero lies strictly outside the convex hull of the
    component drifts, i.e. some unit u has <drift_k, u> > 0 for every k.
    Axis directions are preferred as witnesses when they work.
    """
    drifts = np.stack([c.drift() for c in model.law.components])
    d = model.dimension
    for axis in range(d):
        for sgn in (1.0, -1.0):
            proj = sgn * drifts[:, axis]
            if proj.min() > 1e-12:
                u = np.zeros(d)
                u[axis] = sgn
                return NestlingReport(True, u, float(proj.min()), drifts)
    # maximize t s.t. <drift_k, u> >= t, -1 <= u_i <= 1; nonnestling iff t* > 0
    K = drifts.shape[0]
    cvec = np.zeros(d + 1)
    cvec[-1] = -1.0
    a_ub = np.hstack([-drifts, np.ones((K, 1))])
    res = linprog(
        cvec,
        A_ub=a_ub,
        b_ub=np.zeros(K),
        bounds=[(-1, 1)] * d + [(None, None)],
        method="highs",
    )
    t_star = -res.fun if res.status == 0 else 0.0
    if res.status == 0 and t_star > 1e-12:
        u = res.x[:d]
        u = u / np.linalg.norm(u)
        return NestlingReport(True, u, float((drifts @ u).min()), drifts)
    return NestlingReport(False, None, float(t_star), drifts)


def environment_chi2_pvalue(env: EnvironmentRealization, n_sites: int = 100_000) -> float:
    """Chi-square p-value of component frequencies over a block of sites."""
    d = env.model.dimension
    side = max(2, int(np.ceil(n_sites ** (1.0 / d))))
    grids = np.meshgrid(*[np.arange(side)] * d, indexing="ij")
    sites = np.stack([g.ravel() for g in grids], axis=1)[:n_sites]
    idx = env.site_components(sites)
    k = env.model.law.n_components
    obs = np.bincount(idx, minlength=k).astype(np.float64)
    exp = env.model.law.weights * len(sites)
    mask = exp > 0
    stat = ((obs[mask] - exp[mask]) ** 2 / exp[mask]).sum()
    return float(chi2.sf(stat, df=mask.sum() - 1))


def model_to_dict(model: EnvironmentModel, seed: int | None = None) -> dict:
    """Serializable form: dimension, delta, step-name component maps, weights."""
    out = {
        "dimension": model.dimension,
        "delta": model.delta,
        "components": [c.as_dict() for c in model.law.components],
        "weights": [float(w) for w in model.law.weights],
    }
    if seed is not None:
        out["seed"] = int(seed)
    return out


def model_from_dict(data: Mapping) -> tuple[EnvironmentModel, int | None]:
    model = make_model(
        int(data["dimension"]),
        float(data["delta"]),
        data["components"],
        data["weights"],
    )
    seed = data.get("seed")
    return model, (int(seed) if seed is not None else None)
