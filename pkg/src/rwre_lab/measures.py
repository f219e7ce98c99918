"""Empirical pair measures on the finite (component class, step) alphabet.

The full environment chain lives on an infinite-dimensional state space; the
class of the current site is the part of it the base kernel actually reads,
so pair counts over (class, next step) are an exact projection for the base
walk and a certified lower-bound alphabet for any other chain. Measures are
plain count tables and merge by addition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .environment import EnvironmentModel, EnvironmentRealization, step_vectors, steps
from .errors import EmptyMeasure, ZeroBaseProbability
from .walk import PathRecord


@dataclass
class EmpiricalMeasure:
    """Counts over (component class k, step index z)."""

    counts: np.ndarray  # (K, 2d) nonnegative integers

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or (self.counts < 0).any():
            raise ValueError(f"bad count table shape {self.counts.shape}")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def d(self) -> int:
        return self.counts.shape[1] // 2

    def normalized(self) -> np.ndarray:
        if self.n == 0:
            raise EmptyMeasure("no observations")
        return self.counts / self.n

    def class_marginal(self) -> np.ndarray:
        """Frequency of each component class among current sites."""
        if self.n == 0:
            raise EmptyMeasure("no observations")
        return self.counts.sum(axis=1) / self.n

    def step_conditional(self) -> np.ndarray:
        """(K, 2d) conditional step frequencies given the class; NaN rows
        for classes never visited."""
        row = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(row > 0, self.counts / row, np.nan)

    def merge(self, other: "EmpiricalMeasure") -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.counts + other.counts)


def accumulate(path: PathRecord, env: EnvironmentRealization) -> EmpiricalMeasure:
    """Pair counts (class of X_k, Z_{k+1}) along one path."""
    if path.n == 0:
        raise EmptyMeasure("empty path")
    classes = env.site_components(path.positions()[:-1])
    K = env.model.law.n_components
    counts = np.zeros((K, 2 * path.d), dtype=np.int64)
    np.add.at(counts, (classes, path.steps.astype(np.intp)), 1)
    return EmpiricalMeasure(counts)


def measure_from_pairs(classes, step_idx, n_classes: int, d: int) -> EmpiricalMeasure:
    """Pair counts from pre-extracted (class, step) arrays (bulk chains)."""
    counts = np.zeros((n_classes, 2 * d), dtype=np.int64)
    np.add.at(
        counts,
        (np.asarray(classes, dtype=np.intp), np.asarray(step_idx, dtype=np.intp)),
        1,
    )
    return EmpiricalMeasure(counts)


def xi_of(mu: EmpiricalMeasure) -> np.ndarray:
    """Mean displacement per step under the measure."""
    if mu.n == 0:
        raise EmptyMeasure("no observations")
    step_mass = mu.counts.sum(axis=0).astype(np.float64)
    return (step_mass @ step_vectors(mu.d).astype(np.float64)) / mu.n


def projected_entropy(mu: EmpiricalMeasure, model: EnvironmentModel) -> float:
    """Mean KL divergence of conditional step frequencies from the base rows.

    sum_k qhat(k) * KL(ahat(.|k) || p^(k)); classes or steps with zero count
    contribute zero. Nonnegative, and zero exactly when every visited class
    steps with its base frequencies (Gibbs).
    """
    if mu.n == 0:
        raise EmptyMeasure("no observations")
    p = model.law.prob_table()
    if (p[mu.counts > 0] <= 0.0).any():
        raise ZeroBaseProbability("observed step has zero base probability")
    freq = mu.counts / mu.n
    mask = mu.counts > 0
    cond = mu.counts / np.maximum(mu.counts.sum(axis=1, keepdims=True), 1)
    out = 0.0
    ck, cz = np.nonzero(mask)
    for k, z in zip(ck, cz):
        out += freq[k, z] * float(np.log(cond[k, z] / p[k, z]))
    return out


def marginal_balance(path: PathRecord, env: EnvironmentRealization) -> float:
    """Total-variation gap between current-site and arrived-site class
    frequencies. Telescopes to the two path endpoints, so it is bounded by
    (number of classes)/n deterministically."""
    if path.n == 0:
        raise EmptyMeasure("empty path")
    pos = path.positions()
    classes = env.site_components(pos)
    K = env.model.law.n_components
    cur = np.bincount(classes[:-1], minlength=K).astype(np.float64)
    arr = np.bincount(classes[1:], minlength=K).astype(np.float64)
    return float(0.5 * np.abs(cur - arr).sum() / path.n)


def measure_to_csv(mu: EmpiricalMeasure, path) -> None:
    """Dump rows (k, step name, count)."""
    import csv

    names = [s.name for s in steps(mu.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "step", "count"])
        for k in range(mu.n_classes):
            for z, name in enumerate(names):
                w.writerow([k, name, int(mu.counts[k, z])])


def measure_from_csv(path, n_classes: int, d: int) -> EmpiricalMeasure:
    import csv

    from .environment import step_from_name

    counts = np.zeros((n_classes, 2 * d), dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            counts[int(row["k"]), step_from_name(row["step"], d).index] += int(
                row["count"]
            )
    return EmpiricalMeasure(counts)
