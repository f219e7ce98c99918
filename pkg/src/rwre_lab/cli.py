"""Batch front door: config-driven subcommands emitting CSV/JSON plus a manifest.

Every run resolves a JSON config (flags override file keys), writes its data
files and a reproducibility manifest into a run directory, and prints a short
summary table. Exit codes: 0 success, 2 configuration error, 3 numeric
failure (bracketing, convergence, degenerate estimates), 4 sampling budget
exhausted.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import RunManifest, Stopwatch, derive_id, stable_hash, substream
from .environment import (
    EnvironmentModel,
    EnvironmentRealization,
    classify_nestling,
    make_model,
    step_vectors,
    steps,
)
from .errors import (
    BracketFailure,
    BudgetExhausted,
    DegenerateDenominator,
    EmptyMeasure,
    EmptyPath,
    HorizonExhausted,
    InsufficientSamples,
    MissingNeighbor,
    NoConvergence,
    NonfiniteWeight,
    NonpositiveH,
    RwreError,
    TooFewRegenerations,
    ZeroBaseProbability,
    ZeroProbabilityStep,
)
from .harmonic import HarmonicSource, harmonic_residual
from .lmgf_rate import (
    direct_lmgf_averaged,
    rate_I_a,
    renewal_functional,
    solve_lambda_a,
    solve_theta_grid,
    write_rate_csv,
    write_theta_csv,
)
from .measures import measure_to_csv, xi_of
from .oracle import classical_lmgf, classical_tilt, enumerate_averaged_mgf, path_weight
from .regeneration import (
    SimConfig,
    default_confirm_horizon,
    detect_regenerations,
    sample_blocks,
    tau_tail_diagnostic,
)
from .tilt import (
    ConditioningBudgets,
    LocalObservable,
    TiltBudgets,
    TiltedKernel,
    conditioned_cell_distribution,
    conditioned_expectation,
    entropy_rate,
    minimizer_certificate,
    sample_tilted_path,
)
from .walk import (
    axis_increments,
    base_kernel,
    batch_log_likelihood_ratio,
    mean_velocity,
    simulate_batch,
    simulate_path,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_BUDGET = 4


class ConfigError(Exception):
    pass


_BUDGET_ERRORS = (
    InsufficientSamples,
    BudgetExhausted,
    HorizonExhausted,
    TooFewRegenerations,
)
_NUMERIC_ERRORS = (
    BracketFailure,
    NoConvergence,
    DegenerateDenominator,
    NonpositiveH,
    NonfiniteWeight,
    ZeroProbabilityStep,
    ZeroBaseProbability,
    MissingNeighbor,
    EmptyPath,
    EmptyMeasure,
)


# ---------------------------------------------------------------- config


def _get(cfg: dict, dotted: str, default=None):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _put(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"config key {dotted} collides with scalar {p}")
        node = nxt
    node[parts[-1]] = value


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set wants key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    _put(cfg, key.strip(), value)


def _model(cfg: dict) -> EnvironmentModel:
    m = _get(cfg, "model")
    if not isinstance(m, dict):
        raise ConfigError(
            "config needs a model section: "
            'model.{"dimension", "delta", "components", "weights"}'
        )
    for key in ("dimension", "delta", "components", "weights"):
        if key not in m:
            raise ConfigError(f"model.{key} missing")
    return make_model(
        int(m["dimension"]), float(m["delta"]), m["components"], m["weights"]
    )


def _axis(cfg: dict, model: EnvironmentModel, restrict_first: bool = False) -> int:
    raw = str(_get(cfg, "direction", "+1"))
    if not raw.startswith("+") or not raw[1:].isdigit():
        raise ConfigError(f"direction must be '+k' with 1 <= k <= d, got {raw!r}")
    k = int(raw[1:])
    if not 1 <= k <= model.dimension:
        raise ConfigError(f"direction {raw} outside dimension {model.dimension}")
    if restrict_first and k != 1:
        raise ConfigError(
            f"this subcommand only supports direction '+1' (got {raw}); "
            "relabel the axes of the model instead"
        )
    return k - 1


def _vector_list(raw, d: int, name: str) -> list[np.ndarray]:
    """Accept a scalar (x * e_1), one length-d vector, or a list of either."""

    def one(v) -> np.ndarray:
        if isinstance(v, (int, float)):
            vec = np.zeros(d)
            vec[0] = float(v)
            return vec
        arr = np.asarray(v, dtype=np.float64)
        if arr.shape != (d,):
            raise ConfigError(f"{name}: expected {d} entries, got {arr.shape}")
        return arr

    if raw is None:
        raise ConfigError(f"{name} is required")
    if isinstance(raw, (int, float)):
        return [one(raw)]
    if isinstance(raw, (list, tuple)):
        if all(isinstance(v, (int, float)) for v in raw):
            if len(raw) == d and d > 1:
                return [one(raw)]
            return [one(v) for v in raw]
        return [one(v) for v in raw]
    raise ConfigError(f"{name}: cannot parse {raw!r}")


def _seed(cfg: dict) -> int:
    return int(_get(cfg, "seed", 0))


def _rng(cfg: dict, *parts) -> np.random.Generator:
    return substream(_seed(cfg), derive_id(*parts))


def _sim_config(cfg: dict, model: EnvironmentModel, axis: int) -> SimConfig:
    horizon = _get(cfg, "regen.confirm_horizon")
    base = SimConfig()
    return SimConfig(
        trajectory_len=int(_get(cfg, "regen.trajectory_len", base.trajectory_len)),
        batch_walkers=int(_get(cfg, "regen.batch_walkers", base.batch_walkers)),
        confirm_horizon=None if horizon is None else int(horizon),
        axis=axis,
        max_total_steps=int(_get(cfg, "regen.max_total_steps", base.max_total_steps)),
    )


def _block_sample(cfg: dict, model: EnvironmentModel, axis: int, tag: str):
    n = int(_get(cfg, "regen.blocks", 20000))
    sim = _sim_config(cfg, model, axis)
    rng = _rng(cfg, "blocks", tag, n)
    return sample_blocks(
        model,
        n,
        sim,
        rng,
        allow_nestling=bool(_get(cfg, "regen.allow_nestling", False)),
    )


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.6g}"
    if isinstance(x, np.ndarray):
        return "(" + ", ".join(f"{v:.6g}" for v in x) + ")"
    return str(x)


def _pm(value: float, stderr: float) -> str:
    return f"{value:.6g} +/- {stderr:.2g}"


# ---------------------------------------------------------------- commands


def _cmd_env_info(cfg: dict, outdir: Path):
    model = _model(cfg)
    report = classify_nestling(model)
    mean = model.law.mean_kernel()
    info = {
        "dimension": model.dimension,
        "delta": model.delta,
        "n_components": model.law.n_components,
        "weights": model.law.weights.tolist(),
        "component_rows": model.law.prob_table().tolist(),
        "component_drifts": report.drifts.tolist(),
        "mean_kernel": mean.probs.tolist(),
        "mean_drift": mean.drift().tolist(),
        "nonnestling": bool(report.nonnestling),
        "witness_direction": None
        if report.direction is None
        else report.direction.tolist(),
        "min_drift_projection": report.min_projection,
        "default_confirm_horizon": default_confirm_horizon(model),
    }
    (outdir / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    rows = [
        ("dimension", str(model.dimension)),
        ("delta", _fmt(model.delta)),
        ("components", str(model.law.n_components)),
        ("mean_drift", _fmt(mean.drift())),
        ("nonnestling", str(info["nonnestling"])),
        ("witness_direction", _fmt(report.direction) if report.direction is not None else "-"),
        ("default_confirm_horizon", str(info["default_confirm_horizon"])),
    ]
    return rows, {"model_info": info}


def _cmd_simulate(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model)
    n_steps = int(_get(cfg, "simulate.steps", 10000))
    env = EnvironmentRealization(model, _seed(cfg))
    path = simulate_path(env, base_kernel(), n_steps, _rng(cfg, "simulate", n_steps))
    pos = path.positions()
    with open(outdir / "path.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i+1}" for i in range(model.dimension)])
        for t in range(pos.shape[0]):
            w.writerow([t, *map(int, pos[t])])
    horizon = int(
        _get(cfg, "regen.confirm_horizon", default_confirm_horizon(model))
    )
    regens = detect_regenerations(path, horizon, axis=axis)
    vel = mean_velocity(path)
    rows = [
        ("steps", str(n_steps)),
        ("final_site", _fmt(pos[-1].astype(np.float64))),
        ("velocity", _fmt(vel)),
        ("confirmed_regenerations", str(len(regens.times))),
    ]
    params = {
        "steps": n_steps,
        "velocity": vel.tolist(),
        "confirmed_regenerations": len(regens.times),
        "confirm_horizon": horizon,
    }
    return rows, params


def _cmd_regen(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model)
    blocks, diag = _block_sample(cfg, model, axis, "regen")
    with open(outdir / "blocks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"S_{i+1}" for i in range(blocks.d)] + ["T"])
        for i in range(len(blocks)):
            w.writerow([*map(int, blocks.S[i]), int(blocks.T[i])])
    params = {"diagnostics": diag}
    rows = [
        ("blocks", str(len(blocks))),
        ("mean_duration", _fmt(diag["mean_duration"])),
        ("max_duration", str(diag["max_duration"])),
        ("unconfirmed_tail_fraction", _fmt(diag["unconfirmed_tail_fraction"])),
    ]
    if len(blocks) >= 1000:
        tail = tau_tail_diagnostic(blocks)
        params["tail"] = {
            "decay_rate": tail.decay_rate,
            "near_rate": tail.near_rate,
            "far_rate": tail.far_rate,
            "subexponential": tail.subexponential,
        }
        rows.append(("tail_decay_rate", _fmt(tail.decay_rate)))
        rows.append(("subexponential", str(tail.subexponential)))
    return rows, params


def _cmd_lmgf(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model)
    thetas = _vector_list(_get(cfg, "lmgf.theta", 0.0), model.dimension, "lmgf.theta")
    tol = float(_get(cfg, "lmgf.tol", 1e-8))
    blocks, _ = _block_sample(cfg, model, axis, "lmgf")
    points = solve_theta_grid(blocks, thetas, tol=tol)
    write_theta_csv(points, outdir / "theta_points.csv")
    worst = 0.0
    for pt in points:
        value, se = renewal_functional(blocks, pt.theta, pt.lam)
        worst = max(worst, abs(value - 1.0) - max(tol, 2.0 * se))
    rows = [("points", str(len(points))), ("blocks", str(len(blocks)))]
    for pt in points[:8]:
        rows.append(
            (f"lambda({_fmt(pt.theta)})", _pm(pt.lam, pt.lambda_stderr))
        )
    if len(points) > 8:
        rows.append(("...", f"{len(points) - 8} more points in theta_points.csv"))
    rows.append(("max_renewal_excess", _fmt(worst)))
    params = {
        "points": [
            {
                "theta": pt.theta.tolist(),
                "lambda": pt.lam,
                "lambda_stderr": pt.lambda_stderr,
                "grad": pt.grad.tolist(),
            }
            for pt in points
        ],
        "max_renewal_excess": worst,
    }
    return rows, params


def _cmd_rate(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model)
    xis = _vector_list(_get(cfg, "rate.xi"), model.dimension, "rate.xi")
    tol = float(_get(cfg, "rate.tol", 1e-6))
    max_newton = int(_get(cfg, "rate.max_newton", 40))
    blocks, _ = _block_sample(cfg, model, axis, "rate")
    queries = [rate_I_a(blocks, xi, tol=tol, max_iter=max_newton) for xi in xis]
    write_rate_csv(queries, outdir / "rate_points.csv")
    rows = [("queries", str(len(queries))), ("blocks", str(len(blocks)))]
    for q in queries[:8]:
        rows.append((f"I({_fmt(q.xi)})", f"{_fmt(q.I_value)} converged={q.converged}"))
    params = {
        "queries": [
            {
                "xi": q.xi.tolist(),
                "I": q.I_value,
                "theta_star": None if q.theta_star is None else q.theta_star.tolist(),
                "converged": q.converged,
                "grad_gap": q.grad_gap,
            }
            for q in queries
        ]
    }
    bad = [q for q in queries if math.isfinite(q.I_value) and not q.converged]
    if bad:
        # outputs are on disk already; surface the failure through the exit code
        raise NoConvergence(
            f"rate solve did not converge at {len(bad)} of {len(queries)} queries"
        )
    return rows, params


def _solved_lambda(cfg: dict, model: EnvironmentModel, axis: int, theta, tag: str):
    override = _get(cfg, f"{tag}.lam")
    if override is not None:
        return float(override), 0.0, None
    blocks, _ = _block_sample(cfg, model, axis, tag)
    pt = solve_lambda_a(blocks, theta)
    return pt.lam, pt.lambda_stderr, blocks


def _cmd_harmonic(cfg: dict, outdir: Path):
    model = _model(cfg)
    _axis(cfg, model, restrict_first=True)
    theta = _vector_list(
        _get(cfg, "lmgf.theta", 0.0), model.dimension, "lmgf.theta"
    )[0]
    lam, lam_se, _ = _solved_lambda(cfg, model, 0, theta, "harmonic")
    n_max = int(_get(cfg, "harmonic.n_max", 8))
    walks = int(_get(cfg, "harmonic.walks", 200))
    horizon = int(_get(cfg, "harmonic.confirm_horizon", 32))
    n_extra = int(_get(cfg, "harmonic.sites", 8))
    env_seed = int(_get(cfg, "harmonic.env_seed", _seed(cfg)))
    env = EnvironmentRealization(model, env_seed)
    source = HarmonicSource(
        env,
        theta,
        lam,
        n_max=n_max,
        walks=walks,
        confirm_horizon=horizon,
        master_seed=_seed(cfg),
        stream_mode=str(_get(cfg, "harmonic.stream", "site")),
    )
    d = model.dimension
    site_rng = _rng(cfg, "harmonic-sites")
    sites = [np.zeros(d, dtype=np.int64)]
    for _ in range(n_extra):
        sites.append(site_rng.integers(-n_max // 2, n_max // 2 + 1, size=d))
    vecs = step_vectors(d)
    targets = []
    for s in sites:
        targets.append(s)
        targets.extend(s + z for z in vecs)
    source.prefetch(targets)
    resid_rows = []
    total_norm = 0.0
    for s in sites:
        resid, norm = harmonic_residual(env, s, source, theta, lam)
        resid_rows.append((s, resid, norm))
        total_norm += abs(norm)
    source.as_estimate().to_csv(outdir / "h_values.csv")
    with open(outdir / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i+1}" for i in range(d)] + ["residual", "normalized"])
        for s, resid, norm in resid_rows:
            w.writerow([*map(int, s), resid, norm])
    h0, h0_se = source.value(np.zeros(d, dtype=np.int64))
    rows = [
        ("theta", _fmt(theta)),
        ("lambda", _pm(lam, lam_se)),
        ("h(origin)", _pm(h0, h0_se)),
        ("sites", str(len(sites))),
        ("mean_abs_normalized_residual", _fmt(total_norm / len(sites))),
        ("exhausted_walks", str(source.n_exhausted_walks)),
    ]
    params = {
        "theta": theta.tolist(),
        "lambda": lam,
        "h_origin": h0,
        "h_origin_stderr": h0_se,
        "mean_abs_normalized_residual": total_norm / len(sites),
        "n_sites": len(sites),
        "n_max": n_max,
        "walks": walks,
        "confirm_horizon": horizon,
    }
    return rows, params


def _cmd_tilt(cfg: dict, outdir: Path):
    model = _model(cfg)
    _axis(cfg, model, restrict_first=True)
    theta = _vector_list(
        _get(cfg, "lmgf.theta", 0.0), model.dimension, "lmgf.theta"
    )[0]
    lam, lam_se, _ = _solved_lambda(cfg, model, 0, theta, "tilt")
    env_seed = int(_get(cfg, "tilt.env_seed", _seed(cfg)))
    env = EnvironmentRealization(model, env_seed)
    tk = TiltedKernel(
        env,
        theta,
        lam,
        n_max=int(_get(cfg, "harmonic.n_max", 6)),
        walks=int(_get(cfg, "tilt.h_budget", 200)),
        confirm_horizon=int(_get(cfg, "harmonic.confirm_horizon", 20)),
        master_seed=_seed(cfg),
    )
    n_steps = int(_get(cfg, "tilt.steps", 20000))
    burn_in = _get(cfg, "tilt.burn_in")
    _, stats = sample_tilted_path(
        tk, n_steps, None if burn_in is None else int(burn_in), _rng(cfg, "tilt-chain")
    )
    vel, vel_se = stats.velocity()
    H, H_se = entropy_rate(tk, stats)
    measure_to_csv(stats.measure, outdir / "tilt_measure.csv")
    gap = abs(H - (float(theta @ vel) - lam))
    rows = [
        ("theta", _fmt(theta)),
        ("lambda", _pm(lam, lam_se)),
        ("chain_steps", str(n_steps)),
        ("burn_in", str(stats.burn_in)),
        ("velocity", _fmt(vel)),
        ("entropy_rate", _pm(H, H_se)),
        ("duality_gap", _fmt(gap)),
        ("raw_row_sum_dev", _fmt(stats.row_sum_report["mean_abs_dev"])),
    ]
    params = {
        "theta": theta.tolist(),
        "lambda": lam,
        "velocity": vel.tolist(),
        "velocity_stderr": vel_se.tolist(),
        "measure_velocity": xi_of(stats.measure).tolist(),
        "entropy_rate": H,
        "entropy_rate_stderr": H_se,
        "duality_gap": gap,
        "burn_in": stats.burn_in,
        "row_sum_report": stats.row_sum_report,
    }
    return rows, params


def _cmd_certificate(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model, restrict_first=True)
    theta = _vector_list(
        _get(cfg, "lmgf.theta", 0.0), model.dimension, "lmgf.theta"
    )[0]
    budgets = TiltBudgets(
        n_blocks=int(_get(cfg, "regen.blocks", 20000)),
        chain_steps=int(_get(cfg, "tilt.steps", 100000)),
        burn_in=_get(cfg, "tilt.burn_in"),
        walks=int(_get(cfg, "tilt.h_budget", 200)),
        n_max=int(_get(cfg, "harmonic.n_max", 6)),
        confirm_horizon=int(_get(cfg, "harmonic.confirm_horizon", 20)),
        env_seed=_get(cfg, "tilt.env_seed"),
        block_sim=_sim_config(cfg, model, axis),
    )
    cert = minimizer_certificate(model, theta, budgets, _rng(cfg, "certificate"))
    (outdir / "certificate.json").write_text(json.dumps(cert.to_dict(), indent=2))
    rows = [
        ("theta", _fmt(theta)),
        ("lambda", _pm(cert.lam, cert.lambda_stderr)),
        ("xi_hat", _fmt(cert.xi_hat)),
        ("grad_hat", _fmt(cert.grad_hat)),
        ("entropy_rate", _pm(cert.entropy, cert.entropy_stderr)),
        ("duality_gap", _fmt(cert.duality_gap)),
        ("combined_stderr", _fmt(cert.combined_stderr)),
        ("gap_within_4_sigma", str(cert.gap_ok(4.0))),
    ]
    return rows, {"certificate": cert.to_dict()}


def _cmd_condition(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model, restrict_first=True)
    theta = _vector_list(
        _get(cfg, "lmgf.theta", 0.0), model.dimension, "lmgf.theta"
    )[0]
    N = int(_get(cfg, "condition.N", 0))
    M = int(_get(cfg, "condition.M", 0))
    K = int(_get(cfg, "condition.K", 1))
    lam = _get(cfg, "condition.lam")
    budgets = ConditioningBudgets(
        replicas=int(_get(cfg, "condition.replicas", 4000)),
        lam=None if lam is None else float(lam),
        n_blocks=int(_get(cfg, "regen.blocks", 20000)),
        confirm_horizon=int(_get(cfg, "condition.confirm_horizon", 24)),
        max_steps=int(_get(cfg, "condition.max_steps", 384)),
        block_sim=_sim_config(cfg, model, axis),
    )
    rng = _rng(cfg, "condition", N, M, K)
    if (N, M, K) == (0, 0, 1):
        values, stderrs, diag = conditioned_cell_distribution(
            model, theta, budgets, rng
        )
        names = [s.name for s in steps(model.dimension)]
        with open(outdir / "condition_cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "step", "value", "stderr"])
            for k in range(values.shape[0]):
                for z, name in enumerate(names):
                    w.writerow([k, name, values[k, z], stderrs[k, z]])
        rows = [
            ("window (N,M,K)", "(0, 0, 1)"),
            ("replicas", str(budgets.replicas)),
            ("lambda", _fmt(diag["lambda"])),
            ("cell_total", _fmt(diag["raw_total"])),
            ("rejected_backtrack", str(diag["rejected_backtrack"])),
            ("rejected_short", str(diag["rejected_short"])),
        ]
        params = {
            "window": [N, M, K],
            "values": values.tolist(),
            "stderrs": stderrs.tolist(),
            "diagnostics": diag,
        }
        return rows, params
    f = LocalObservable(fn=lambda view, site, nxt: 1.0, N=N, M=M, K=K)
    value, stderr = conditioned_expectation(model, theta, f, budgets, rng)
    (outdir / "condition_check.json").write_text(
        json.dumps({"window": [N, M, K], "value": value, "stderr": stderr}, indent=2)
    )
    rows = [
        ("window (N,M,K)", f"({N}, {M}, {K})"),
        ("replicas", str(budgets.replicas)),
        ("normalization_check", _pm(value, stderr)),
    ]
    return rows, {"window": [N, M, K], "value": value, "stderr": stderr}


@dataclass
class RareEventEstimate:
    """Naive and tilted importance-sampling estimates of one window event."""

    n: int
    walks: int
    p_naive: float
    p_naive_stderr: float
    p_tilted: float
    p_tilted_stderr: float

    def decay_rate(self, tilted: bool = True) -> float:
        p = self.p_tilted if tilted else self.p_naive
        return math.inf if p <= 0.0 else -math.log(p) / self.n

    def rel_stderr(self, tilted: bool = True) -> float:
        p, se = (
            (self.p_tilted, self.p_tilted_stderr)
            if tilted
            else (self.p_naive, self.p_naive_stderr)
        )
        return math.inf if p <= 0.0 else se / p


def rare_event_probability(
    model: EnvironmentModel,
    xi,
    delta_prime: float,
    n: int,
    walks: int,
    theta_star,
    rng: np.random.Generator,
    chunk: int = 16384,
) -> RareEventEstimate:
    """Estimate P(|X_n/n - xi|_inf <= delta') two ways at equal walk budget.

    Naive: fresh (environment, walk) pairs under the base kernel, hit counting.
    Tilted: the same budget under the per-class exponential tilt at theta_star,
    each hit reweighted by the path likelihood ratio back to the base kernel.
    """
    d = model.dimension
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=np.float64))
    base_table = model.law.prob_table()
    tilt_table = np.stack(
        [classical_tilt(c, theta_star).probs for c in model.law.components]
    )
    zeros = np.zeros(d, dtype=np.int64)

    def endpoints(step_idx: np.ndarray) -> np.ndarray:
        W = step_idx.shape[0]
        X = np.empty((W, d), dtype=np.int64)
        for a in range(d):
            X[:, a] = axis_increments(step_idx.ravel(), a, d).reshape(W, n).sum(axis=1)
        return X

    def hits(step_idx: np.ndarray) -> np.ndarray:
        X = endpoints(step_idx)
        return (np.abs(X / n - xi) <= delta_prime + 1e-12).all(axis=1)

    naive_hits = 0
    w_sum = 0.0
    w_sq = 0.0
    done = 0
    while done < walks:
        W = min(chunk, walks - done)
        seeds = rng.integers(0, 2**63, size=W).astype(np.uint64)
        naive_hits += int(hits(simulate_batch(model, seeds, zeros, n, rng=rng)).sum())
        seeds_t = rng.integers(0, 2**63, size=W).astype(np.uint64)
        steps_t = simulate_batch(model, seeds_t, zeros, n, rng=rng, table=tilt_table)
        hit_t = hits(steps_t)
        w = np.zeros(W)
        if hit_t.any():
            llr = batch_log_likelihood_ratio(
                model, seeds_t[hit_t], steps_t[hit_t], base_table, tilt_table
            )
            w[hit_t] = np.exp(llr)
        w_sum += float(w.sum())
        w_sq += float((w * w).sum())
        done += W
    p_naive = naive_hits / walks
    se_naive = math.sqrt(max(p_naive * (1.0 - p_naive), 0.0) / walks)
    p_tilt = w_sum / walks
    var = max(w_sq / walks - p_tilt * p_tilt, 0.0) * walks / max(walks - 1, 1)
    se_tilt = math.sqrt(var / walks)
    return RareEventEstimate(n, walks, p_naive, se_naive, p_tilt, se_tilt)


def _cmd_rare_event(cfg: dict, outdir: Path):
    model = _model(cfg)
    axis = _axis(cfg, model, restrict_first=True)
    xi = _vector_list(_get(cfg, "rate.xi"), model.dimension, "rate.xi")[0]
    n_list = _get(cfg, "rare.n_list", [100, 200, 400])
    if not isinstance(n_list, (list, tuple)) or not n_list:
        raise ConfigError("rare.n_list must be a nonempty list")
    delta_prime = float(_get(cfg, "rare.delta_prime", 0.02))
    walks = int(_get(cfg, "rare.walks", 20000))
    blocks, _ = _block_sample(cfg, model, axis, "rare")
    query = rate_I_a(blocks, xi)
    if query.theta_star is None or not math.isfinite(query.I_value):
        raise ConfigError(
            f"rate.xi={xi.tolist()} is outside the reachable velocity ball"
        )
    results = []
    for n in n_list:
        rng = _rng(cfg, "rare", int(n))
        results.append(
            rare_event_probability(
                model, xi, delta_prime, int(n), walks, query.theta_star, rng
            )
        )
    with open(outdir / "rare_event.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "n",
                "walks",
                "p_naive",
                "p_naive_stderr",
                "p_tilted",
                "p_tilted_stderr",
                "rate_naive",
                "rate_tilted",
                "rel_stderr_naive",
                "rel_stderr_tilted",
            ]
        )
        for r in results:
            w.writerow(
                [
                    r.n,
                    r.walks,
                    r.p_naive,
                    r.p_naive_stderr,
                    r.p_tilted,
                    r.p_tilted_stderr,
                    r.decay_rate(tilted=False),
                    r.decay_rate(tilted=True),
                    r.rel_stderr(tilted=False),
                    r.rel_stderr(tilted=True),
                ]
            )
    rows = [
        ("xi", _fmt(xi)),
        ("I_hat(xi)", _fmt(query.I_value)),
        ("theta_star", _fmt(query.theta_star)),
        ("delta_prime", _fmt(delta_prime)),
        ("walks_per_n", str(walks)),
    ]
    for r in results:
        rows.append(
            (
                f"rate(n={r.n})",
                f"tilted {_fmt(r.decay_rate(True))} "
                f"(rel se {_fmt(r.rel_stderr(True))}), "
                f"naive {_fmt(r.decay_rate(False))} "
                f"(rel se {_fmt(r.rel_stderr(False))})",
            )
        )
    params = {
        "xi": xi.tolist(),
        "I_hat": query.I_value,
        "theta_star": query.theta_star.tolist(),
        "delta_prime": delta_prime,
        "results": [
            {
                "n": r.n,
                "p_naive": r.p_naive,
                "p_naive_stderr": r.p_naive_stderr,
                "p_tilted": r.p_tilted,
                "p_tilted_stderr": r.p_tilted_stderr,
                "rate_tilted": r.decay_rate(True),
            }
            for r in results
        ],
    }
    return rows, params


def _cmd_oracle_check(cfg: dict, outdir: Path):
    sym = make_model(1, 0.2, [{"+1": 0.8, "-1": 0.2}, {"+1": 0.2, "-1": 0.8}], [0.5, 0.5])
    const = make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])
    reps = int(_get(cfg, "oracle.reps", 200000))
    n_blocks = int(_get(cfg, "oracle.blocks", 20000))
    checks = []

    pw = path_weight(sym, np.array([0, 1, 0], dtype=np.int8))
    checks.append(("path_reuse_weight", abs(pw - 0.17), 1e-12))

    th = 0.3
    closed = 0.25 * math.exp(2 * th) + 0.5 + 0.25 * math.exp(-2 * th)
    checks.append(
        ("two_step_closed_form", abs(enumerate_averaged_mgf(sym, [th], 2) - closed), 1e-12)
    )

    n = 6
    exact = math.log(enumerate_averaged_mgf(sym, [0.4], n)) / n
    mc, mc_se = direct_lmgf_averaged(sym, [0.4], n, reps, _rng(cfg, "oracle-mc"))
    checks.append(("enumeration_vs_mc", abs(mc - exact), 3.0 * mc_se))

    blocks, _ = sample_blocks(const, n_blocks, SimConfig(), _rng(cfg, "oracle-blocks"))
    pt = solve_lambda_a(blocks, [0.4])
    lam_true = classical_lmgf(const.law.components[0], [0.4])
    checks.append(
        (
            "classical_lambda",
            abs(pt.lam - lam_true),
            max(3.0 * pt.lambda_stderr, 1.5e-3),
        )
    )

    lines = []
    failures = 0
    for name, err, bound in checks:
        ok = err <= bound
        failures += 0 if ok else 1
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: |err| = {err:.3g} <= {bound:.3g}")
    (outdir / "oracle_check.txt").write_text("\n".join(lines) + "\n")
    rows = [(line.split(" ", 1)[0], line.split(" ", 1)[1]) for line in lines]
    params = {
        "checks": [
            {"name": name, "error": err, "bound": bound, "ok": err <= bound}
            for name, err, bound in checks
        ]
    }
    if failures:
        raise NoConvergence(f"{failures} oracle check(s) failed; see oracle_check.txt")
    return rows, params


_DISPATCH = {
    "env-info": _cmd_env_info,
    "simulate": _cmd_simulate,
    "regen": _cmd_regen,
    "lmgf": _cmd_lmgf,
    "rate": _cmd_rate,
    "harmonic": _cmd_harmonic,
    "tilt": _cmd_tilt,
    "certificate": _cmd_certificate,
    "condition": _cmd_condition,
    "rare-event": _cmd_rare_event,
    "oracle-check": _cmd_oracle_check,
}


# ---------------------------------------------------------------- wiring


def _parse_vector_flag(raw: str) -> list[float] | float:
    parts = [p for p in raw.split(",") if p.strip()]
    vals = [float(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="run directory (default runs/<cmd>-<hash>)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config key, e.g. --set regen.blocks=50000",
    )
    parser = argparse.ArgumentParser(
        prog="rwre-lab",
        description="Monte Carlo laboratory for walks in random environments",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    sub.add_parser("env-info", parents=[common])

    p = sub.add_parser("simulate", parents=[common])
    p.add_argument("--steps", type=int, dest="simulate_steps")

    p = sub.add_parser("regen", parents=[common])
    p.add_argument("--blocks", type=int, dest="regen_blocks")
    p.add_argument("--confirm-horizon", type=int, dest="regen_confirm_horizon")

    p = sub.add_parser("lmgf", parents=[common])
    p.add_argument("--theta", action="append", dest="theta")
    p.add_argument("--blocks", type=int, dest="regen_blocks")
    p.add_argument("--tol", type=float, dest="lmgf_tol")

    p = sub.add_parser("rate", parents=[common])
    p.add_argument("--xi", action="append", dest="xi")
    p.add_argument("--blocks", type=int, dest="regen_blocks")
    p.add_argument("--tol", type=float, dest="rate_tol")

    p = sub.add_parser("harmonic", parents=[common])
    p.add_argument("--theta", action="append", dest="theta")
    p.add_argument("--n-max", type=int, dest="harmonic_n_max")
    p.add_argument("--walks", type=int, dest="harmonic_walks")
    p.add_argument("--blocks", type=int, dest="regen_blocks")

    p = sub.add_parser("tilt", parents=[common])
    p.add_argument("--theta", action="append", dest="theta")
    p.add_argument("--steps", type=int, dest="tilt_steps")
    p.add_argument("--burn-in", type=int, dest="tilt_burn_in")
    p.add_argument("--h-budget", type=int, dest="tilt_h_budget")
    p.add_argument("--blocks", type=int, dest="regen_blocks")

    p = sub.add_parser("certificate", parents=[common])
    p.add_argument("--theta", action="append", dest="theta")
    p.add_argument("--steps", type=int, dest="tilt_steps")
    p.add_argument("--h-budget", type=int, dest="tilt_h_budget")
    p.add_argument("--blocks", type=int, dest="regen_blocks")

    p = sub.add_parser("condition", parents=[common])
    p.add_argument("--theta", action="append", dest="theta")
    p.add_argument("--window", metavar="N,M,K", dest="condition_window")
    p.add_argument("--replicas", type=int, dest="condition_replicas")
    p.add_argument("--blocks", type=int, dest="regen_blocks")

    p = sub.add_parser("rare-event", parents=[common])
    p.add_argument("--xi", action="append", dest="xi")
    p.add_argument("--n-list", dest="rare_n_list", help="comma-separated path lengths")
    p.add_argument("--delta-prime", type=float, dest="rare_delta_prime")
    p.add_argument("--walks", type=int, dest="rare_walks")
    p.add_argument("--blocks", type=int, dest="regen_blocks")

    p = sub.add_parser("oracle-check", parents=[common])
    p.add_argument("--reps", type=int, dest="oracle_reps")
    p.add_argument("--blocks", type=int, dest="oracle_blocks")

    return parser


_FLAG_TO_KEY = {
    "simulate_steps": "simulate.steps",
    "regen_blocks": "regen.blocks",
    "regen_confirm_horizon": "regen.confirm_horizon",
    "lmgf_tol": "lmgf.tol",
    "rate_tol": "rate.tol",
    "harmonic_n_max": "harmonic.n_max",
    "harmonic_walks": "harmonic.walks",
    "tilt_steps": "tilt.steps",
    "tilt_burn_in": "tilt.burn_in",
    "tilt_h_budget": "tilt.h_budget",
    "condition_replicas": "condition.replicas",
    "rare_delta_prime": "rare.delta_prime",
    "rare_walks": "rare.walks",
    "oracle_reps": "oracle.reps",
    "oracle_blocks": "oracle.blocks",
}


def _apply_flags(cfg: dict, args: argparse.Namespace) -> None:
    if args.seed is not None:
        cfg["seed"] = args.seed
    for attr, key in _FLAG_TO_KEY.items():
        value = getattr(args, attr, None)
        if value is not None:
            _put(cfg, key, value)
    if getattr(args, "theta", None):
        _put(cfg, "lmgf.theta", [_parse_vector_flag(v) for v in args.theta])
    if getattr(args, "xi", None):
        _put(cfg, "rate.xi", [_parse_vector_flag(v) for v in args.xi])
    window = getattr(args, "condition_window", None)
    if window is not None:
        parts = window.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--window wants N,M,K, got {window!r}")
        _put(cfg, "condition.N", int(parts[0]))
        _put(cfg, "condition.M", int(parts[1]))
        _put(cfg, "condition.K", int(parts[2]))
    n_list = getattr(args, "rare_n_list", None)
    if n_list is not None:
        _put(cfg, "rare.n_list", [int(v) for v in n_list.split(",") if v.strip()])


def _print_table(rows) -> None:
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        for assignment in args.set or []:
            _apply_set(cfg, assignment)
        _apply_flags(cfg, args)
        outdir = (
            Path(args.out)
            if args.out
            else Path("runs") / f"{args.cmd}-{stable_hash({'cmd': args.cmd, 'config': cfg})[:8]}"
        )
        outdir.mkdir(parents=True, exist_ok=True)
        with Stopwatch() as sw:
            rows, params = _DISPATCH[args.cmd](cfg, outdir)
        manifest = RunManifest(
            config={"cmd": args.cmd, **cfg},
            master_seed=_seed(cfg),
            params=params,
            wall_time_s=sw.elapsed,
        )
        manifest.write(outdir / "manifest.json")
        rows = list(rows) + [("run_dir", str(outdir))]
        _print_table(rows)
        return EXIT_OK
    except _BUDGET_ERRORS as e:
        print(f"budget exhausted: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except _NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, RwreError, OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
