import csv
import json

import numpy as np
import pytest

from rwre_lab.cli import (
    EXIT_BUDGET,
    EXIT_CONFIG,
    EXIT_OK,
    RareEventEstimate,
    main,
    rare_event_probability,
)
from rwre_lab.engine import substream
from rwre_lab.environment import make_model
from rwre_lab.oracle import classical_lmgf, classical_rate


@pytest.fixture()
def config_file(tmp_path):
    def write(extra: dict, model=None) -> str:
        cfg = {
            "model": model
            or {
                "dimension": 1,
                "delta": 0.3,
                "components": [{"+1": 0.7, "-1": 0.3}],
                "weights": [1.0],
            },
            "seed": 7,
        }
        cfg.update(extra)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    return write


def run(args, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(args + ["--out", str(out)])
    return code, out, capsys.readouterr()


def test_env_info(config_file, tmp_path, capsys):
    code, out, cap = run(["env-info", "--config", config_file({})], tmp_path, capsys)
    assert code == EXIT_OK
    info = json.loads((out / "model.json").read_text())
    assert info["dimension"] == 1
    assert info["nonnestling"] is True
    assert "nonnestling" in cap.out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 7


def test_missing_model_is_config_error(tmp_path, capsys):
    code = main(["lmgf", "--theta", "0.3", "--out", str(tmp_path / "r")])
    assert code == EXIT_CONFIG


def test_bad_config_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    code = main(["env-info", "--config", str(bad), "--out", str(tmp_path / "r")])
    assert code == EXIT_CONFIG


def test_nestling_without_override_is_config_error(config_file, tmp_path, capsys):
    model = {
        "dimension": 1,
        "delta": 0.2,
        "components": [{"+1": 0.8, "-1": 0.2}, {"+1": 0.2, "-1": 0.8}],
        "weights": [0.5, 0.5],
    }
    code, _, _ = run(
        ["regen", "--config", config_file({}, model), "--blocks", "100"],
        tmp_path,
        capsys,
    )
    assert code == EXIT_CONFIG


def test_simulate_writes_path(config_file, tmp_path, capsys):
    cfgp = config_file({"simulate": {"steps": 500}})
    code, out, cap = run(["simulate", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "path.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 501
    assert rows[0]["x_1"] == "0"
    steps = np.diff([int(r["x_1"]) for r in rows])
    assert set(np.abs(steps)) == {1}


def test_lmgf_matches_classical(config_file, tmp_path, capsys):
    cfgp = config_file({"regen": {"blocks": 4000}, "lmgf": {"theta": [0.0, 0.5]}})
    code, out, cap = run(["lmgf", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "theta_points.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert abs(float(rows[0]["lambda"])) < 1e-6
    model = make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])
    lam_true = classical_lmgf(model.law.components[0], [0.5])
    got = float(rows[1]["lambda"])
    se = float(rows[1]["lambda_stderr"])
    assert abs(got - lam_true) < 4 * se + 1e-3
    assert "max_renewal_excess" in cap.out


def test_rate_outside_ball_is_inf_exit_zero(config_file, tmp_path, capsys):
    cfgp = config_file({"regen": {"blocks": 800}, "rate": {"xi": [1.7]}})
    code, out, cap = run(["rate", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "rate_points.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["I"]) == float("inf")


def test_rate_at_typical_velocity(config_file, tmp_path, capsys):
    cfgp = config_file({"regen": {"blocks": 6000}, "rate": {"xi": [0.55]}})
    code, out, cap = run(["rate", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "rate_points.csv") as fh:
        row = next(csv.DictReader(fh))
    model = make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])
    want = classical_rate(model.law.components[0], [0.55])
    assert abs(float(row["I"]) - want) < 0.01
    assert row["converged"] == "True"


def test_flag_overrides_config(config_file, tmp_path, capsys):
    cfgp = config_file({"regen": {"blocks": 999999}})
    code, out, _ = run(
        ["regen", "--config", cfgp, "--blocks", "500"], tmp_path, capsys
    )
    assert code == EXIT_OK
    with open(out / "blocks.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 500


def test_set_override(config_file, tmp_path, capsys):
    cfgp = config_file({})
    code, out, _ = run(
        ["regen", "--config", cfgp, "--set", "regen.blocks=300"], tmp_path, capsys
    )
    assert code == EXIT_OK
    with open(out / "blocks.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 300


def test_harmonic_command(config_file, tmp_path, capsys):
    cfgp = config_file(
        {
            "regen": {"blocks": 2000},
            "lmgf": {"theta": 0.4},
            "harmonic": {"n_max": 4, "walks": 120, "confirm_horizon": 12, "sites": 3},
        }
    )
    code, out, cap = run(["harmonic", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "h_values.csv") as fh:
        hrows = list(csv.DictReader(fh))
    # origin and its two neighbors at least; extra sites may collide
    assert len(hrows) >= 4
    with open(out / "residuals.csv") as fh:
        rrows = list(csv.DictReader(fh))
    assert len(rrows) == 4
    assert "h(origin)" in cap.out


def test_tilt_command(config_file, tmp_path, capsys):
    cfgp = config_file(
        {
            "regen": {"blocks": 3000},
            "lmgf": {"theta": 0.5},
            "harmonic": {"n_max": 4, "confirm_horizon": 12},
            "tilt": {"steps": 2000, "burn_in": 100, "h_budget": 120},
        }
    )
    code, out, cap = run(["tilt", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    vel = manifest["params"]["velocity"][0]
    assert 0.5 < vel <= 1.0
    assert (out / "tilt_measure.csv").exists()


def test_condition_cells_command(config_file, tmp_path, capsys):
    cfgp = config_file(
        {
            "lmgf": {"theta": 0.3},
            "condition": {"replicas": 400, "lam": 0.15456199366131085,
                          "confirm_horizon": 12, "max_steps": 192},
        }
    )
    code, out, cap = run(["condition", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "condition_cells.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    total = sum(float(r["value"]) for r in rows)
    assert abs(total - 1.0) < 0.1


def test_condition_normalization_window(config_file, tmp_path, capsys):
    cfgp = config_file(
        {
            "lmgf": {"theta": 0.2},
            "condition": {"N": 0, "M": 0, "K": 0, "replicas": 200, "lam": 0.1,
                          "confirm_horizon": 10, "max_steps": 160},
        }
    )
    code, out, cap = run(["condition", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    check = json.loads((out / "condition_check.json").read_text())
    assert check["value"] == 1.0
    assert check["stderr"] == 0.0


def test_oracle_check_passes(config_file, tmp_path, capsys):
    cfgp = config_file({"oracle": {"reps": 40000, "blocks": 6000}})
    code, out, cap = run(["oracle-check", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    text = (out / "oracle_check.txt").read_text()
    assert text.count("PASS") == 4
    assert "FAIL" not in text


def test_rare_event_command(config_file, tmp_path, capsys):
    cfgp = config_file(
        {
            "regen": {"blocks": 4000},
            "rate": {"xi": [0.9]},
            "rare": {"n_list": [60], "delta_prime": 0.05, "walks": 4000},
        }
    )
    code, out, cap = run(["rare-event", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_OK
    with open(out / "rare_event.csv") as fh:
        row = next(csv.DictReader(fh))
    model = make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])
    want = classical_rate(model.law.components[0], [0.9])
    assert abs(float(row["rate_tilted"]) - want) < 0.25 * want + 0.02
    assert float(row["p_tilted"]) > 0.0


def test_rare_event_xi_outside_ball(config_file, tmp_path, capsys):
    cfgp = config_file(
        {"regen": {"blocks": 500}, "rate": {"xi": [1.5]}, "rare": {"n_list": [40]}}
    )
    code, _, _ = run(["rare-event", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_CONFIG


def test_budget_exit_code(config_file, tmp_path, capsys):
    # a left-drifting walk cannot produce confirmed records: budget exhaustion
    model = {
        "dimension": 1,
        "delta": 0.2,
        "components": [{"+1": 0.25, "-1": 0.75}],
        "weights": [1.0],
    }
    cfgp = config_file(
        {"regen": {"blocks": 1000, "max_total_steps": 400000}}, model
    )
    code, _, _ = run(["regen", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_BUDGET


def test_direction_validation(config_file, tmp_path, capsys):
    cfgp = config_file({"direction": "+2"})
    code, _, _ = run(["simulate", "--config", cfgp], tmp_path, capsys)
    assert code == EXIT_CONFIG


def test_rare_event_estimator_on_constant_model():
    # importance sampling with the exact tilt: both estimators unbiased,
    # tilted one far tighter at a genuinely rare event
    model = make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])
    est = rare_event_probability(
        model,
        [0.95],
        0.01,
        n=40,
        walks=30000,
        theta_star=[0.8],
        rng=substream(3, 0),
    )
    # window keeps only X_40 = 38: P = C(40,39) p^39 q  (39 ups, 1 down)
    import math

    p_true = math.comb(40, 39) * 0.7**39 * 0.3
    assert abs(est.p_tilted - p_true) < 5 * est.p_tilted_stderr
    assert est.rel_stderr(tilted=True) < est.rel_stderr(tilted=False)
    assert isinstance(est, RareEventEstimate)
