import numpy as np
import pytest

from rwre_lab.environment import make_model


@pytest.fixture(scope="session")
def classical_d1():
    """Constant environment, right drift 0.4."""
    return make_model(1, 0.3, [{"+1": 0.7, "-1": 0.3}], [1.0])


@pytest.fixture(scope="session")
def symmetric_mixture_d1():
    """Two mirrored components; annealed drift zero (nestling)."""
    return make_model(
        1, 0.2, [{"+1": 0.8, "-1": 0.2}, {"+1": 0.2, "-1": 0.8}], [0.5, 0.5]
    )


@pytest.fixture(scope="session")
def drifted_mixture_d1():
    """Both components drift right; nonnestling along e1."""
    return make_model(
        1, 0.2, [{"+1": 0.75, "-1": 0.25}, {"+1": 0.65, "-1": 0.35}], [0.5, 0.5]
    )


@pytest.fixture(scope="session")
def classical_d2():
    return make_model(
        2, 0.15, [{"+1": 0.4, "-1": 0.15, "+2": 0.225, "-2": 0.225}], [1.0]
    )


@pytest.fixture(scope="session")
def mixture_d4():
    """Two-component d=4 nonnestling mixture used across the heavy tests."""
    lateral_a = 0.44 / 6
    lateral_b = 0.52 / 6
    comp_a = {"+1": 0.50, "-1": 0.06}
    comp_b = {"+1": 0.38, "-1": 0.10}
    for ax in ("2", "3", "4"):
        comp_a[f"+{ax}"] = lateral_a
        comp_a[f"-{ax}"] = lateral_a
        comp_b[f"+{ax}"] = lateral_b
        comp_b[f"-{ax}"] = lateral_b
    return make_model(4, 0.05, [comp_a, comp_b], [0.5, 0.5])


@pytest.fixture(scope="session")
def nestling_d2():
    """Mixed-sign drifts along e1 (hull straddles zero) but positive mean."""
    return make_model(
        2,
        0.1,
        [
            {"+1": 0.45, "-1": 0.15, "+2": 0.2, "-2": 0.2},
            {"+1": 0.15, "-1": 0.25, "+2": 0.3, "-2": 0.3},
        ],
        [0.5, 0.5],
    )
