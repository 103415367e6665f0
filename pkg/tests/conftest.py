import numpy as np
import pytest

import tacabc as t


@pytest.fixture(scope="session")
def grid():
    return t.default_grid()


@pytest.fixture(scope="session")
def curve():
    return t.reference_input()


@pytest.fixture(scope="session")
def priors():
    return t.default_priors()


@pytest.fixture(scope="session")
def preset_200():
    return t.activation_preset("200")


@pytest.fixture(scope="session")
def preset_100():
    return t.activation_preset("100")


@pytest.fixture(scope="session")
def clean_200(preset_200, curve, grid):
    return t.lp_ntpet_forward(preset_200, curve, grid)


@pytest.fixture(scope="session")
def clean_100(preset_100, curve, grid):
    return t.lp_ntpet_forward(preset_100, curve, grid)


def make_curve(fn, kind="reference", name="test"):
    """InputCurve from a plain python function of minutes."""
    def wrapped(ts):
        ts = np.asarray(ts, dtype=float)
        out = np.asarray(fn(ts), dtype=float)
        return np.where(ts < 0.0, 0.0, out)
    return t.InputCurve(name=name, kind=kind, fn=wrapped)
