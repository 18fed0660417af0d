import numpy as np
import pytest

from qlabayes.models import DiffusionModel, ParameterBox, TrueParameter, get_model
from qlabayes.simulator import ObservationSet, PathConfig, simulate_observations


@pytest.fixture(scope="session")
def ou():
    return get_model("OU")


@pytest.fixture(scope="session")
def bou():
    return get_model("BOU")


def simulate(name, n, seed, gamma=0.6, h=None, theta=None):
    model, truth = get_model(name)
    if theta is not None:
        truth = TrueParameter([theta[0]], [theta[1]], [0.0])
    cfg = PathConfig(n, h, 10, seed) if h is not None else PathConfig.from_gamma(n, gamma, 10, seed)
    return model, truth, simulate_observations(model, truth, cfg)


def generic_scalar_model(name="generic-OU", with_derivatives=False):
    """OU written as plain callbacks, so the generic (non closed-form) code paths run."""
    kw = {}
    if with_derivatives:
        kw = dict(
            drift_jac=lambda x, t2: np.array([[-x[0]]]),
            diffusion_jac=lambda x, t1: np.array([[[1.0]]]),
        )
    return DiffusionModel(
        name=name,
        state_dim=1,
        noise_dim=1,
        theta1_box=ParameterBox([0.2], [5.0]),
        theta2_box=ParameterBox([0.2], [5.0]),
        drift=lambda x, t2: -t2[0] * x,
        diffusion=lambda x, t1: np.array([[t1[0]]]),
        **kw,
    )


def obs_from(values, h):
    return ObservationSet(np.asarray(values, float).reshape(-1, 1), h)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
