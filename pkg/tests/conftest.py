import numpy as np
import pytest

from volsplat.activations import inverse_activation
from volsplat.config import settings
from volsplat.models import AmplitudeModel, Scene, ThetaActivation, sh_coefficient_count
from volsplat.synthetic import make_camera


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long trend checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setattr(settings, "threads", 1)


def random_mixture(
    seed: int,
    n: int,
    model: AmplitudeModel = AmplitudeModel.OPACITY_THIN_SIDE,
    activation: ThetaActivation = ThetaActivation.SOFTPLUS_BETA2,
    theta_range: tuple[float, float] = (0.05, 0.3),
    scale_range: tuple[float, float] = (0.1, 0.25),
    sh_degree: int = 0,
    background=(0.1, 0.2, 0.3),
) -> Scene:
    """Random mixture in the unit cube with anisotropy at most 2."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(*scale_range, size=(n, 1))
    scales = base * rng.uniform(1.0, 2.0, size=(n, 3))
    q = rng.normal(size=(n, 4))
    sh = rng.uniform(-0.2, 0.2, size=(n, sh_coefficient_count(sh_degree), 3))
    sh[:, 0, :] = rng.uniform(-1.5, 1.5, size=(n, 3))
    return Scene(
        positions=rng.uniform(-0.5, 0.5, size=(n, 3)),
        rotations=q / np.linalg.norm(q, axis=1, keepdims=True),
        log_scales=np.log(scales),
        theta_raw=inverse_activation(rng.uniform(*theta_range, size=n), activation),
        sh_coeffs=sh,
        background=np.asarray(background, dtype=np.float64),
        activation=activation,
        model=model,
    )


@pytest.fixture
def mixture():
    return random_mixture


@pytest.fixture
def front_camera():
    def build(resolution: int = 8, distance: float = 3.0, fov: float = 30.0):
        return make_camera(np.array([0.0, 0.0, distance]), np.zeros(3), (resolution, resolution), fov)

    return build
