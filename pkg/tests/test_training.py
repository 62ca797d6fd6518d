import numpy as np
import pytest

from volsplat.activations import activate_theta
from volsplat.dataset import Dataset, View, render_dataset
from volsplat.exceptions import ConfigurationError, NumericalError, UsageError
from volsplat.models import AmplitudeModel, ParamGradients
from volsplat.renderers import variant_spec
from volsplat.schemas import LearningRates, SyntheticParams, TrainConfig, Variant
from volsplat.synthetic import make_synthetic
from volsplat.training import Adam, evaluate, fit, initial_theta, initialize_scene, loss


def _trace_without_time(trace):
    return [{k: v for k, v in row.items() if k != "wall_time"} for row in trace]


@pytest.fixture(scope="module")
def toy_dataset():
    params = SyntheticParams(resolution=(16, 16), views=8, model=AmplitudeModel.OPACITY_AMPLITUDE)
    scene, cameras = make_synthetic("single_gaussian", params)
    return render_dataset(scene, cameras, Variant.GS3D, name="toy", test_every=4)


def _toy_config(**overrides) -> TrainConfig:
    base = {
        "variant": Variant.GS3D,
        "gaussian_count": 1,
        "iterations": 200,
        "seed": 3,
        "sh_degree": 0,
        "ssim_weight": 0.0,
        "init_extent": 1e-3,
        "init_scale": 1.0,
        "init_theta": 0.5,
        "learning_rates": LearningRates(
            position=1e-5, position_final=1e-6, sh_dc=0.02, theta=0.005, log_scales=1e-3, rotation=1e-4,
        ),
    }
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [4000, 100_000, 1_000_000])
@pytest.mark.parametrize("variant,exponent", [(Variant.GS3D, 0.35), (Variant.OTS, 0.55), (Variant.OTS_MARCHER, 0.55)])
def test_initial_theta_power_law(n, variant, exponent):
    assert initial_theta(n, variant) == pytest.approx(2.0 / n ** exponent, rel=1e-15)


@pytest.mark.parametrize("n", [4000, 100_000, 1_000_000])
@pytest.mark.parametrize("variant", [Variant.GS3D, Variant.OTS_SATN])
def test_initialized_scene_uses_power_law_theta(n, variant):
    config = TrainConfig(variant=variant, gaussian_count=n, sh_degree=0)
    scene = initialize_scene(n, variant, 0, config)
    theta = activate_theta(scene.theta_raw, scene.activation)
    np.testing.assert_allclose(theta, initial_theta(n, variant), atol=1e-12, rtol=0)


def test_initialized_scene_layout():
    config = TrainConfig(variant=Variant.OTS, gaussian_count=50, init_extent=2.0, sh_degree=2)
    scene = initialize_scene(50, Variant.OTS, 7, config, np.ones(3))
    assert len(scene) == 50
    assert np.all(np.abs(scene.positions) <= 1.0)
    np.testing.assert_array_equal(scene.rotations, np.tile([1.0, 0.0, 0.0, 0.0], (50, 1)))
    np.testing.assert_allclose(scene.log_scales, np.log(2.0 * 50 ** (-1 / 3) * 0.5))
    assert scene.sh_coeffs.shape == (50, 9, 3)
    assert not scene.sh_coeffs.any()
    assert scene.active_sh_degree == 0
    assert scene.model is AmplitudeModel.OPACITY_THIN_SIDE
    np.testing.assert_array_equal(scene.background, np.ones(3))


def test_initialization_is_seeded():
    a = initialize_scene(20, Variant.GS3D, 1)
    b = initialize_scene(20, Variant.GS3D, 1)
    c = initialize_scene(20, Variant.GS3D, 2)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_initialization_needs_gaussians():
    with pytest.raises(UsageError):
        initialize_scene(0, Variant.GS3D, 0)


@pytest.mark.parametrize("n", range(1, 8))
def test_sigmoid_start_needs_eight_gaussians(n):
    # 2/N^0.35 >= 1 has no sigmoid preimage
    with pytest.raises(ConfigurationError, match="init_theta"):
        initialize_scene(n, Variant.GS3D, 0)


def test_sigmoid_start_at_eight_gaussians():
    scene = initialize_scene(8, Variant.GS3D, 0)
    theta = activate_theta(scene.theta_raw, scene.activation)
    np.testing.assert_allclose(theta, 2.0 / 8 ** 0.35, rtol=1e-12)


def test_softplus_start_accepts_any_count():
    scene = initialize_scene(1, Variant.OTS_SATN, 0)
    assert activate_theta(scene.theta_raw, scene.activation)[0] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_loss_vanishes_at_target():
    image = np.random.default_rng(0).uniform(size=(16, 16, 3))
    value, grad = loss(image, image)
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    rendered = rng.uniform(size=(12, 12, 3))
    target = rng.uniform(size=(12, 12, 3))
    _, grad = loss(rendered, target, 0.2)
    h = 1e-6
    for index in [(0, 0, 0), (5, 7, 1), (11, 3, 2), (6, 6, 0)]:
        plus = rendered.copy()
        minus = rendered.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (loss(plus, target, 0.2)[0] - loss(minus, target, 0.2)[0]) / (2 * h)
        assert grad[index] == pytest.approx(numeric, abs=1e-7)


def test_loss_rejects_resolution_mismatch():
    with pytest.raises(UsageError):
        loss(np.zeros((16, 16, 3)), np.zeros((16, 12, 3)))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adam_first_step_moves_by_learning_rate(mixture):
    scene = mixture(0, 3)
    config = TrainConfig(variant=Variant.OTS_SATN, iterations=100, sh_degree=0)
    adam = Adam(config, variant_spec(Variant.OTS_SATN))
    grads = ParamGradients.zeros_like(scene)
    grads.positions = np.random.default_rng(2).uniform(0.5, 1.0, size=scene.positions.shape)
    grads.theta_raw = -np.ones(3)
    updated = adam.step(scene, grads, 0)
    lr = config.learning_rates
    np.testing.assert_allclose(updated.positions - scene.positions, -lr.position, rtol=1e-9)
    np.testing.assert_allclose(updated.theta_raw - scene.theta_raw, lr.theta * config.ots_theta_lr_factor, rtol=1e-9)
    np.testing.assert_array_equal(updated.log_scales, scene.log_scales)
    assert adam.step_count == 1


def test_position_learning_rate_decays_between_endpoints():
    config = TrainConfig(iterations=1000)
    adam = Adam(config, variant_spec(Variant.GS3D))
    assert adam.position_lr(0) == pytest.approx(1.6e-4)
    assert adam.position_lr(500) == pytest.approx(1.6e-5)
    assert adam.position_lr(1000) == pytest.approx(1.6e-6)


def test_theta_rate_factor_only_for_ots():
    scene = initialize_scene(8, Variant.GS3D, 0)
    config = TrainConfig(sh_degree=0)
    assert Adam(config, variant_spec(Variant.GS3D)).learning_rates(scene, 0)["theta_raw"] == config.learning_rates.theta
    ots = Adam(config, variant_spec(Variant.OTS)).learning_rates(scene, 0)["theta_raw"]
    assert ots == config.learning_rates.theta * config.ots_theta_lr_factor


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def test_fit_recovers_single_gaussian(toy_dataset):
    result = fit(_toy_config(), toy_dataset)
    assert result.iteration == 200
    assert result.trace[-1]["iteration"] == 200
    assert result.trace[-1]["test_psnr"] > 30.0


def test_fit_is_deterministic(toy_dataset):
    config = _toy_config(iterations=15, eval_interval=5)
    a = fit(config, toy_dataset)
    b = fit(config, toy_dataset)
    for name, value in a.scene.parameters().items():
        np.testing.assert_array_equal(value, b.scene.parameters()[name])
    assert _trace_without_time(a.trace) == _trace_without_time(b.trace)


def test_resume_matches_uninterrupted_run(toy_dataset):
    config = _toy_config(iterations=20, eval_interval=5, checkpoint_interval=10)
    saved = []
    full = fit(config, toy_dataset, on_checkpoint=saved.append)
    assert [c.iteration for c in saved] == [10, 20]
    resumed = fit(config, toy_dataset, resume=saved[0])
    for name, value in full.scene.parameters().items():
        np.testing.assert_array_equal(value, resumed.scene.parameters()[name])
    assert _trace_without_time(full.trace) == _trace_without_time(resumed.trace)
    assert resumed.optimizer_step == 20


def test_divergence_raises_with_last_finite_checkpoint(toy_dataset):
    view = toy_dataset.train[0]
    broken = Dataset(
        name="broken",
        train=(View(camera=view.camera, image=np.full_like(view.image, np.nan)),),
        test=(),
        background=np.zeros(3),
    )
    with pytest.raises(NumericalError) as excinfo:
        fit(_toy_config(iterations=5), broken)
    checkpoint = excinfo.value.checkpoint
    assert checkpoint.iteration == 0
    assert all(np.all(np.isfinite(value)) for value in checkpoint.scene.parameters().values())


def test_fit_needs_training_views(toy_dataset):
    empty = Dataset(name="empty", train=(), test=toy_dataset.test, background=np.zeros(3))
    with pytest.raises(UsageError):
        fit(_toy_config(), empty)


def test_evaluate_without_test_views(toy_dataset):
    no_test = Dataset(name="no-test", train=toy_dataset.train, test=(), background=np.zeros(3))
    scene = initialize_scene(1, Variant.GS3D, 0, _toy_config())
    assert evaluate(scene, no_test, Variant.GS3D, None) == (None, None)


# ---------------------------------------------------------------------------
# Trend checks at desk scale
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def blob_cloud_dataset():
    scene, cameras = make_synthetic("blob_cloud", SyntheticParams(seed=0, resolution=(200, 200), views=16))
    return render_dataset(scene, cameras, name="blob_cloud")


@pytest.mark.slow
def test_ots_keeps_up_with_3dgs_at_low_count(blob_cloud_dataset):
    scores = {
        variant: fit(TrainConfig(variant=variant, gaussian_count=4000, iterations=3000, seed=0), blob_cloud_dataset).trace[-1]["test_psnr"]
        for variant in (Variant.GS3D, Variant.OTS)
    }
    assert scores[Variant.OTS] >= scores[Variant.GS3D] - 0.2


@pytest.mark.slow
def test_3dgs_catches_up_at_high_count(blob_cloud_dataset):
    scores = {
        variant: fit(TrainConfig(variant=variant, gaussian_count=100_000, iterations=3000, seed=0), blob_cloud_dataset).trace[-1]["test_psnr"]
        for variant in (Variant.GS3D, Variant.OTS)
    }
    assert scores[Variant.GS3D] >= scores[Variant.OTS] - 0.5
