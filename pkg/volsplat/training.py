"""Fixed-count scene fitting: initialization, loss, Adam updates and evaluation.

The number of Gaussians never changes during a fit: there is no densification,
pruning or opacity reset.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from typing import TYPE_CHECKING

import numpy as np
from tqdm import tqdm

from volsplat.activations import activate_theta, inverse_activation
from volsplat.exceptions import ConfigurationError, NumericalError, UsageError
from volsplat.metrics import psnr, ssim, ssim_with_grad
from volsplat.models import PARAMETER_NAMES, Checkpoint, ParamGradients, Scene, sh_coefficient_count
from volsplat.renderers import RenderOptions, VariantSpec, backward_variant, render_variant, variant_spec
from volsplat.schemas import MetricRow, TrainConfig, Variant

if TYPE_CHECKING:
    from volsplat.dataset import Dataset

__all__ = ["Adam", "activate_theta", "evaluate", "fit", "initialize_scene", "initial_theta", "loss"]

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def initial_theta(n: int, variant: Variant | str) -> float:
    """Post-activation θ shared by all Gaussians at start: 2 / N^p."""
    return 2.0 / n ** variant_spec(variant).theta_exponent


def initialize_scene(
    n: int,
    variant: Variant | str,
    seed: int,
    config: TrainConfig | None = None,
    background: np.ndarray | None = None,
) -> Scene:
    """Uniform random positions in a cube, isotropic scales, identical θ and mid-gray color."""
    if n < 1:
        raise UsageError(f"Gaussian count must be >= 1, got {n}")
    config = config or TrainConfig(variant=Variant(variant), gaussian_count=n, seed=seed)
    spec = variant_spec(variant)
    activation = config.theta_activation or spec.activation
    rng = np.random.default_rng(seed)
    extent = config.init_extent
    scale = config.init_scale if config.init_scale is not None else extent * n ** (-1.0 / 3.0) * 0.5
    theta = config.init_theta if config.init_theta is not None else initial_theta(n, variant)
    try:
        theta_raw = inverse_activation(np.full(n, theta), activation)
    except ConfigurationError as exc:
        raise ConfigurationError(f"Initial θ {theta:.4g} for N={n}: {exc}; set init_theta explicitly") from exc
    return Scene(
        positions=rng.uniform(-extent / 2.0, extent / 2.0, size=(n, 3)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        theta_raw=theta_raw,
        sh_coeffs=np.zeros((n, sh_coefficient_count(config.sh_degree), 3)),
        background=np.zeros(3) if background is None else background,
        activation=activation,
        model=spec.model,
        active_sh_degree=0,
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss(rendered: np.ndarray, target: np.ndarray, ssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 − λ)·L1 + λ·(1 − SSIM) and its gradient with respect to the rendered image."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise UsageError(f"Rendered image {rendered.shape} and target {target.shape} differ in resolution")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    value = (1.0 - ssim_weight) * l1
    if ssim_weight > 0:
        s, d_ssim = ssim_with_grad(rendered, target)
        value += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * d_ssim
    return value, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with one learning rate per parameter group and a decaying position rate."""

    def __init__(
        self,
        config: TrainConfig,
        spec: VariantSpec,
        state: dict[str, dict[str, np.ndarray]] | None = None,
        step: int = 0,
    ) -> None:
        self.config = config
        self.spec = spec
        self.state = state or {}
        self.step_count = step

    def position_lr(self, iteration: int) -> float:
        rates = self.config.learning_rates
        if rates.position == 0 or rates.position_final == 0:
            return rates.position
        t = min(max(iteration / self.config.iterations, 0.0), 1.0)
        return float(np.exp((1.0 - t) * np.log(rates.position) + t * np.log(rates.position_final)))

    def learning_rates(self, scene: Scene, iteration: int) -> dict[str, float | np.ndarray]:
        rates = self.config.learning_rates
        theta_lr = rates.theta * (self.config.ots_theta_lr_factor if self.spec.is_ots else 1.0)
        sh_lr = np.full((scene.sh_coeffs.shape[1], 1), rates.sh_rest)
        sh_lr[0] = rates.sh_dc
        return {
            "positions": self.position_lr(iteration),
            "rotations": rates.rotation,
            "log_scales": rates.log_scales,
            "theta_raw": theta_lr,
            "sh_coeffs": sh_lr,
        }

    def step(self, scene: Scene, grads: ParamGradients, iteration: int) -> Scene:
        beta1, beta2 = self.config.adam_betas
        self.step_count += 1
        t = self.step_count
        lrs = self.learning_rates(scene, iteration)
        updated = {}
        for name in PARAMETER_NAMES:
            g = getattr(grads, name)
            slot = self.state.setdefault(name, {"m": np.zeros_like(g), "v": np.zeros_like(g)})
            m = beta1 * slot["m"] + (1.0 - beta1) * g
            v = beta2 * slot["v"] + (1.0 - beta2) * g * g
            self.state[name] = {"m": m, "v": v}
            m_hat = m / (1.0 - beta1 ** t)
            v_hat = v / (1.0 - beta2 ** t)
            updated[name] = getattr(scene, name) - lrs[name] * m_hat / (np.sqrt(v_hat) + self.config.adam_eps)
        # Scene renormalizes the quaternions
        return scene.with_params(**updated)

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {name: dict(slot) for name, slot in self.state.items()}


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def evaluate(scene: Scene, dataset: Dataset, variant: Variant, options: RenderOptions) -> tuple[float | None, float | None]:
    """Mean test-set PSNR and SSIM; (None, None) without test views."""
    if not dataset.test:
        return None, None
    scores = []
    for view in dataset.test:
        image = render_variant(scene, view.camera, variant, options).radiance.astype(np.float64)
        scores.append((psnr(image, view.image), ssim(image, view.image)))
    values = np.asarray(scores)
    return float(values[:, 0].mean()), float(values[:, 1].mean())


def _sh_degree_at(config: TrainConfig, iteration: int) -> int:
    return min(config.sh_degree, (iteration - 1) // config.sh_warmup_interval)


def fit(
    config: TrainConfig,
    dataset: Dataset,
    resume: Checkpoint | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Optimize a scene of ``config.gaussian_count`` Gaussians against the training views.

    One random training view per iteration. Test metrics are appended to the
    trace every ``eval_interval`` iterations and at the end.
    """
    if not dataset.train:
        raise UsageError("Dataset has no training views")
    spec = variant_spec(config.variant)
    options = RenderOptions(march=config.march, filter_variance=config.filter_variance)
    rng = np.random.default_rng(config.seed)
    config_dump = config.model_dump(mode="json")
    config_hash = config.config_hash()

    if resume is not None:
        if resume.config_hash != config_hash:
            logger.warning("Resuming with a different config (hash %s -> %s)", resume.config_hash[:12], config_hash[:12])
        scene = resume.scene
        optimizer = Adam(config, spec, resume.optimizer_state, resume.optimizer_step)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        trace = list(resume.trace)
        start = resume.iteration
    else:
        scene = initialize_scene(config.gaussian_count, config.variant, config.seed, config, dataset.background)
        optimizer = Adam(config, spec)
        trace = []
        start = 0

    def checkpoint_at(iteration: int, at_scene: Scene, state, step: int, rng_state) -> Checkpoint:
        return Checkpoint(
            scene=at_scene,
            iteration=iteration,
            config=config_dump,
            config_hash=config_hash,
            optimizer_state=state,
            optimizer_step=step,
            rng_state=rng_state,
            trace=list(trace),
        )

    logger.info(
        "Fitting %s with %d Gaussians for %d iterations (starting at %d)",
        spec.variant.value, len(scene), config.iterations, start,
    )
    elapsed_before = trace[-1]["wall_time"] if trace else 0.0
    started = time.perf_counter()
    window_losses: list[float] = []
    for iteration in tqdm(range(start + 1, config.iterations + 1), disable=not progress, desc="fit"):
        last_good = (scene, optimizer.snapshot(), optimizer.step_count, rng.bit_generator.state)
        scene = scene.with_params(active_sh_degree=_sh_degree_at(config, iteration))
        view = dataset.train[int(rng.integers(len(dataset.train)))]
        forward = render_variant(scene, view.camera, spec.variant, options)
        value, image_grad = loss(forward.radiance, view.image, config.ssim_weight)
        grads = backward_variant(scene, view.camera, spec.variant, image_grad, forward, options) if np.isfinite(value) else None
        if grads is None or not grads.is_finite():
            raise NumericalError(
                f"Training diverged at iteration {iteration} (loss {value})",
                checkpoint=checkpoint_at(iteration - 1, *last_good),
                iteration=iteration,
            )
        scene = optimizer.step(scene, grads, iteration)
        window_losses.append(value)

        if iteration % config.eval_interval == 0 or iteration == config.iterations:
            test_psnr, test_ssim = evaluate(scene, dataset, spec.variant, options)
            row = MetricRow(
                iteration=iteration,
                loss=float(np.mean(window_losses)),
                test_psnr=test_psnr,
                test_ssim=test_ssim,
                wall_time=elapsed_before + time.perf_counter() - started,
            )
            trace.append(row.model_dump())
            window_losses = []
            logger.info("iter %d loss %.5f test PSNR %s", iteration, row.loss, test_psnr)
        if on_checkpoint is not None and iteration % config.checkpoint_interval == 0:
            on_checkpoint(checkpoint_at(iteration, scene, optimizer.snapshot(), optimizer.step_count, rng.bit_generator.state))

    return checkpoint_at(config.iterations, scene, optimizer.snapshot(), optimizer.step_count, rng.bit_generator.state)
