"""
Held-out evaluation of the learned sampler: how well the scale is estimated, how well
each head predicts its noise, and how reconstructions with and without the predictor
compare.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..core.errors import require
from ..core.image import Grid
from ..core.rng import RngStream, sample_standard_normal
from ..diffusion.forward import simulate_chain
from ..diffusion.posterior import run_sampling_algorithm, schedule_only_reconstruction
from ..diffusion.schedule import ScheduleConfig, invert_scale
from ..metrics.ssim import SsimConfig, ssim, ssim_batch
from .corpus import batch_schedule, noise_batch
from .network import ReversePredictor, ScaleEstimator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleEvaluation:
    """
    Attributes:
        step (int): forward step the noisy inputs were drawn at.
        scale_ssim (float): mean SSIM(x^_delta, x_delta).
        image_ssim (float): mean SSIM(invert_scale(x^_delta), x0).
    """

    step: int
    scale_ssim: float
    image_ssim: float

    @property
    def scale_easier(self) -> bool:
        return self.scale_ssim > self.image_ssim


def noisy_inputs(images: Grid, gamma: float, total_steps: int, step: int, rng: RngStream) -> Grid:
    """x_i for every image at a common step, one noise draw per image."""
    sched = batch_schedule(images, ScheduleConfig(gamma, total_steps))
    alpha_bar = np.power(sched.alpha, step)
    eps = sample_standard_normal(images.shape, rng).data
    return np.sqrt(alpha_bar) * images + np.sqrt(1.0 - alpha_bar) * eps


def evaluate_scale_estimator(
    est: ScaleEstimator,
    images: Grid,
    rng: RngStream,
    step: Optional[int] = None,
    cfg: Optional[SsimConfig] = None,
) -> ScaleEvaluation:
    """SSIM of the scale estimate against the true scale, and of the inverted estimate against x0."""
    config = est.config
    step = step if step is not None else max(1, config.total_steps // 4)
    require(1 <= step <= config.total_steps, f"step must lie in [1, {config.total_steps}], got {step}")
    x_i = noisy_inputs(images, config.gamma, config.total_steps, step, rng)
    estimate = est.estimate_many(x_i, step)
    truth = np.exp(-config.gamma * images)
    result = ScaleEvaluation(
        step=step,
        scale_ssim=ssim_batch(estimate, truth, cfg),
        image_ssim=ssim_batch(invert_scale(estimate, config.gamma), images, cfg),
    )
    logger.info(f"Scale SSIM {result.scale_ssim:.4f}, recovered image SSIM {result.image_ssim:.4f} at step {step}")
    return result


def head_validation_mse(
    pred: ReversePredictor,
    images: Grid,
    rng: RngStream,
    scale_source: Optional[ScaleEstimator] = None,
) -> Grid:
    """
    Per-pixel MSE of every head on held-out images, shape (T,).

    Head j is scored on samples drawn at step i = j, where it is the first noise the
    sampler consumes.
    """
    total_steps = pred.config.total_steps
    out = np.empty(total_steps)
    for j in range(1, total_steps + 1):
        batch = noise_batch(
            images, pred.config.schedule, rng.child(j), len(images), scale_source, steps=[j] * len(images)
        )
        out[j - 1] = pred.head_losses(batch)[j - 1]
    return out


@dataclass(frozen=True)
class ReconstructionComparison:
    """
    Attributes:
        step (int): depth i the reconstructions start from.
        refined_ssim (List[float]): SSIM of the predictor-driven reconstruction per image.
        schedule_only_ssim (List[float]): SSIM of the schedule-only reconstruction per image.
        predictor_calls (int): predictor executions made while reconstructing.
    """

    step: int
    refined_ssim: List[float]
    schedule_only_ssim: List[float]
    predictor_calls: int

    @property
    def refined_mean(self) -> float:
        return float(np.mean(self.refined_ssim))

    @property
    def schedule_only_mean(self) -> float:
        return float(np.mean(self.schedule_only_ssim))

    @property
    def samples(self) -> int:
        return len(self.refined_ssim)


def compare_reconstructions(
    est: ScaleEstimator,
    pred: ReversePredictor,
    images: Grid,
    step: int,
    rng: RngStream,
    cfg: Optional[SsimConfig] = None,
) -> ReconstructionComparison:
    """Reconstruct each image from a forward chain state at `step`, with and without the predictor."""
    config = pred.config
    require(1 <= step <= config.total_steps, f"step must lie in [1, {config.total_steps}], got {step}")
    calls = pred.calls
    refined, schedule_only = [], []
    for k, x0 in enumerate(images):
        chain = rng.child(k)
        traj = simulate_chain(x0, batch_schedule(x0, config.schedule), chain.child(0), record_stride=1)
        x_i = traj.state_at(step)
        refined.append(ssim(run_sampling_algorithm(x_i, step, est, pred, chain.child(1)), x0, cfg))
        baseline = schedule_only_reconstruction(x_i, step, est, config.gamma, config.total_steps, chain.child(1))
        schedule_only.append(ssim(baseline.final, x0, cfg))
    result = ReconstructionComparison(step, refined, schedule_only, pred.calls - calls)
    logger.info(
        f"From step {step}: predictor SSIM {result.refined_mean:.4f}, "
        f"schedule-only SSIM {result.schedule_only_mean:.4f} over {result.samples} images"
    )
    return result
