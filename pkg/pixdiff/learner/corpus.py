import logging
from dataclasses import dataclass
from typing import Optional, Sequence, TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from ..core.errors import require
from ..core.image import DEFAULT_EPSILON, Grid, normalize_image
from ..core.rng import RngStream, sample_standard_normal
from ..core.synthetic import synthetic_raw
from ..diffusion.forward import simulate_chain
from ..diffusion.schedule import GAMMA_DOMINANCE, PixelSchedule, ScheduleConfig

if TYPE_CHECKING:
    from .network import ScaleEstimator

logger = logging.getLogger(__name__)

CORPUS_STREAM = 7
RAW_LOW = 0.3
RAW_HIGH = 1.0


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    """
    Small deterministic image set: each image is a random ramp plus Gaussian blobs.

    Attributes:
        seed (int): corpus seed; image k is drawn from its own sub-stream.
        train (Grid): (N_train, H, W, C) normalized images.
        validation (Grid): (N_val, H, W, C) normalized images.
    """

    seed: int
    train: Grid
    validation: Grid

    @staticmethod
    def generate(
        seed: int = 0,
        count: int = 512,
        size: int = 8,
        channels: int = 1,
        validation_fraction: float = 0.25,
        epsilon: float = DEFAULT_EPSILON,
    ) -> "SyntheticCorpus":
        require(count >= 2, f"corpus needs at least 2 images, got {count}")
        require(0 < validation_fraction < 1, f"validation fraction must be in (0, 1), got {validation_fraction}")
        stream = RngStream(seed, CORPUS_STREAM)
        images = np.stack(
            [
                normalize_image(
                    synthetic_raw(stream.child(k), size, size, channels, blobs=2, low=RAW_LOW, high=RAW_HIGH),
                    epsilon,
                ).data
                for k in range(count)
            ]
        )
        held_out = max(1, int(round(count * validation_fraction)))
        logger.debug(f"Generated {count} synthetic {size}x{size} images from seed {seed}")
        return SyntheticCorpus(seed=seed, train=images[held_out:], validation=images[:held_out])

    @property
    def count(self) -> int:
        return len(self.train) + len(self.validation)

    @property
    def image_shape(self) -> tuple:
        return self.train.shape[1:]

    def split(self, name: str) -> Grid:
        require(name in ("train", "validation"), f"unknown split {name!r}")
        return self.train if name == "train" else self.validation

    def mean_scale(self, gamma: float) -> float:
        """Average image scale exp(-gamma x0) over the training split."""
        return float(np.exp(-gamma * self.train).mean())


def batch_schedule(x0: Grid, cfg: ScheduleConfig) -> PixelSchedule:
    """One pixel-wise schedule over a whole (B, H, W, C) batch of distinct images."""
    require(
        cfg.gamma >= GAMMA_DOMINANCE * float(x0.max()),
        f"gamma must be >= {GAMMA_DOMINANCE:g} x max pixel value (got gamma={cfg.gamma})",
    )
    return PixelSchedule(
        scale=np.exp(-cfg.gamma * x0),
        alpha=np.exp(-cfg.gamma * x0 / cfg.total_steps),
        total_steps=cfg.total_steps,
        gamma=cfg.gamma,
    )


def _draw(
    images: Grid, generator: np.random.Generator, size: int, total_steps: int, steps: Optional[Sequence[int]]
) -> tuple:
    require(len(images) > 0, "cannot draw a batch from an empty image set")
    require(size >= 1, f"batch size must be >= 1, got {size}")
    x0 = images[generator.integers(len(images), size=size)]
    if steps is None:
        steps = generator.integers(1, total_steps + 1, size=size)
    steps = np.asarray(steps, dtype=np.int64)
    require(steps.shape == (size,), f"need one step per sample, got {steps.shape}")
    require(bool(np.all((steps >= 1) & (steps <= total_steps))), f"steps must lie in [1, {total_steps}]")
    return x0, steps


@dataclass(frozen=True, eq=False)
class ScaleBatch:
    """Noisy inputs x_i at per-sample steps with their true image scales as targets."""

    x0: Grid
    steps: npt.NDArray[np.int64]
    x_i: Grid
    target: Grid

    def __len__(self) -> int:
        return len(self.steps)


def scale_batch(
    images: Grid,
    cfg: ScheduleConfig,
    rng: RngStream,
    size: int,
    steps: Optional[Sequence[int]] = None,
) -> ScaleBatch:
    """x_i = sqrt(alpha_bar_i) x0 + sqrt(1 - alpha_bar_i) eps with i drawn uniformly from 1..T."""
    x0, steps = _draw(images, rng.child(0).generator(), size, cfg.total_steps, steps)
    sched = batch_schedule(x0, cfg)
    alpha_bar = np.power(sched.alpha, steps.reshape((-1,) + (1,) * (x0.ndim - 1)))
    eps = sample_standard_normal(x0.shape, rng.child(1)).data
    x_i = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps
    return ScaleBatch(x0=x0, steps=steps, x_i=x_i, target=sched.scale)


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    """
    Samples for the one-shot predictor.

    Attributes:
        x0 (Grid): (B, H, W, C) clean images.
        steps (npt.NDArray[np.int64]): (B,) forward step i of each sample.
        x_i (Grid): (B, H, W, C) states of one forward chain per sample.
        scale (Grid): (B, H, W, C) scale fed to the predictor (true or estimated).
        targets (Grid): (B, T, H, W, C) composite noises eps~_j of the same chain, zero for j > i.
        mask (npt.NDArray[np.bool_]): (B, T) active heads, j <= i.
    """

    x0: Grid
    steps: npt.NDArray[np.int64]
    x_i: Grid
    scale: Grid
    targets: Grid
    mask: npt.NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.steps)


def head_mask(steps: npt.ArrayLike, total_steps: int) -> npt.NDArray[np.bool_]:
    """(B, T) flags, head j active for a sample at step i iff j <= i."""
    steps = np.asarray(steps, dtype=np.int64).reshape(-1, 1)
    return np.arange(1, total_steps + 1).reshape(1, -1) <= steps


def noise_batch(
    images: Grid,
    cfg: ScheduleConfig,
    rng: RngStream,
    size: int,
    scale_source: Optional["ScaleEstimator"] = None,
    steps: Optional[Sequence[int]] = None,
) -> NoiseBatch:
    """Run one forward chain per sample and keep every composite noise up to its step."""
    x0, steps = _draw(images, rng.child(0).generator(), size, cfg.total_steps, steps)
    sched = batch_schedule(x0, cfg)
    traj = simulate_chain(x0, sched, rng.child(1), record_stride=1)
    states = np.stack(traj.states)
    x_i = states[steps, np.arange(size)]
    mask = head_mask(steps, cfg.total_steps)
    noises = np.moveaxis(np.stack(traj.noises[1:]), 0, 1)
    targets = noises * mask.reshape(mask.shape + (1,) * (x0.ndim - 1))
    scale = sched.scale if scale_source is None else scale_source.estimate_many(x_i, steps)
    return NoiseBatch(x0=x0, steps=steps, x_i=x_i, scale=scale, targets=targets, mask=mask)
