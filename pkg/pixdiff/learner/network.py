"""
Toy networks of the learned sampler, written directly in numpy.

Parameters live in an ordered Dict[str, Grid] so the optimiser, the gradient check and
the binary format iterate blocks the same way. Hidden units are tanh; every backward
pass is written by hand and checked against finite differences in the tests.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import expit, logit

from ..core.errors import require, require_same_shape
from ..core.image import Grid
from ..core.rng import RngStream
from ..diffusion.schedule import SCALE_CEILING, ScheduleConfig, invert_scale
from .corpus import NoiseBatch, ScaleBatch, SyntheticCorpus, head_mask, noise_batch, scale_batch

logger = logging.getLogger(__name__)

Params = Dict[str, Grid]

EMBEDDING_BASE = 10000.0
# outputs stay strictly inside (0, 1) and below the ceiling where the sampler clamps
SCALE_MIN = np.finfo(np.float64).tiny
SCALE_MAX = SCALE_CEILING


def time_embedding(i: npt.ArrayLike, dim: int) -> Grid:
    """Sinusoidal embedding: component 2k is sin(i / 10000^(2k/dim)), component 2k+1 the cosine."""
    require(dim > 0 and dim % 2 == 0, f"embedding dimension must be even and positive, got {dim}")
    steps = np.asarray(i, dtype=np.float64)
    require(bool(np.all(steps >= 0)), "steps must be >= 0")
    frequencies = EMBEDDING_BASE ** (-2.0 * np.arange(dim // 2) / dim)
    angles = steps[..., None] * frequencies
    out = np.empty(angles.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class NetworkConfig:
    """
    Shapes shared by the scale estimator and the reverse predictor.

    Attributes:
        image_shape (Tuple[int, int, int]): (H, W, C) of the images.
        total_steps (int): T, also the number of predictor heads.
        gamma (float): schedule strength the networks are trained for.
        embedding_dim (int): size of the sinusoidal time embedding.
        estimator_hidden (Tuple[int, ...]): hidden widths of the estimator's encoder-decoder.
        backbone_hidden (Tuple[int, int]): widths of the predictor's two backbone layers.
    """

    image_shape: Tuple[int, int, int] = (8, 8, 1)
    total_steps: int = 20
    gamma: float = 10.0
    embedding_dim: int = 16
    estimator_hidden: Tuple[int, ...] = (64, 32, 16, 32)
    backbone_hidden: Tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_shape", tuple(int(n) for n in self.image_shape))
        object.__setattr__(self, "estimator_hidden", tuple(int(n) for n in self.estimator_hidden))
        object.__setattr__(self, "backbone_hidden", tuple(int(n) for n in self.backbone_hidden))
        ScheduleConfig(self.gamma, self.total_steps)
        require(
            len(self.image_shape) == 3 and all(n > 0 for n in self.image_shape),
            f"image_shape must be (H, W, C), got {self.image_shape}",
        )
        require(self.embedding_dim > 0 and self.embedding_dim % 2 == 0, "embedding_dim must be even")
        require(all(n > 0 for n in self.estimator_hidden), "estimator widths must be positive")
        require(
            len(self.backbone_hidden) == 2 and all(n > 0 for n in self.backbone_hidden),
            f"backbone_hidden must hold two positive widths, got {self.backbone_hidden}",
        )

    @property
    def pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.gamma, self.total_steps)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "NetworkConfig":
        return NetworkConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def dense_init(generator: np.random.Generator, fan_out: int, fan_in: int, gain: float = 1.0) -> Grid:
    return generator.normal(0.0, gain / np.sqrt(fan_in), size=(fan_out, fan_in))


def _flat(x: npt.ArrayLike, config: NetworkConfig) -> Grid:
    x = np.asarray(x, dtype=np.float64)
    require_same_shape(x.shape[1:], config.image_shape, "network input")
    return x.reshape(len(x), -1)


def _steps(steps: npt.ArrayLike, count: int, total_steps: int) -> npt.NDArray[np.int64]:
    steps = np.broadcast_to(np.asarray(steps, dtype=np.int64), (count,))
    require(bool(np.all((steps >= 1) & (steps <= total_steps))), f"steps must lie in [1, {total_steps}]")
    return steps


class Trainable(ABC):
    """A network the training loop can drive: it samples its own batches and differentiates its loss."""

    kind: ClassVar[str]
    config: NetworkConfig
    params: Params

    @abstractmethod
    def sample_batch(
        self, images: Grid, rng: RngStream, size: int, scale_source: Optional["ScaleEstimator"] = None
    ) -> Any:
        raise NotImplementedError

    @abstractmethod
    def loss_and_grad(self, batch: Any) -> Tuple[float, Params]:
        raise NotImplementedError

    def loss(self, batch: Any) -> float:
        return self.loss_and_grad(batch)[0]

    def parameter_count(self) -> int:
        return sum(block.size for block in self.params.values())


@dataclass(eq=False)
class ScaleEstimator(Trainable):
    """
    Denoising encoder-decoder s(x_i, i) estimating the image scale exp(-gamma x0).

    Input is the flattened x_i concatenated with the time embedding of i; the output
    layer is a logistic so every estimate lies in (0, 1).
    """

    config: NetworkConfig
    params: Params
    kind: ClassVar[str] = "scale_estimator"

    @staticmethod
    def initialize(config: NetworkConfig, rng: RngStream, target_mean: Optional[float] = None) -> "ScaleEstimator":
        """Random weights; `target_mean` starts the output bias at the logit of the mean target."""
        generator = rng.generator()
        widths = [config.pixels + config.embedding_dim, *config.estimator_hidden, config.pixels]
        params: Params = {}
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"dense{k}.W"] = dense_init(generator, fan_out, fan_in)
            params[f"dense{k}.b"] = np.zeros(fan_out)
        if target_mean is not None:
            require(0 < target_mean < 1, f"target mean must lie in (0, 1), got {target_mean}")
            params[f"dense{len(widths) - 2}.b"][:] = logit(target_mean)
        return ScaleEstimator(config=config, params=params)

    @staticmethod
    def for_corpus(config: NetworkConfig, corpus: SyntheticCorpus, rng: RngStream) -> "ScaleEstimator":
        return ScaleEstimator.initialize(config, rng, target_mean=corpus.mean_scale(config.gamma))

    @property
    def layers(self) -> int:
        return len(self.config.estimator_hidden) + 1

    def _forward(self, x: Grid, steps: npt.NDArray[np.int64]) -> Tuple[List[Grid], Grid]:
        h = np.concatenate([x, time_embedding(steps, self.config.embedding_dim)], axis=1)
        activations = [h]
        for k in range(self.layers):
            a = h @ self.params[f"dense{k}.W"].T + self.params[f"dense{k}.b"]
            h = np.tanh(a) if k < self.layers - 1 else expit(a)
            activations.append(h)
        return activations, np.clip(h, SCALE_MIN, SCALE_MAX)

    def estimate_many(self, x_i: npt.ArrayLike, steps: npt.ArrayLike) -> Grid:
        """Scale estimates for a (B, H, W, C) batch at per-sample steps."""
        x = _flat(x_i, self.config)
        _, out = self._forward(x, _steps(steps, len(x), self.config.total_steps))
        return out.reshape((len(x),) + self.config.image_shape)

    def estimate(self, x_i: npt.ArrayLike, i: int) -> Grid:
        x_i = np.asarray(x_i, dtype=np.float64)
        require_same_shape(x_i.shape, self.config.image_shape, "scale estimator input")
        return self.estimate_many(x_i[None], [i])[0]

    def sample_batch(
        self, images: Grid, rng: RngStream, size: int, scale_source: Optional["ScaleEstimator"] = None
    ) -> ScaleBatch:
        return scale_batch(images, self.config.schedule, rng, size)

    def loss_and_grad(self, batch: ScaleBatch) -> Tuple[float, Params]:
        """Mean squared error against the true scale, averaged over samples and pixels."""
        require(len(batch) > 0, "loss of an empty batch")
        x = _flat(batch.x_i, self.config)
        target = batch.target.reshape(len(x), -1)
        activations, _ = self._forward(x, _steps(batch.steps, len(x), self.config.total_steps))
        out = activations[-1]
        diff = out - target
        loss = float(np.mean(diff**2))
        grads: Params = {}
        da = 2.0 * diff / diff.size * out * (1.0 - out)
        for k in reversed(range(self.layers)):
            grads[f"dense{k}.W"] = da.T @ activations[k]
            grads[f"dense{k}.b"] = da.sum(axis=0)
            if k:
                da = (da @ self.params[f"dense{k}.W"]) * (1.0 - activations[k] ** 2)
        return loss, {name: grads[name] for name in self.params}


def estimate_scale(est: ScaleEstimator, x_i: npt.ArrayLike, i: int) -> Grid:
    return est.estimate(x_i, i)


@dataclass(frozen=True)
class ChannelMask:
    """Heads consumed when sampling from step i: head j is active iff j <= i."""

    step: int
    total_steps: int

    def __post_init__(self) -> None:
        require(1 <= self.step <= self.total_steps, f"step must lie in [1, {self.total_steps}], got {self.step}")

    @property
    def flags(self) -> npt.NDArray[np.bool_]:
        return head_mask([self.step], self.total_steps)[0]

    def apply(self, stack: Grid) -> Grid:
        return stack * self.flags.reshape((-1,) + (1,) * (stack.ndim - 1))


@dataclass
class _PredictorCache:
    x: Grid
    mapped: Grid
    step_embedding: Grid
    h1: Grid
    h2: Grid
    g: Grid
    mask: Grid


BACKBONE_BLOCKS = ("in.W", "time.W", "fuse.W", "in.b", "hidden.W", "hidden.b", "head_embed.W")
HEAD_BLOCKS = ("heads.W", "heads.x", "heads.scale", "heads.b")


@dataclass(eq=False)
class ReversePredictor(Trainable):
    """
    One-shot multi-head noise predictor r(x_i, x^_delta, i).

    The scale enters through the fixed map -ln(x^_delta) / gamma, fused into the first
    backbone layer by a learned projection. The shared backbone runs once per call;
    head j adds its embedding to the backbone features, reads them out linearly and
    adds per-pixel read-outs of x_i and of the mapped scale whose gains depend on i.
    Head blocks are stacked with a leading T axis; slice j - 1 belongs to head j only.
    """

    config: NetworkConfig
    params: Params
    backbone_calls: int = field(default=0, compare=False)
    calls: int = field(default=0, compare=False)
    kind: ClassVar[str] = "reverse_predictor"

    @staticmethod
    def initialize(config: NetworkConfig, rng: RngStream) -> "ReversePredictor":
        generator = rng.generator()
        d, e, t = config.pixels, config.embedding_dim, config.total_steps
        h1, h2 = config.backbone_hidden
        params: Params = {
            "in.W": dense_init(generator, h1, d),
            "time.W": dense_init(generator, h1, e),
            "fuse.W": dense_init(generator, h1, d),
            "in.b": np.zeros(h1),
            "hidden.W": dense_init(generator, h2, h1),
            "hidden.b": np.zeros(h2),
            "head_embed.W": dense_init(generator, h2, e),
            "heads.W": np.stack([dense_init(generator, d, h2, gain=0.1) for _ in range(t)]),
            "heads.x": np.zeros((t, d, e)),
            "heads.scale": np.zeros((t, d, e)),
            "heads.b": np.zeros((t, d)),
        }
        return ReversePredictor(config=config, params=params)

    def _head_embeddings(self) -> Grid:
        return time_embedding(np.arange(1, self.config.total_steps + 1), self.config.embedding_dim)

    def _forward(self, x: Grid, mapped: Grid, steps: npt.NDArray[np.int64]) -> Tuple[Grid, _PredictorCache]:
        p = self.params
        self.backbone_calls += 1
        step_embedding = time_embedding(steps, self.config.embedding_dim)
        h1 = np.tanh(x @ p["in.W"].T + step_embedding @ p["time.W"].T + mapped @ p["fuse.W"].T + p["in.b"])
        h2 = np.tanh(h1 @ p["hidden.W"].T + p["hidden.b"])
        g = h2[:, None, :] + (self._head_embeddings() @ p["head_embed.W"].T)[None]
        x_gain = np.einsum("jde,be->bjd", p["heads.x"], step_embedding)
        scale_gain = np.einsum("jde,be->bjd", p["heads.scale"], step_embedding)
        z = (
            np.einsum("bjh,jdh->bjd", g, p["heads.W"])
            + x_gain * x[:, None, :]
            + scale_gain * mapped[:, None, :]
            + p["heads.b"][None]
        )
        mask = head_mask(steps, self.config.total_steps).astype(np.float64)
        z = z * mask[:, :, None]
        cache = _PredictorCache(
            x=x, mapped=mapped, step_embedding=step_embedding, h1=h1, h2=h2, g=g, mask=mask
        )
        return z, cache

    def map_scale(self, scale: npt.ArrayLike) -> Grid:
        return invert_scale(scale, self.config.gamma)

    def forward_mapped(self, x_i: npt.ArrayLike, mapped: npt.ArrayLike, steps: npt.ArrayLike) -> Grid:
        """Head outputs (B, T, H, W, C) from an already mapped scale."""
        x = _flat(x_i, self.config)
        m = _flat(mapped, self.config)
        z, _ = self._forward(x, m, _steps(steps, len(x), self.config.total_steps))
        return z.reshape((len(x), self.config.total_steps) + self.config.image_shape)

    def forward(self, x_i: npt.ArrayLike, scale: npt.ArrayLike, steps: npt.ArrayLike) -> Grid:
        return self.forward_mapped(x_i, self.map_scale(scale), steps)

    def predict(self, x_i: npt.ArrayLike, scale: npt.ArrayLike, i: int) -> Grid:
        """Every head's noise for one image, (T,) + x_i.shape; heads j > i are exactly zero."""
        x_i = np.asarray(x_i, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        require_same_shape(x_i.shape, self.config.image_shape, "predictor input")
        require_same_shape(scale.shape, x_i.shape, "predictor scale vs x_i")
        self.calls += 1
        return self.forward(x_i[None], scale[None], [i])[0]

    def sample_batch(
        self, images: Grid, rng: RngStream, size: int, scale_source: Optional[ScaleEstimator] = None
    ) -> NoiseBatch:
        return noise_batch(images, self.config.schedule, rng, size, scale_source)

    def head_losses(self, batch: NoiseBatch) -> Grid:
        """Per-head loss (T,): ||Z^j - eps~_j||^2 per pixel, averaged over the batch with masked samples as 0."""
        require(len(batch) > 0, "loss of an empty batch")
        z = self.forward(batch.x_i, batch.scale, batch.steps).reshape(len(batch), self.config.total_steps, -1)
        targets = batch.targets.reshape(z.shape)
        return np.sum((z - targets) ** 2, axis=2).mean(axis=0) / self.config.pixels

    def loss_and_grad(self, batch: NoiseBatch, heads: Optional[Sequence[int]] = None) -> Tuple[float, Params]:
        """
        Sum of head losses and its gradient; `heads` (1-based) restricts the sum.

        Heads outside `heads` and heads masked for every sample get exactly zero gradient.
        """
        require(len(batch) > 0, "loss of an empty batch")
        p = self.params
        x = _flat(batch.x_i, self.config)
        mapped = self.map_scale(batch.scale).reshape(len(x), -1)
        steps = _steps(batch.steps, len(x), self.config.total_steps)
        z, c = self._forward(x, mapped, steps)
        targets = batch.targets.reshape(z.shape)
        weight = c.mask
        if heads is not None:
            selected = np.zeros(self.config.total_steps)
            selected[np.asarray(heads, dtype=np.int64) - 1] = 1.0
            weight = weight * selected[None]
        diff = (z - targets) * weight[:, :, None]
        count, d = len(x), self.config.pixels
        loss = float(np.sum(diff**2) / (count * d))
        dz = 2.0 * diff / (count * d)

        grads: Params = {}
        grads["heads.W"] = np.einsum("bjd,bjh->jdh", dz, c.g)
        grads["heads.x"] = np.einsum("bjd,bd,be->jde", dz, x, c.step_embedding)
        grads["heads.scale"] = np.einsum("bjd,bd,be->jde", dz, mapped, c.step_embedding)
        grads["heads.b"] = dz.sum(axis=0)
        dg = np.einsum("bjd,jdh->bjh", dz, p["heads.W"])
        grads["head_embed.W"] = dg.sum(axis=0).T @ self._head_embeddings()
        da2 = dg.sum(axis=1) * (1.0 - c.h2**2)
        grads["hidden.W"] = da2.T @ c.h1
        grads["hidden.b"] = da2.sum(axis=0)
        da1 = (da2 @ p["hidden.W"]) * (1.0 - c.h1**2)
        grads["in.W"] = da1.T @ x
        grads["time.W"] = da1.T @ c.step_embedding
        grads["fuse.W"] = da1.T @ mapped
        grads["in.b"] = da1.sum(axis=0)
        return loss, {name: grads[name] for name in p}


def predict_noises(pred: ReversePredictor, x_i: npt.ArrayLike, scale_est: npt.ArrayLike, i: int) -> Grid:
    return pred.predict(x_i, scale_est, i)


def head_loss(pred: ReversePredictor, batch: NoiseBatch, j: int) -> float:
    require(1 <= j <= pred.config.total_steps, f"head must lie in [1, {pred.config.total_steps}], got {j}")
    return float(pred.head_losses(batch)[j - 1])
