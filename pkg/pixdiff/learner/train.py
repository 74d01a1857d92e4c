import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from ..core.errors import ConfigError, DivergenceError, require
from ..core.rng import RngStream
from .corpus import SyntheticCorpus
from .network import Params, ScaleEstimator, Trainable
from .optim import Adam
from .serialize import Checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

# fraction of the curve averaged at each end by `loss_decreased`
LOSS_WINDOW = 0.1


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        learning_rate (float): Adam step size.
        batch_size (int): samples per iteration.
        iterations (int): total iterations, counting any resumed ones.
        seed (int): batch k is drawn from RngStream(seed).child(k).
        beta1 (float): Adam first-moment decay.
        beta2 (float): Adam second-moment decay.
        eps (float): Adam denominator offset.
        checkpoint_every (int): iterations between checkpoints, 0 for none.
        log_every (int): iterations between progress lines.
    """

    learning_rate: float = 1e-3
    batch_size: int = 32
    iterations: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        require(self.learning_rate > 0, f"learning rate must be > 0, got {self.learning_rate}")
        require(self.batch_size >= 1, f"batch size must be >= 1, got {self.batch_size}")
        require(self.iterations >= 0, f"iterations must be >= 0, got {self.iterations}")
        require(self.checkpoint_every >= 0, f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        require(self.log_every >= 1, f"log_every must be >= 1, got {self.log_every}")
        self.optimizer()

    def optimizer(self) -> Adam:
        return Adam(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(eq=False)
class TrainResult:
    component: Trainable
    optimizer: Adam
    loss_curve: List[float]
    config: TrainConfig
    corpus_seed: Optional[int] = None

    @property
    def iterations(self) -> int:
        return len(self.loss_curve)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            component=self.component,
            optimizer=self.optimizer,
            iteration=self.iterations,
            loss_curve=list(self.loss_curve),
            train_config=self.config.to_dict(),
            corpus_seed=self.corpus_seed,
        )


def non_finite_blocks(blocks: Params) -> List[str]:
    return [name for name, block in blocks.items() if not np.all(np.isfinite(block))]


def _resume(component: Trainable, cfg: TrainConfig, checkpoint: Checkpoint) -> None:
    previous = checkpoint.train_config
    if checkpoint.component.kind != component.kind:
        raise ConfigError(f"cannot resume a {component.kind} from a {checkpoint.component.kind} checkpoint")
    if checkpoint.component.config != component.config:
        raise ConfigError("checkpoint was written for a different network config")
    for key in ("seed", "batch_size"):
        if previous.get(key) != getattr(cfg, key):
            raise ConfigError(f"resuming with {key}={getattr(cfg, key)} but the checkpoint used {previous.get(key)}")
    require(
        checkpoint.iteration <= cfg.iterations,
        f"checkpoint is already at iteration {checkpoint.iteration}, past the requested {cfg.iterations}",
    )
    for name, block in checkpoint.component.params.items():
        component.params[name] = block.copy()


def train(
    component: Trainable,
    corpus: SyntheticCorpus,
    cfg: TrainConfig,
    scale_source: Optional[ScaleEstimator] = None,
    resume: Optional[Checkpoint] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """
    Minimise the component's loss over the training split with Adam.

    `scale_source` is the frozen estimator whose outputs replace the true scale in the
    predictor's batches. With `resume`, parameters, optimiser moments and the loss curve
    continue from the checkpoint and the remaining batches are the ones an uninterrupted
    run would have drawn.
    """
    optimizer = cfg.optimizer()
    curve: List[float] = []
    if resume is not None:
        _resume(component, cfg, resume)
        optimizer = resume.optimizer
        curve = list(resume.loss_curve)
        logger.info(f"Resuming {component.kind} at iteration {len(curve)}")
    result = TrainResult(component, optimizer, curve, cfg, corpus.seed)
    stream = RngStream(cfg.seed)

    for k in range(len(curve), cfg.iterations):
        batch = component.sample_batch(corpus.train, stream.child(k), cfg.batch_size, scale_source)
        loss, grads = component.loss_and_grad(batch)
        bad = non_finite_blocks(grads)
        if not np.isfinite(loss) or bad:
            raise DivergenceError(
                f"{component.kind} diverged at iteration {k}: loss={loss}, non-finite gradients in {bad or 'none'}"
            )
        optimizer.step(component.params, grads)
        bad = non_finite_blocks(component.params)
        if bad:
            raise DivergenceError(f"{component.kind} update at iteration {k} left non-finite values in {bad}")
        curve.append(loss)

        if (k + 1) % cfg.log_every == 0:
            window = curve[-cfg.log_every :]
            logger.info(f"{component.kind} {k + 1}/{cfg.iterations}: loss {np.mean(window):.6g}")
        if checkpoint_path and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, result.checkpoint())

    if checkpoint_path:
        save_checkpoint(checkpoint_path, result.checkpoint())
    return result


def loss_decreased(curve: List[float], window: float = LOSS_WINDOW) -> bool:
    """Mean of the last `window` fraction of the curve is below the mean of the first."""
    require(len(curve) >= 2, "need at least two losses to compare")
    n = max(1, int(len(curve) * window))
    return float(np.mean(curve[-n:])) < float(np.mean(curve[:n]))


@dataclass
class BlockCheck:
    name: str
    indices: List[int]
    analytic: List[float]
    numeric: List[float]
    errors: List[float]


@dataclass
class GradientReport:
    """Analytic vs central-difference gradients on sampled coordinates of every block."""

    blocks: List[BlockCheck] = field(default_factory=list)
    tolerance: float = 1e-4
    worst_tolerance: float = 1e-2
    pass_fraction: float = 0.99

    @property
    def errors(self) -> np.ndarray:
        return np.concatenate([np.asarray(b.errors) for b in self.blocks]) if self.blocks else np.zeros(0)

    @property
    def worst(self) -> float:
        return float(self.errors.max()) if self.blocks else 0.0

    @property
    def within_tolerance(self) -> float:
        errors = self.errors
        return float(np.mean(errors < self.tolerance)) if len(errors) else 1.0

    @property
    def failing_blocks(self) -> List[str]:
        return [b.name for b in self.blocks if np.any(np.asarray(b.errors) >= self.tolerance)]

    @property
    def passed(self) -> bool:
        return self.within_tolerance >= self.pass_fraction and self.worst < self.worst_tolerance

    def summary(self) -> str:
        if self.passed:
            return f"gradient check passed: {self.within_tolerance:.1%} within {self.tolerance:g}, worst {self.worst:.3g}"
        return (
            f"gradient check failed: {self.within_tolerance:.1%} within {self.tolerance:g}, worst {self.worst:.3g}; "
            f"offending blocks: {', '.join(self.failing_blocks)}"
        )

    def csv(self) -> str:
        lines = ["block,index,analytic,numeric,relative_error"]
        for b in self.blocks:
            for index, a, n, e in zip(b.indices, b.analytic, b.numeric, b.errors):
                lines.append(f"{b.name},{index},{a!r},{n!r},{e!r}")
        return "\n".join(lines) + "\n"


def relative_gradient_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    component: Trainable,
    batch: Any,
    rng: RngStream,
    coords_per_block: int = 20,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    worst_tolerance: float = 1e-2,
    **loss_kwargs: Any,
) -> GradientReport:
    """
    Compare the hand-written gradient with central differences of the loss.

    Coordinates are sampled without replacement from each block; the parameters are
    restored exactly after every perturbation.
    """
    require(h > 0, f"finite-difference step must be > 0, got {h}")
    _, grads = component.loss_and_grad(batch, **loss_kwargs)
    generator = rng.generator()
    report = GradientReport(tolerance=tolerance, worst_tolerance=worst_tolerance)
    for name, block in component.params.items():
        indices = generator.choice(block.size, size=min(coords_per_block, block.size), replace=False)
        check = BlockCheck(name, [], [], [], [])
        for index in sorted(int(k) for k in indices):
            at = np.unravel_index(index, block.shape)
            saved = block[at]
            block[at] = saved + h
            plus = component.loss_and_grad(batch, **loss_kwargs)[0]
            block[at] = saved - h
            minus = component.loss_and_grad(batch, **loss_kwargs)[0]
            block[at] = saved
            numeric = (plus - minus) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[index])
            check.indices.append(index)
            check.analytic.append(analytic)
            check.numeric.append(numeric)
            check.errors.append(relative_gradient_error(analytic, numeric))
        report.blocks.append(check)
    if report.passed:
        logger.info(f"{component.kind}: {report.summary()}")
    else:
        logger.warning(f"{component.kind}: {report.summary()}")
    return report
