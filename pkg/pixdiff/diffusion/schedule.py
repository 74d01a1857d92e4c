import io
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..core.errors import ConfigError, require
from ..core.image import Grid, Image

logger = logging.getLogger(__name__)

# gamma must dominate every pixel value by this factor
GAMMA_DOMINANCE = 10.0
# floor for (1 - alpha_bar) denominators, which vanish as alpha_bar -> 1
DENOMINATOR_FLOOR = 1e-15
# largest scale estimate the sampler accepts; closer to 1 the per-step alpha rounds to 1
SCALE_CEILING = 1.0 - 1e-12

Coefficient = Union[float, Grid]


def _frozen(array: npt.ArrayLike) -> Grid:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Hyper-parameters of the pixel-wise schedule.

    Attributes:
        gamma (float): decay strength; 0 < gamma < total_steps.
        total_steps (int): number of forward steps T >= 2.
    """

    gamma: float
    total_steps: int

    def __post_init__(self) -> None:
        require(self.gamma > 0, f"gamma must be > 0, got {self.gamma}")
        require(
            isinstance(self.total_steps, (int, np.integer)) and self.total_steps >= 2,
            f"total_steps must be an integer >= 2, got {self.total_steps}",
        )
        require(
            self.gamma < self.total_steps,
            f"gamma must satisfy gamma < T (got gamma={self.gamma}, T={self.total_steps})",
        )

    def validate_for(self, x0: Image) -> None:
        check_gamma_dominates(self.gamma, x0)


def check_gamma_dominates(gamma: float, x0: Image) -> None:
    largest = float(x0.data.max())
    require(
        gamma >= GAMMA_DOMINANCE * largest,
        f"gamma must be >= {GAMMA_DOMINANCE:g} x max pixel value "
        f"(got gamma={gamma}, max pixel={largest:.6g})",
    )


class Schedule(ABC):
    """Per-step retention coefficients shared by the forward and reverse processes."""

    total_steps: int

    @abstractmethod
    def alpha_at(self, i: int) -> Coefficient:
        """Retention coefficient of forward step i (1 <= i <= T): x_i = sqrt(alpha_i) x_{i-1} + ..."""
        raise NotImplementedError

    @abstractmethod
    def alpha_bar(self, i: int) -> Coefficient:
        """Cumulative retention after i steps (0 <= i <= T)."""
        raise NotImplementedError

    def beta_at(self, i: int) -> Coefficient:
        return 1.0 - self.alpha_at(i)

    def check_step(self, i: int, lowest: int = 0) -> None:
        if not (isinstance(i, (int, np.integer)) and lowest <= i <= self.total_steps):
            raise ConfigError(f"step must be an integer in [{lowest}, {self.total_steps}], got {i}")

    def alpha_bar_table(self, steps: Optional[Sequence[int]] = None) -> Grid:
        """Materialize alpha_bar for `steps` (default 0..T) stacked on a new leading axis."""
        if steps is None:
            steps = range(self.total_steps + 1)
        return np.stack([np.asarray(self.alpha_bar(i), dtype=np.float64) for i in steps])


@dataclass(frozen=True, eq=False)
class PixelSchedule(Schedule):
    """
    Image-aware schedule: every pixel j decays at its own constant rate alpha^j.

    Attributes:
        scale (Grid): image scale x_delta = exp(-gamma x0), values in (0, 1).
        alpha (Grid): per-pixel retention x_delta^(1/T).
        total_steps (int): T.
        gamma (Optional[float]): gamma when built from a clean image.
        alpha_bars (Optional[Grid]): (T+1, ...) table used instead of alpha**i when set,
            as derived by the sampler from an estimated scale.
    """

    scale: Grid
    alpha: Grid
    total_steps: int
    gamma: Optional[float] = None
    alpha_bars: Optional[Grid] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale", _frozen(self.scale))
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        if self.alpha_bars is not None:
            object.__setattr__(self, "alpha_bars", _frozen(self.alpha_bars))
            require(
                self.alpha_bars.shape == (self.total_steps + 1,) + self.alpha.shape,
                "alpha_bar table must be (T+1,) + alpha shape",
            )
        require(self.scale.shape == self.alpha.shape, "scale and alpha must share a shape")
        if not (np.all(self.alpha > 0) and np.all(self.alpha < 1)):
            raise ConfigError("every per-pixel alpha must lie strictly inside (0, 1)")

    @property
    def beta(self) -> Grid:
        return 1.0 - self.alpha

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.alpha.shape

    def alpha_at(self, i: int) -> Grid:
        self.check_step(i, lowest=1)
        return self.alpha

    def alpha_bar(self, i: int) -> Grid:
        self.check_step(i)
        if self.alpha_bars is not None:
            return self.alpha_bars[i]
        return np.power(self.alpha, i)

    def alpha_bar_product(self, i: int) -> Grid:
        """alpha_bar as the explicit running product of per-step alphas."""
        self.check_step(i)
        product = np.ones_like(self.alpha)
        for _ in range(i):
            product = product * self.alpha
        return product

    @staticmethod
    def from_scale(scale: npt.ArrayLike, total_steps: int) -> "PixelSchedule":
        """The schedule the sampler derives from an (estimated) scale, alpha_bar tabulated."""
        scale = clamp_scale(scale)
        alpha, alpha_bars, _ = schedule_from_scale(scale, total_steps)
        return PixelSchedule(
            scale=scale,
            alpha=alpha,
            total_steps=total_steps,
            alpha_bars=alpha_bars,
        )


@dataclass(frozen=True, eq=False)
class BaselineSchedule(Schedule):
    """Conventional scalar schedule with betas rising linearly from beta_min to beta_max."""

    beta_min: float
    beta_max: float
    total_steps: int
    betas: Grid
    alpha_bars: Grid

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", _frozen(self.betas))
        object.__setattr__(self, "alpha_bars", _frozen(self.alpha_bars))

    def alpha_at(self, i: int) -> float:
        self.check_step(i, lowest=1)
        return 1.0 - float(self.betas[i - 1])

    def alpha_bar(self, i: int) -> float:
        self.check_step(i)
        return float(self.alpha_bars[i])


def image_scale(x0: Image, gamma: float, total_steps: Optional[int] = None) -> Grid:
    """x_delta = exp(-gamma x0), element-wise; every value lies in (0, 1)."""
    if total_steps is not None:
        ScheduleConfig(gamma, total_steps)
    require(gamma > 0, f"gamma must be > 0, got {gamma}")
    check_gamma_dominates(gamma, x0)
    return np.exp(-gamma * x0.data)


def build_schedule(x0: Image, cfg: ScheduleConfig) -> PixelSchedule:
    """Pixel-wise schedule alpha^j = exp(-gamma x0^j / T)."""
    cfg.validate_for(x0)
    scale = np.exp(-cfg.gamma * x0.data)
    alpha = np.exp(-cfg.gamma * x0.data / cfg.total_steps)
    return PixelSchedule(scale=scale, alpha=alpha, total_steps=cfg.total_steps, gamma=cfg.gamma)


def alpha_bar(sched: Schedule, i: int) -> Coefficient:
    return sched.alpha_bar(i)


def alpha_bar_continuous(x0: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Grid:
    """Continuous-time alpha_bar(t) = exp(-gamma t x0); alpha_bar(i / T) equals the discrete alpha_bar_i."""
    return np.exp(-gamma * np.asarray(t, dtype=np.float64) * np.asarray(x0, dtype=np.float64))


def floored(denominator: Coefficient) -> Tuple[Coefficient, bool]:
    """Apply DENOMINATOR_FLOOR; the flag reports whether any element was raised."""
    guarded = bool(np.any(np.asarray(denominator) < DENOMINATOR_FLOOR))
    if guarded:
        return np.maximum(denominator, DENOMINATOR_FLOOR), True
    return denominator, False


def beta_tilde(sched: Schedule, i: int) -> Tuple[Coefficient, bool]:
    """Posterior variance ((1 - alpha_bar_{i-1}) / (1 - alpha_bar_i)) beta_i and its guard flag."""
    sched.check_step(i, lowest=1)
    denominator, guarded = floored(1.0 - sched.alpha_bar(i))
    return (1.0 - sched.alpha_bar(i - 1)) / denominator * sched.beta_at(i), guarded


def clamp_scale(scale_estimate: npt.ArrayLike) -> Grid:
    """Validate a scale estimate in (0, 1) and pull values above SCALE_CEILING down to it."""
    scale = np.asarray(scale_estimate, dtype=np.float64)
    if not (np.all(scale > 0) and np.all(scale < 1)):
        raise ConfigError("scale estimate must lie strictly inside (0, 1)")
    saturated = scale > SCALE_CEILING
    if np.any(saturated):
        logger.warning(f"{int(saturated.sum())} scale estimates clamped to {SCALE_CEILING!r}")
        scale = np.minimum(scale, SCALE_CEILING)
    return scale


def schedule_from_scale(
    scale_estimate: npt.ArrayLike, total_steps: int, tables: bool = True
) -> Tuple[Grid, Optional[Grid], Optional[Grid]]:
    """
    Derive the schedule from an (estimated) image scale, as the sampler does.

    Returns alpha, and when `tables` is set the (T+1, ...) tables of alpha_bar_j and
    beta_tilde_j indexed by j (row 0 holds alpha_bar_0 = 1 and an unused beta_tilde_0 = 0).
    """
    require(
        isinstance(total_steps, (int, np.integer)) and total_steps >= 2,
        f"total_steps must be an integer >= 2, got {total_steps}",
    )
    scale = clamp_scale(scale_estimate)
    log_scale = np.log(scale)
    alpha = np.minimum(np.exp(log_scale / total_steps), np.nextafter(1.0, 0.0))
    if not tables:
        return alpha, None, None
    steps = np.arange(total_steps + 1, dtype=np.float64).reshape((-1,) + (1,) * scale.ndim)
    alpha_bars = np.exp(steps / total_steps * log_scale)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.minimum(alpha_bars[1:], alpha)
    alpha_bars[1] = alpha
    beta_tildes = np.zeros_like(alpha_bars)
    denominator, guarded = floored(1.0 - alpha_bars[1:])
    if guarded:
        logger.warning(f"beta_tilde denominator floored at {DENOMINATOR_FLOOR:g}")
    beta_tildes[1:] = (1.0 - alpha_bars[:-1]) / denominator * (1.0 - alpha)
    return alpha, alpha_bars, beta_tildes


def baseline_linear(beta_min: float, beta_max: float, total_steps: int) -> BaselineSchedule:
    """beta_i = beta_min + (i - 1)(beta_max - beta_min)/(T - 1), i in 1..T."""
    require(
        0 < beta_min < beta_max < 1,
        f"baseline needs 0 < beta_min < beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}",
    )
    require(
        isinstance(total_steps, (int, np.integer)) and total_steps >= 2,
        f"total_steps must be an integer >= 2, got {total_steps}",
    )
    steps = np.arange(total_steps, dtype=np.float64)
    betas = beta_min + steps * (beta_max - beta_min) / (total_steps - 1)
    betas[-1] = beta_max
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return BaselineSchedule(
        beta_min=beta_min,
        beta_max=beta_max,
        total_steps=total_steps,
        betas=betas,
        alpha_bars=alpha_bars,
    )


def constant_baseline(beta: float, total_steps: int) -> BaselineSchedule:
    """Scalar schedule with the same beta at every step; on a uniform image it equals the pixel-wise one."""
    require(0 < beta < 1, f"constant baseline needs 0 < beta < 1, got {beta}")
    require(
        isinstance(total_steps, (int, np.integer)) and total_steps >= 2,
        f"total_steps must be an integer >= 2, got {total_steps}",
    )
    betas = np.full(total_steps, beta, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return BaselineSchedule(
        beta_min=beta, beta_max=beta, total_steps=total_steps, betas=betas, alpha_bars=alpha_bars
    )


def matched_baseline(x0: Image, cfg: ScheduleConfig) -> BaselineSchedule:
    """Constant scalar schedule whose alpha is the pixel-wise alpha of the mean pixel value."""
    return constant_baseline(1.0 - float(np.exp(-cfg.gamma * x0.data.mean() / cfg.total_steps)), cfg.total_steps)


def schedule_csv(sched: PixelSchedule, x0: Optional[Image] = None, steps: Sequence[int] = ()) -> str:
    """CSV with one row per pixel (flat order): pixel, x0, scale, alpha, alpha_bar_<i>..."""
    columns: List[str] = ["pixel", "x0", "scale", "alpha"] + [f"alpha_bar_{i}" for i in steps]
    values = [
        np.full(sched.alpha.size, np.nan) if x0 is None else x0.data.ravel(),
        sched.scale.ravel(),
        sched.alpha.ravel(),
    ] + [np.asarray(sched.alpha_bar(i)).ravel() for i in steps]
    out = io.StringIO()
    out.write(",".join(columns) + "\n")
    for pixel in range(sched.alpha.size):
        row = [str(pixel)] + ["%.10g" % column[pixel] for column in values]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def invert_scale(scale: npt.ArrayLike, gamma: float) -> Grid:
    """Clean-image estimate -ln(x_delta) / gamma from an (estimated) image scale."""
    scale = np.asarray(scale, dtype=np.float64)
    require(gamma > 0, f"gamma must be > 0, got {gamma}")
    if not (np.all(scale > 0) and np.all(scale < 1)):
        raise ConfigError("scale must lie strictly inside (0, 1) to be inverted")
    return -np.log(scale) / gamma
