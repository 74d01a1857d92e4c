import io
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from ..core.errors import ConfigError, require, require_same_shape
from ..core.image import Grid, write_frame
from ..core.rng import RngStream, sample_standard_normal
from .schedule import Coefficient, PixelSchedule, Schedule, floored, invert_scale

logger = logging.getLogger(__name__)

# smallest sqrt(alpha_bar) recover_x0 divides by
ALPHA_BAR_ROOT_FLOOR = 1e-150


@dataclass(frozen=True, eq=False)
class PosteriorParams:
    """
    Gaussian q(x_{i-1} | x_i, .) of reverse step i.

    Attributes:
        mu (Grid): posterior mean.
        beta_tilde (Coefficient): posterior variance; exactly 0 at step 1.
        step (int): i.
        guarded (bool): the (1 - alpha_bar_i) denominator was floored.
    """

    mu: Grid
    beta_tilde: Coefficient
    step: int
    guarded: bool = False


def _denominator(sched: Schedule, i: int) -> tuple:
    denominator, guarded = floored(1.0 - sched.alpha_bar(i))
    if guarded:
        logger.warning(f"1 - alpha_bar_{i} floored in the posterior at step {i}")
    return denominator, guarded


def posterior_from_x0(x_i: npt.ArrayLike, x0: npt.ArrayLike, sched: Schedule, i: int) -> PosteriorParams:
    """
    Mean in terms of the clean image:
    mu = sqrt(ab_{i-1}) beta_i / (1 - ab_i) x0 + sqrt(alpha_i) (1 - ab_{i-1}) / (1 - ab_i) x_i.

    At i = 1 the first coefficient is 1 and the second 0, so the step lands on x0 exactly.
    """
    sched.check_step(i, lowest=1)
    x_i = np.asarray(x_i, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    require_same_shape(x0.shape, x_i.shape, "posterior x0 vs x_i")
    alpha_bar_prev = sched.alpha_bar(i - 1)
    beta = sched.beta_at(i)
    denominator, guarded = _denominator(sched, i)
    x0_coef = np.sqrt(alpha_bar_prev) * beta / denominator
    x_i_coef = np.sqrt(sched.alpha_at(i)) * (1.0 - alpha_bar_prev) / denominator
    mu = x0_coef * x0 + x_i_coef * x_i
    beta_tilde = (1.0 - alpha_bar_prev) / denominator * beta
    return PosteriorParams(mu=mu, beta_tilde=beta_tilde, step=i, guarded=guarded)


def posterior_from_noise(x_i: npt.ArrayLike, eps: npt.ArrayLike, sched: Schedule, i: int) -> PosteriorParams:
    """Mean in terms of the composite noise: mu = (x_i - (1 - alpha_i) / sqrt(1 - ab_i) eps) / sqrt(alpha_i)."""
    sched.check_step(i, lowest=1)
    x_i = np.asarray(x_i, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    require_same_shape(eps.shape, x_i.shape, "posterior noise vs x_i")
    if np.any(np.asarray(sched.alpha_bar(i)) >= 1.0):
        raise ConfigError(f"alpha_bar_{i} = 1, the noise form of the posterior divides by zero")
    alpha = sched.alpha_at(i)
    beta = sched.beta_at(i)
    denominator, guarded = _denominator(sched, i)
    mu = 1.0 / np.sqrt(alpha) * (x_i - beta / np.sqrt(denominator) * eps)
    beta_tilde = (1.0 - sched.alpha_bar(i - 1)) / denominator * beta
    return PosteriorParams(mu=mu, beta_tilde=beta_tilde, step=i, guarded=guarded)


def reverse_step(
    params: PosteriorParams, rng: Optional[RngStream] = None, noise: Optional[npt.ArrayLike] = None
) -> Grid:
    """x_{i-1} = mu + sqrt(beta_tilde) z; z is suppressed at step 1."""
    if params.step == 1:
        return np.array(params.mu, dtype=np.float64, copy=True)
    if noise is None:
        require(rng is not None, "reverse_step needs either rng or noise")
        noise = sample_standard_normal(params.mu.shape, rng).data
    return params.mu + np.sqrt(params.beta_tilde) * noise


def recover_x0(x_i: npt.ArrayLike, eps: npt.ArrayLike, sched: Schedule, i: int) -> Tuple[Grid, bool]:
    """
    Invert the reparameterized forward jump: (x_i - sqrt(1 - ab_i) eps) / sqrt(ab_i).

    Returns the estimate and whether sqrt(ab_i) underflowed and was raised to
    ALPHA_BAR_ROOT_FLOOR, in which case the estimate is unreliable.
    """
    sched.check_step(i)
    x_i = np.asarray(x_i, dtype=np.float64)
    if i == 0:
        return x_i.copy(), False
    alpha_bar_i = sched.alpha_bar(i)
    root = np.sqrt(alpha_bar_i)
    guarded = bool(np.any(root < ALPHA_BAR_ROOT_FLOOR))
    if guarded:
        logger.warning(f"alpha_bar_{i} underflows; recovered x0 is unreliable")
        root = np.maximum(root, ALPHA_BAR_ROOT_FLOOR)
    return (x_i - np.sqrt(1.0 - alpha_bar_i) * np.asarray(eps, dtype=np.float64)) / root, guarded


@dataclass
class ReverseTrajectory:
    """Reverse states from x_i down to x_0; `steps[k]` is the index of `states[k]`."""

    steps: List[int] = field(default_factory=list)
    states: List[Grid] = field(default_factory=list)

    def append(self, step: int, state: Grid) -> None:
        self.steps.append(step)
        self.states.append(state)

    @property
    def final(self) -> Grid:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)


def oracle_reverse_trajectory(
    x_i: npt.ArrayLike,
    i: int,
    sched: Schedule,
    rng: RngStream,
    x0: Optional[npt.ArrayLike] = None,
    eps_sequence: Optional[Sequence[npt.ArrayLike]] = None,
    truth: Optional[Schedule] = None,
) -> ReverseTrajectory:
    """
    Walk from x_i to x_0 with ground-truth means; step j's noise comes from `rng.child(j)`.

    With `eps_sequence` (eps_sequence[j - 1] is eps~_j, e.g. a forward chain's recorded
    composite noises) every step uses the noise form. With `x0`, step j uses the noise
    consistent with the current state under `truth`; when `truth` is omitted that is the
    clean-image form on `sched` itself. Sampling on an estimated `sched` while `truth` is
    the real schedule isolates the cost of estimating the schedule.
    """
    require((x0 is None) != (eps_sequence is None), "pass exactly one of x0 or eps_sequence")
    sched.check_step(i, lowest=1)
    x_j = np.asarray(x_i, dtype=np.float64)
    if eps_sequence is not None:
        require(len(eps_sequence) >= i, f"need {i} noises, got {len(eps_sequence)}")
    else:
        x0 = np.asarray(x0, dtype=np.float64)
    traj = ReverseTrajectory()
    traj.append(i, x_j)
    for j in range(i, 0, -1):
        if eps_sequence is not None:
            params = posterior_from_noise(x_j, eps_sequence[j - 1], sched, j)
        elif truth is None:
            params = posterior_from_x0(x_j, x0, sched, j)
        else:
            denominator, _ = floored(1.0 - truth.alpha_bar(j))
            eps = (x_j - np.sqrt(truth.alpha_bar(j)) * x0) / np.sqrt(denominator)
            params = posterior_from_noise(x_j, eps, sched, j)
        x_j = reverse_step(params, rng.child(j))
        traj.append(j - 1, x_j)
    return traj


class ScaleSource(Protocol):
    def estimate(self, x_i: Grid, i: int) -> Grid:
        """Image-scale estimate in (0, 1), shaped like x_i."""
        ...


class NoiseSource(Protocol):
    def predict(self, x_i: Grid, scale: Grid, i: int) -> Grid:
        """Noise predictions for every head, stacked as (T,) + x_i.shape; heads j > i are zero."""
        ...


@dataclass
class OracleScale:
    """Returns the true image scale regardless of input."""

    scale: Grid

    def estimate(self, x_i: Grid, i: int) -> Grid:
        return np.broadcast_to(self.scale, np.shape(x_i)).copy()


@dataclass
class OracleNoise:
    """Returns recorded composite noises eps~_1..eps~_T, masked to the heads j <= i."""

    eps_sequence: Sequence[Grid]

    def predict(self, x_i: Grid, scale: Grid, i: int) -> Grid:
        stacked = np.stack([np.asarray(eps, dtype=np.float64) for eps in self.eps_sequence])
        stacked[i:] = 0.0
        return stacked


def sample_trajectory(
    x_i: npt.ArrayLike,
    i: int,
    scale_estimator: ScaleSource,
    reverse_predictor: NoiseSource,
    rng: RngStream,
) -> ReverseTrajectory:
    """
    One-shot sampling from x_i: estimate the scale, derive the schedule from it, ask the
    predictor for every noise in a single call, then run the reverse loop j = i..1.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    scale = np.asarray(scale_estimator.estimate(x_i, i), dtype=np.float64)
    require_same_shape(scale.shape, x_i.shape, "scale estimate vs x_i")
    predictions = np.asarray(reverse_predictor.predict(x_i, scale, i), dtype=np.float64)
    require(predictions.ndim == x_i.ndim + 1, f"predictions must be (T,) + {x_i.shape}, got {predictions.shape}")
    require_same_shape(predictions.shape[1:], x_i.shape, "noise predictions vs x_i")
    total_steps = predictions.shape[0]
    if not (isinstance(i, (int, np.integer)) and 1 <= i <= total_steps):
        raise ConfigError(f"step must be an integer in [1, {total_steps}], got {i}")
    sched = PixelSchedule.from_scale(scale, total_steps)
    logger.debug(f"Sampling from step {i} of {total_steps} with a single predictor call")
    return oracle_reverse_trajectory(x_i, i, sched, rng, eps_sequence=list(predictions))


def run_sampling_algorithm(
    x_i: npt.ArrayLike,
    i: int,
    scale_estimator: ScaleSource,
    reverse_predictor: NoiseSource,
    rng: RngStream,
) -> Grid:
    """Clean-image estimate x^_0 from a noisy x_i; see `sample_trajectory`."""
    return sample_trajectory(x_i, i, scale_estimator, reverse_predictor, rng).final


def schedule_only_reconstruction(
    x_i: npt.ArrayLike,
    i: int,
    scale_estimator: ScaleSource,
    gamma: float,
    total_steps: int,
    rng: RngStream,
) -> ReverseTrajectory:
    """
    Reconstruction without a noise predictor: the clean-image form driven by the
    estimated schedule and the clean estimate invert_scale(x^_delta).

    The last step returns its clean argument, so the final state equals the inverted scale.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    scale = np.asarray(scale_estimator.estimate(x_i, i), dtype=np.float64)
    require_same_shape(scale.shape, x_i.shape, "scale estimate vs x_i")
    sched = PixelSchedule.from_scale(scale, total_steps)
    return oracle_reverse_trajectory(x_i, i, sched, rng, x0=invert_scale(scale, gamma))


FRAME_COLUMNS = ["step", "channel", "mean", "var"]


class FrameSource(Protocol):
    steps: List[int]
    states: List[Grid]


def write_frames(directory: str, traj: FrameSource, prefix: str = "frame") -> str:
    """
    Write one PGM/PPM per state (clipped to [0, 1]) and frames.csv; returns the CSV path.

    Works for reverse trajectories and for recorded forward chains alike.
    """
    os.makedirs(directory, exist_ok=True)
    out = io.StringIO()
    out.write(",".join(FRAME_COLUMNS) + "\n")
    width = len(str(max(traj.steps)))
    for step, state in zip(traj.steps, traj.states):
        extension = "pgm" if state.shape[-1] == 1 else "ppm"
        write_frame(os.path.join(directory, f"{prefix}_{step:0{width}d}.{extension}"), state)
        flat = state.reshape(-1, state.shape[-1])
        for c in range(flat.shape[1]):
            out.write(f"{step},{c},{flat[:, c].mean():.10g},{flat[:, c].var():.10g}\n")
    csv_path = os.path.join(directory, "frames.csv")
    with open(csv_path, "w") as f:
        f.write(out.getvalue())
    return csv_path
