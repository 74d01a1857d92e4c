import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..core.errors import ConfigError, require, require_same_shape
from ..core.image import Grid, Image, NoiseField
from ..core.rng import RngStream, sample_standard_normal
from ..metrics.convergence import DEFAULT_MEAN_TOL, DEFAULT_VAR_TOL, first_stable_step
from .schedule import Coefficient, PixelSchedule, Schedule, floored

logger = logging.getLogger(__name__)

CleanInput = Union[Image, Grid]


def _grid(x0: CleanInput) -> Grid:
    """Image data, or a (..., H, W, C) batch of clean images as given."""
    if isinstance(x0, Image):
        return x0.data
    array = np.asarray(x0, dtype=np.float64)
    require(array.ndim >= 3, f"clean input must be (..., H, W, C), got shape {array.shape}")
    return array


def ensemble_of(x0: Image, copies: int) -> Grid:
    """`copies` identical clean images stacked on a leading batch axis."""
    require(copies >= 1, f"copies must be >= 1, got {copies}")
    return np.broadcast_to(x0.data, (copies,) + x0.shape).copy()


def _check_schedule_shape(sched: Schedule, grid_shape: Tuple[int, ...]) -> None:
    if isinstance(sched, PixelSchedule):
        tail = grid_shape[len(grid_shape) - len(sched.shape):]
        require_same_shape(tail, sched.shape, "pixel schedule vs image")


def forward_step(
    x_i: npt.ArrayLike,
    alpha_i: Coefficient,
    rng: Optional[RngStream] = None,
    noise: Optional[npt.ArrayLike] = None,
) -> Grid:
    """
    One Markov step x_{i+1} = sqrt(alpha_i) x_i + sqrt(1 - alpha_i) eps.

    `noise` pins eps; otherwise it is drawn from `rng`. alpha_i = 1 is accepted and
    leaves the state untouched.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    alpha_i = np.asarray(alpha_i, dtype=np.float64)
    if np.any(alpha_i <= 0) or np.any(alpha_i > 1):
        raise ConfigError("alpha_i must lie in (0, 1]")
    if noise is None:
        require(rng is not None, "forward_step needs either rng or noise")
        noise = sample_standard_normal(x_i.shape, rng).data
    noise = np.asarray(noise, dtype=np.float64)
    require_same_shape(noise.shape, x_i.shape, "forward_step noise")
    return np.sqrt(alpha_i) * x_i + np.sqrt(1.0 - alpha_i) * noise


def forward_jump(
    x0: CleanInput,
    sched: Schedule,
    i: int,
    rng: Optional[RngStream] = None,
    noise: Optional[npt.ArrayLike] = None,
) -> Tuple[Grid, NoiseField]:
    """Direct reparameterized sample x_i = sqrt(alpha_bar_i) x0 + sqrt(1 - alpha_bar_i) eps~."""
    grid = _grid(x0)
    sched.check_step(i)
    _check_schedule_shape(sched, grid.shape)
    if noise is None:
        require(rng is not None, "forward_jump needs either rng or noise")
        eps = sample_standard_normal(grid.shape, rng)
    else:
        eps = NoiseField(np.asarray(noise, dtype=np.float64))
        require_same_shape(eps.shape, grid.shape, "forward_jump noise")
    alpha_bar_i = sched.alpha_bar(i)
    x_i = np.sqrt(alpha_bar_i) * grid + np.sqrt(1.0 - alpha_bar_i) * eps.data
    return x_i, eps


@dataclass
class ChainMoments:
    """
    Running per-step, per-channel sums over every pixel (and batch member) of a chain.

    Row i covers step i; columns are channels. The residual is x_i - sqrt(alpha_bar_i) x0.
    """

    count: npt.NDArray[np.int64]
    total: Grid
    total_sq: Grid
    residual: Grid
    residual_sq: Grid

    @staticmethod
    def empty(total_steps: int, channels: int) -> "ChainMoments":
        zeros = lambda: np.zeros((total_steps + 1, channels), dtype=np.float64)
        return ChainMoments(
            count=np.zeros(total_steps + 1, dtype=np.int64),
            total=zeros(),
            total_sq=zeros(),
            residual=zeros(),
            residual_sq=zeros(),
        )

    def record(self, i: int, x_i: Grid, residual: Grid) -> None:
        channels = x_i.shape[-1]
        flat = x_i.reshape(-1, channels)
        flat_residual = residual.reshape(-1, channels)
        self.count[i] += flat.shape[0]
        self.total[i] += flat.sum(axis=0)
        self.total_sq[i] += (flat**2).sum(axis=0)
        self.residual[i] += flat_residual.sum(axis=0)
        self.residual_sq[i] += (flat_residual**2).sum(axis=0)

    def merge(self, other: "ChainMoments") -> "ChainMoments":
        return ChainMoments(
            count=self.count + other.count,
            total=self.total + other.total,
            total_sq=self.total_sq + other.total_sq,
            residual=self.residual + other.residual,
            residual_sq=self.residual_sq + other.residual_sq,
        )

    @property
    def mean(self) -> Grid:
        return self.total / self.count[:, np.newaxis]

    @property
    def var(self) -> Grid:
        return np.maximum(self.total_sq / self.count[:, np.newaxis] - self.mean**2, 0.0)

    @property
    def residual_var(self) -> Grid:
        n = self.count[:, np.newaxis]
        return np.maximum(self.residual_sq / n - (self.residual / n) ** 2, 0.0)


@dataclass
class ForwardTrajectory:
    """
    A forward chain x_0..x_T, stored at `steps` only.

    Attributes:
        x0 (Grid): clean input, (H, W, C) or batched (..., H, W, C).
        schedule (Schedule): the schedule that drove the chain.
        steps (List[int]): recorded step indices, always including 0 and T.
        states (List[Grid]): x_i for each recorded step.
        noises (List[Grid]): composite eps~_i reproducing states[k] from x0 in one jump.
        step_noises (List[Grid]): per-step eps_i drawn at each recorded step (zeros at step 0).
        moments (ChainMoments): statistics of every step, recorded or not.
    """

    x0: Grid
    schedule: Schedule
    steps: List[int] = field(default_factory=list)
    states: List[Grid] = field(default_factory=list)
    noises: List[Grid] = field(default_factory=list)
    step_noises: List[Grid] = field(default_factory=list)
    moments: Optional[ChainMoments] = None

    def state_at(self, i: int) -> Grid:
        try:
            return self.states[self.steps.index(i)]
        except ValueError:
            raise ConfigError(f"step {i} was not recorded")

    def noise_at(self, i: int) -> Grid:
        try:
            return self.noises[self.steps.index(i)]
        except ValueError:
            raise ConfigError(f"step {i} was not recorded")

    def eps_sequence(self) -> List[Grid]:
        """Composite noises eps~_1..eps~_T; needs a stride-1 recording."""
        require(
            len(self.steps) == self.schedule.total_steps + 1,
            "eps_sequence needs every step recorded (record_stride=1)",
        )
        return self.noises[1:]


def _composite_noise(x_i: Grid, x0: Grid, alpha_bar_i: Coefficient) -> Grid:
    denominator, _ = floored(1.0 - alpha_bar_i)
    return (x_i - np.sqrt(alpha_bar_i) * x0) / np.sqrt(denominator)


def default_stride(total_steps: int) -> int:
    return max(1, total_steps // 10)


def simulate_chain(
    x0: CleanInput, schedule: Schedule, rng: RngStream, record_stride: Optional[int] = None
) -> ForwardTrajectory:
    """
    Run the forward Markov chain for T steps, drawing step k's noise from `rng.child(k)`.

    Works for a PixelSchedule (grid alphas) and a BaselineSchedule (scalar alphas), on a
    single image or a batch with leading axes. States are kept every `record_stride`
    steps (default T // 10) plus the last one; pass 1 to keep every step.
    """
    grid = _grid(x0)
    _check_schedule_shape(schedule, grid.shape)
    total_steps = schedule.total_steps
    if record_stride is None:
        record_stride = default_stride(total_steps)
    require(
        1 <= record_stride <= total_steps,
        f"record_stride must be in [1, {total_steps}], got {record_stride}",
    )
    moments = ChainMoments.empty(total_steps, grid.shape[-1])
    traj = ForwardTrajectory(x0=grid, schedule=schedule, moments=moments)

    def keep(i: int, x_i: Grid, step_noise: Grid) -> None:
        traj.steps.append(i)
        traj.states.append(x_i)
        traj.noises.append(_composite_noise(x_i, grid, schedule.alpha_bar(i)) if i else np.zeros_like(grid))
        traj.step_noises.append(step_noise)

    x_i = grid.copy()
    moments.record(0, x_i, np.zeros_like(grid))
    keep(0, x_i, np.zeros_like(grid))
    for i in range(1, total_steps + 1):
        step_noise = sample_standard_normal(grid.shape, rng.child(i)).data
        x_i = forward_step(x_i, schedule.alpha_at(i), noise=step_noise)
        moments.record(i, x_i, x_i - np.sqrt(schedule.alpha_bar(i)) * grid)
        if i % record_stride == 0 or i == total_steps:
            keep(i, x_i, step_noise)
    logger.debug(f"Simulated {total_steps}-step chain on {grid.shape} with {rng}")
    return traj


@dataclass
class EnsembleRun:
    """Independent chains from one clean image; `moments` pools them in chain order."""

    trajectories: List[ForwardTrajectory]
    moments: ChainMoments

    @property
    def x0(self) -> Grid:
        return self.trajectories[0].x0

    @property
    def schedule(self) -> Schedule:
        return self.trajectories[0].schedule


def simulate_ensemble(
    x0: CleanInput,
    schedule: Schedule,
    rng: RngStream,
    copies: int,
    workers: Optional[int] = None,
    record_stride: Optional[int] = None,
) -> EnsembleRun:
    """Run `copies` chains on a thread pool; chain k uses `rng.child(k)`."""
    require(copies >= 1, f"copies must be >= 1, got {copies}")
    stride = record_stride or schedule.total_steps

    def run(k: int) -> ForwardTrajectory:
        return simulate_chain(x0, schedule, rng.child(k), stride)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        trajectories = list(pool.map(run, range(copies)))
    moments = trajectories[0].moments
    for traj in trajectories[1:]:
        moments = moments.merge(traj.moments)
    return EnsembleRun(trajectories=trajectories, moments=moments)


@dataclass
class TrajectoryReport:
    """
    Per-step statistics of a forward run next to their theoretical values.

    Arrays are (T+1, C). `empirical_var` is the pooled variance of x_i, whose theory is
    mean(1 - alpha_bar_i) + var(sqrt(alpha_bar_i) x0); `residual_var` is the pooled
    variance of x_i - sqrt(alpha_bar_i) x0, whose theory is mean(1 - alpha_bar_i).
    """

    steps: npt.NDArray[np.int64]
    empirical_mean: Grid
    empirical_var: Grid
    theoretical_mean: Grid
    theoretical_var: Grid
    residual_var: Grid
    theoretical_residual_var: Grid
    converged_at: int
    mean_tol: float = DEFAULT_MEAN_TOL
    var_tol: float = DEFAULT_VAR_TOL

    @property
    def total_steps(self) -> int:
        return len(self.steps) - 1

    @property
    def channels(self) -> int:
        return self.empirical_mean.shape[1]


def theoretical_moments(x0: Grid, schedule: Schedule) -> Tuple[Grid, Grid, Grid]:
    """Pooled (mean, var, residual var) of x_i implied by the schedule, per step and channel."""
    channels = x0.shape[-1]
    flat_x0 = x0.reshape(-1, channels)
    mean, var, residual_var = [], [], []
    for i in range(schedule.total_steps + 1):
        alpha_bar_i = np.broadcast_to(schedule.alpha_bar(i), x0.shape).reshape(-1, channels)
        drift = np.sqrt(alpha_bar_i) * flat_x0
        noise_var = (1.0 - alpha_bar_i).mean(axis=0)
        mean.append(drift.mean(axis=0))
        var.append(noise_var + drift.var(axis=0))
        residual_var.append(noise_var)
    return np.array(mean), np.array(var), np.array(residual_var)


def empirical_report(
    run: Union[ForwardTrajectory, EnsembleRun, List[ForwardTrajectory]],
    theory: Optional[Schedule] = None,
    mean_tol: float = DEFAULT_MEAN_TOL,
    var_tol: float = DEFAULT_VAR_TOL,
) -> TrajectoryReport:
    """
    Pool a chain's (or ensemble's) statistics over pixels and pair them with theory.

    A single trajectory gives the per-image statistics; an ensemble pools pixels
    and chains alike. `theory` defaults to the schedule that drove the run.
    """
    if isinstance(run, list):
        if not run:
            raise ConfigError("empirical_report needs at least one trajectory")
        moments = run[0].moments
        for traj in run[1:]:
            moments = moments.merge(traj.moments)
        x0, schedule = run[0].x0, run[0].schedule
    else:
        moments, x0, schedule = run.moments, run.x0, run.schedule
    if moments is None or not np.all(moments.count > 0):
        raise ConfigError("empirical_report needs a trajectory with recorded moments")
    theory = theory or schedule
    require(
        theory.total_steps == schedule.total_steps,
        f"theory has {theory.total_steps} steps, the run has {schedule.total_steps}",
    )
    theoretical_mean, theoretical_var, theoretical_residual_var = theoretical_moments(x0, theory)
    empirical_mean, empirical_var = moments.mean, moments.var
    return TrajectoryReport(
        steps=np.arange(schedule.total_steps + 1),
        empirical_mean=empirical_mean,
        empirical_var=empirical_var,
        theoretical_mean=theoretical_mean,
        theoretical_var=theoretical_var,
        residual_var=moments.residual_var,
        theoretical_residual_var=theoretical_residual_var,
        converged_at=first_stable_step(empirical_mean, empirical_var, mean_tol, var_tol),
        mean_tol=mean_tol,
        var_tol=var_tol,
    )


REPORT_COLUMNS = [
    "step",
    "channel",
    "empirical_mean",
    "empirical_var",
    "theoretical_mean",
    "theoretical_var",
    "residual_var",
    "theoretical_residual_var",
]


def report_csv(report: TrajectoryReport) -> str:
    out = io.StringIO()
    out.write(",".join(REPORT_COLUMNS) + "\n")
    columns = [
        report.empirical_mean,
        report.empirical_var,
        report.theoretical_mean,
        report.theoretical_var,
        report.residual_var,
        report.theoretical_residual_var,
    ]
    for i in report.steps:
        for c in range(report.channels):
            row = [str(i), str(c)] + ["%.10g" % column[i, c] for column in columns]
            out.write(",".join(row) + "\n")
    return out.getvalue()
