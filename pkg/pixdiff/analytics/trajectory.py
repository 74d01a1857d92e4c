"""
Expected forward trajectories in continuous time t in [0, 1].

For a drift -(b_t / 2) x_t the mean decays as x0 exp(-int_0^t b_s / 2 ds):

    conventional  b_t = a t           ->  x0 exp(-a t^2 / 4)
    pixel-wise    b_t = gamma x0      ->  x0 exp(-gamma x0 t / 2)
    generalized   b_t = gamma a t x0  ->  x0 exp(-gamma a x0 t^2 / 2)

Times broadcast against pixels: a grid of times of shape S and pixel values of shape P
give values of shape S + P.
"""
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Tuple

import numpy as np
import numpy.typing as npt

from ..core.errors import ConfigError, require
from ..core.image import Grid
from .snr import FD_STEP, FD_TOLERANCE, _prefix_end, central_difference, default_time_grid, relative_error

logger = logging.getLogger(__name__)

Family = Literal["conventional", "pixelwise", "generalized"]
FAMILIES: Tuple[Family, ...] = ("conventional", "pixelwise", "generalized")


def _times(t: npt.ArrayLike) -> Grid:
    t = np.asarray(t, dtype=np.float64)
    require(np.all((t >= 0) & (t <= 1)), "times must lie in [0, 1]")
    return t


def _outer(t: Grid, x0: Grid) -> Grid:
    return t.reshape(t.shape + (1,) * x0.ndim)


def _pixels(x0: npt.ArrayLike) -> Grid:
    x0 = np.asarray(x0, dtype=np.float64)
    require(np.all((x0 > 0) & (x0 <= 1)), "pixel values must lie in (0, 1]")
    return x0


def expected_traj_conventional(x0: npt.ArrayLike, a: float, t: npt.ArrayLike) -> Grid:
    require(a > 0, f"a must be > 0, got {a}")
    x0, t = _pixels(x0), _times(t)
    return x0 * np.exp(-a * _outer(t, x0) ** 2 / 4.0)


def expected_traj_pixelwise(x0: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Grid:
    require(gamma > 0, f"gamma must be > 0, got {gamma}")
    x0, t = _pixels(x0), _times(t)
    return x0 * np.exp(-gamma * x0 * _outer(t, x0) / 2.0)


def expected_traj_generalized(x0: npt.ArrayLike, gamma: float, a: float, t: npt.ArrayLike) -> Grid:
    require(gamma > 0 and a > 0, f"gamma and a must be > 0, got gamma={gamma}, a={a}")
    x0, t = _pixels(x0), _times(t)
    return x0 * np.exp(-gamma * a * x0 * _outer(t, x0) ** 2 / 2.0)


def conventional_rate(x0: npt.ArrayLike, a: float, t: npt.ArrayLike) -> Grid:
    x0, t = _pixels(x0), _times(t)
    return -(a * _outer(t, x0) / 2.0) * expected_traj_conventional(x0, a, t)


def pixelwise_rate(x0: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Grid:
    x0, t = _pixels(x0), _times(t)
    return -(gamma * x0 / 2.0) * expected_traj_pixelwise(x0, gamma, t)


def generalized_rate(x0: npt.ArrayLike, gamma: float, a: float, t: npt.ArrayLike) -> Grid:
    x0, t = _pixels(x0), _times(t)
    return -(gamma * a * x0 * _outer(t, x0)) * expected_traj_generalized(x0, gamma, a, t)


@dataclass(frozen=True, eq=False)
class ExpectedTrajectory:
    """
    Expected values chi(t) of one trajectory family; `values` and `rates` are (len(times),) + x0.shape.
    """

    family: Family
    params: Dict[str, float]
    x0: Grid
    times: Grid
    values: Grid
    rates: Grid = field(repr=False)

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=0) < 0))


def expected_trajectory(
    family: Family,
    x0: npt.ArrayLike,
    times: Optional[npt.ArrayLike] = None,
    gamma: Optional[float] = None,
    a: Optional[float] = None,
) -> ExpectedTrajectory:
    x0 = _pixels(np.atleast_1d(x0))
    times = np.linspace(0.0, 1.0, 101) if times is None else _times(times)
    require(times.ndim == 1 and times.size > 0, "times must be a non-empty 1-d grid")
    if family == "conventional":
        require(a is not None, "the conventional trajectory needs a")
        params = {"a": float(a)}
        values, rates = expected_traj_conventional(x0, a, times), conventional_rate(x0, a, times)
    elif family == "pixelwise":
        require(gamma is not None, "the pixel-wise trajectory needs gamma")
        params = {"gamma": float(gamma)}
        values, rates = expected_traj_pixelwise(x0, gamma, times), pixelwise_rate(x0, gamma, times)
    elif family == "generalized":
        require(gamma is not None and a is not None, "the generalized trajectory needs gamma and a")
        params = {"gamma": float(gamma), "a": float(a)}
        values = expected_traj_generalized(x0, gamma, a, times)
        rates = generalized_rate(x0, gamma, a, times)
    else:
        raise ConfigError(f"unknown trajectory family {family!r}, expected one of {FAMILIES}")
    return ExpectedTrajectory(family=family, params=params, x0=x0, times=times, values=values, rates=rates)


TRAJECTORY_COLUMNS = ["family", "t", "pixel", "x0", "value", "rate"]


def trajectory_csv(*trajectories: ExpectedTrajectory) -> str:
    out = io.StringIO()
    out.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    for traj in trajectories:
        flat_x0 = traj.x0.ravel()
        values = traj.values.reshape(len(traj.times), -1)
        rates = traj.rates.reshape(len(traj.times), -1)
        for k, t in enumerate(traj.times):
            for pixel, x in enumerate(flat_x0):
                row = [traj.family, "%.10g" % t, str(pixel), "%.10g" % x, "%.10g" % values[k, pixel], "%.10g" % rates[k, pixel]]
                out.write(",".join(row) + "\n")
    return out.getvalue()


@dataclass(frozen=True, eq=False)
class Prop2Rates:
    """
    Decay rates of the conventional, pixel-wise and generalized trajectories.

    `*_slope` are |d chi / dt|; `*_log` are |d ln chi / dt| (a t / 2, gamma x0 / 2 and
    gamma a x0 t respectively). Arrays are (len(times),) + x0.shape.
    """

    times: Grid
    conventional_slope: Grid
    pixelwise_slope: Grid
    generalized_slope: Grid
    conventional_log: Grid
    pixelwise_log: Grid
    generalized_log: Grid


def prop2_derivatives(x0: npt.ArrayLike, gamma: float, a: float, t: npt.ArrayLike) -> Prop2Rates:
    x0 = _pixels(np.atleast_1d(x0))
    t = _times(np.atleast_1d(t))
    tt = _outer(t, x0)
    return Prop2Rates(
        times=t,
        conventional_slope=np.abs(conventional_rate(x0, a, t)),
        pixelwise_slope=np.abs(pixelwise_rate(x0, gamma, t)),
        generalized_slope=np.abs(generalized_rate(x0, gamma, a, t)),
        conventional_log=np.broadcast_to(a * tt / 2.0, tt.shape[:1] + x0.shape).copy(),
        pixelwise_log=np.broadcast_to(gamma * x0 / 2.0, tt.shape[:1] + x0.shape).copy(),
        generalized_log=gamma * a * x0 * tt,
    )


def derivative_errors(x0: npt.ArrayLike, gamma: float, a: float, t: npt.ArrayLike, h: float = FD_STEP) -> Grid:
    """Worst relative error of the three analytic slopes against central differences, per time."""
    x0 = _pixels(np.atleast_1d(x0))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    require(np.all(t > h), f"finite differences need every t > h = {h}")

    # unguarded copies: a difference at t = 1 steps just past the domain
    def conventional(s: Grid) -> Grid:
        return x0 * np.exp(-a * _outer(s, x0) ** 2 / 4.0)

    def pixelwise(s: Grid) -> Grid:
        return x0 * np.exp(-gamma * x0 * _outer(s, x0) / 2.0)

    def generalized(s: Grid) -> Grid:
        return x0 * np.exp(-gamma * a * x0 * _outer(s, x0) ** 2 / 2.0)

    errors = [
        relative_error(conventional_rate(x0, a, t), central_difference(conventional, t, h)),
        relative_error(pixelwise_rate(x0, gamma, t), central_difference(pixelwise, t, h)),
        relative_error(generalized_rate(x0, gamma, a, t), central_difference(generalized, t, h)),
    ]
    return np.max([e.reshape(len(t), -1).max(axis=1) for e in errors], axis=0)


@dataclass(frozen=True)
class Prop2Verdict:
    """
    Outcome of comparing the pixel-wise and conventional decay on a grid.

    Attributes:
        hypothesis_satisfied (bool): gamma x0 > a t for every pixel and grid time.
        holds (bool): the pixel-wise log-rate exceeds the conventional one at every
            point where the hypothesis holds, and the derivatives pass the
            finite-difference check. The log-rate comparison reduces to the
            hypothesis itself, so only the finite-difference check can make this
            false; `slope_t_end` is the informative result.
        slope_t_end (Optional[float]): end of the longest grid prefix on which
            |d chi_C / dt| < |d chi_N / dt| for every pixel.
        slope_holds (bool): the absolute-slope ordering holds on the whole grid.
        violations (int): (time, pixel) points where the hypothesis fails.
        max_fd_error (float): worst relative error of the analytic derivatives.
    """

    hypothesis_satisfied: bool
    holds: bool
    slope_t_end: Optional[float]
    slope_holds: bool
    violations: int
    max_fd_error: float

    @property
    def status(self) -> str:
        if not self.hypothesis_satisfied:
            return "hypothesis not satisfied"
        return "holds" if self.holds else "fails"


def verify_prop2(
    x0: npt.ArrayLike, gamma: float, a: float, t_grid: Optional[npt.ArrayLike] = None
) -> Prop2Verdict:
    require(gamma > 0 and a > 0, f"gamma and a must be > 0, got gamma={gamma}, a={a}")
    grid = default_time_grid() if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    require(grid.ndim == 1 and grid.size > 0, "time grid must be a non-empty 1-d array")
    require(np.all(grid > FD_STEP) and np.all(grid <= 1), f"grid times must lie in ({FD_STEP}, 1]")
    require(np.all(np.diff(grid) > 0), "time grid must be strictly increasing")
    x0 = _pixels(np.atleast_1d(x0))
    rates = prop2_derivatives(x0, gamma, a, grid)
    hypothesis = gamma * x0 > a * _outer(grid, x0)
    violations = int(np.count_nonzero(~hypothesis))
    if violations:
        logger.warning(f"gamma x0 > a t fails at {violations} (time, pixel) points")
    log_ok = rates.pixelwise_log > rates.conventional_log
    slope_ok = (rates.conventional_slope < rates.pixelwise_slope).reshape(len(grid), -1).all(axis=1)
    fd_error = float(np.max(derivative_errors(x0, gamma, a, grid)))
    if fd_error >= FD_TOLERANCE:
        logger.error(f"analytic trajectory derivatives disagree with finite differences: {fd_error:.3g}")
    return Prop2Verdict(
        hypothesis_satisfied=violations == 0,
        holds=bool(np.all(log_ok[hypothesis])) and fd_error < FD_TOLERANCE,
        slope_t_end=_prefix_end(slope_ok, grid),
        slope_holds=bool(np.all(slope_ok)),
        violations=violations,
        max_fd_error=fd_error,
    )
