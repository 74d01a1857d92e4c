"""
Closed-form signal-to-noise analysis of the pixel-wise forward process.

With u = gamma t x0 the continuous-time SNR of a pixel is x0^2 / (e^u - 1), and its
time derivative is -gamma x0^3 e^u / (e^u - 1)^2. The derivative's magnitude is
h(u) / (gamma^2 t^3) with h(u) = u^3 e^u / (e^u - 1)^2, which rises on (0, u*) and
falls after it; below u* brighter pixels lose SNR faster than darker ones.
"""
import functools
import io
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.optimize import brentq

from ..core.errors import ConfigError, require
from ..core.image import Grid

logger = logging.getLogger(__name__)

DEFAULT_T_MIN = 1e-3
DEFAULT_GRID_POINTS = 200
FD_STEP = 1e-6
FD_TOLERANCE = 1e-5

Scalar = Union[float, Grid]


def _out(value: Grid) -> Scalar:
    return float(value) if np.ndim(value) == 0 else value


def _arguments(x0j: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Tuple[Grid, Grid]:
    x = np.asarray(x0j, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if not np.all(t > 0):
        raise ConfigError("SNR undefined/infinite at t=0: every t must be > 0")
    require(np.all((x > 0) & (x <= 1)), "pixel values must lie in (0, 1]")
    require(gamma > 0, f"gamma must be > 0, got {gamma}")
    return x, t


def default_time_grid(count: int = DEFAULT_GRID_POINTS, t_min: float = DEFAULT_T_MIN, t_max: float = 1.0) -> Grid:
    require(count >= 2, f"a time grid needs at least 2 points, got {count}")
    require(0 < t_min < t_max <= 1, f"time grid needs 0 < t_min < t_max <= 1, got [{t_min}, {t_max}]")
    return np.linspace(t_min, t_max, count)


def snr(x0j: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Scalar:
    """x0^2 / (exp(gamma t x0) - 1); broadcasts over x0j and t."""
    x, t = _arguments(x0j, gamma, t)
    return _out(x * x / np.expm1(gamma * t * x))


def snr_rate(x0j: npt.ArrayLike, gamma: float, t: npt.ArrayLike) -> Scalar:
    """d SNR / dt = -gamma x0^3 e^u / (e^u - 1)^2, written to stay finite for large u."""
    x, t = _arguments(x0j, gamma, t)
    u = gamma * t * x
    with np.errstate(over="ignore"):
        return _out(-gamma * x**3 / (np.expm1(u) * -np.expm1(-u)))


def central_difference(f: Callable[[Grid], Grid], t: npt.ArrayLike, h: float = FD_STEP) -> Grid:
    t = np.asarray(t, dtype=np.float64)
    return (np.asarray(f(t + h)) - np.asarray(f(t - h))) / (2.0 * h)


def relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> Grid:
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.finfo(np.float64).tiny)
    return np.abs(analytic - np.asarray(numeric)) / scale


def snr_rate_error(x0j: npt.ArrayLike, gamma: float, t: npt.ArrayLike, h: float = FD_STEP) -> Grid:
    """Relative error of snr_rate against a central difference of snr."""
    t = np.asarray(t, dtype=np.float64)
    require(np.all(t > h), f"finite differences need every t > h = {h}")
    numeric = central_difference(lambda s: snr(x0j, gamma, s), t, h)
    return relative_error(snr_rate(x0j, gamma, t), numeric)


def snr_bounds(
    x0j: npt.ArrayLike, gamma: float, t: npt.ArrayLike
) -> Tuple[Tuple[Scalar, Scalar], Tuple[Scalar, Scalar]]:
    """
    Strict sandwich bounds from u e^{u/2} < e^u - 1 < u e^u, valid for every u > 0.

    Returns ((snr_lower, snr_upper), (rate_lower, rate_upper)) where
    x0 / (gamma t e^u) < SNR < x0 / (gamma t e^{u/2}) and
    x0 e^{-u} / (gamma t^2) < |d SNR / dt| < x0 / (gamma t^2).
    """
    x, t = _arguments(x0j, gamma, t)
    u = gamma * t * x
    base = x / (gamma * t)
    rate_base = base / t
    return (
        (_out(base * np.exp(-u)), _out(base * np.exp(-u / 2.0))),
        (_out(rate_base * np.exp(-u)), _out(rate_base)),
    )


@dataclass(frozen=True, eq=False)
class SnrCurve:
    """SNR of one pixel value sampled on a time grid, with both pairs of bounds."""

    x0j: float
    gamma: float
    times: Grid
    values: Grid
    rates: Grid
    lower: Grid
    upper: Grid
    rate_lower: Grid
    rate_upper: Grid

    @property
    def decreasing(self) -> bool:
        return bool(np.all(self.values > 0) and np.all(np.diff(self.values) < 0) and np.all(self.rates < 0))

    @property
    def sandwiched(self) -> bool:
        magnitude = np.abs(self.rates)
        return bool(
            np.all(self.lower < self.values)
            and np.all(self.values < self.upper)
            and np.all(self.rate_lower < magnitude)
            and np.all(magnitude < self.rate_upper)
        )


def snr_curve(x0j: float, gamma: float, times: Optional[npt.ArrayLike] = None) -> SnrCurve:
    times = default_time_grid() if times is None else np.asarray(times, dtype=np.float64)
    require(times.ndim == 1 and times.size > 0, "times must be a non-empty 1-d grid")
    (lower, upper), (rate_lower, rate_upper) = snr_bounds(x0j, gamma, times)
    return SnrCurve(
        x0j=float(x0j),
        gamma=float(gamma),
        times=times,
        values=np.asarray(snr(x0j, gamma, times)),
        rates=np.asarray(snr_rate(x0j, gamma, times)),
        lower=np.asarray(lower),
        upper=np.asarray(upper),
        rate_lower=np.asarray(rate_lower),
        rate_upper=np.asarray(rate_upper),
    )


SNR_COLUMNS = ["t", "value", "rate", "lower_bound", "upper_bound", "rate_lower_bound", "rate_upper_bound"]


def snr_csv(curve: SnrCurve) -> str:
    out = io.StringIO()
    out.write(",".join(SNR_COLUMNS) + "\n")
    columns = [
        curve.times,
        curve.values,
        curve.rates,
        curve.lower,
        curve.upper,
        curve.rate_lower,
        curve.rate_upper,
    ]
    for k in range(len(curve.times)):
        out.write(",".join("%.10g" % column[k] for column in columns) + "\n")
    return out.getvalue()


def _peak_equation(u: float) -> float:
    # h'(u) = 0  <=>  3 (e^u - 1) = u (e^u + 1)
    return 3.0 * np.expm1(u) - u * (np.exp(u) + 1.0)


@functools.lru_cache(maxsize=None)
def critical_argument() -> float:
    """The u* at which the SNR rate magnitude h(u) = u^3 e^u / (e^u - 1)^2 peaks (about 2.575)."""
    return float(brentq(_peak_equation, 1.0, 5.0, xtol=1e-14))


def prop1_time_bound(x0_large: float, gamma: float) -> float:
    """Every t <= u* / (gamma x0_large) keeps the rate ordering for all pixels <= x0_large."""
    require(0 < x0_large <= 1, f"pixel value must lie in (0, 1], got {x0_large}")
    require(gamma > 0, f"gamma must be > 0, got {gamma}")
    return critical_argument() / (gamma * x0_large)


@dataclass(frozen=True)
class Prop1Verdict:
    """
    Outcome of comparing the SNR rates of a darker and a brighter pixel on a grid.

    Attributes:
        holds (bool): d SNR(large)/dt < d SNR(small)/dt < 0 at every grid point.
        t_delta (Optional[float]): end of the longest grid prefix on which the ordering
            holds, None when it fails at the first point.
        prefix_holds (bool): the ordering holds on [grid[0], t_delta]; true whenever t_delta exists.
        worst_t (float): grid point with the smallest relative margin.
        worst_margin (float): (rate_small - rate_large) / |rate_large| at worst_t.
        time_bound (float): analytic t below which the ordering is guaranteed.
        negative (bool): both rates are negative at every grid point.
    """

    holds: bool
    t_delta: Optional[float]
    prefix_holds: bool
    worst_t: float
    worst_margin: float
    time_bound: float
    negative: bool


def _check_grid(t_grid: npt.ArrayLike) -> Grid:
    grid = np.asarray(t_grid, dtype=np.float64)
    require(grid.ndim == 1 and grid.size > 0, "time grid must be a non-empty 1-d array")
    require(np.all(grid > 0), "SNR undefined/infinite at t=0: every grid time must be > 0")
    require(np.all(np.diff(grid) > 0), "time grid must be strictly increasing")
    return grid


def _prefix_end(ok: npt.NDArray[np.bool_], grid: Grid) -> Optional[float]:
    failing = np.flatnonzero(~ok)
    end = len(ok) if failing.size == 0 else int(failing[0])
    return None if end == 0 else float(grid[end - 1])


def verify_prop1(x0_small: float, x0_large: float, gamma: float, t_grid: npt.ArrayLike) -> Prop1Verdict:
    require(
        0 < x0_small < x0_large <= 1,
        f"need 0 < x0_small < x0_large <= 1, got x0_small={x0_small}, x0_large={x0_large}",
    )
    grid = _check_grid(t_grid)
    rate_small = np.asarray(snr_rate(x0_small, gamma, grid))
    rate_large = np.asarray(snr_rate(x0_large, gamma, grid))
    ok = (rate_large < rate_small) & (rate_small < 0)
    margin = (rate_small - rate_large) / np.abs(rate_large)
    worst = int(np.argmin(margin))
    t_delta = _prefix_end(ok, grid)
    verdict = Prop1Verdict(
        holds=bool(np.all(ok)),
        t_delta=t_delta,
        prefix_holds=t_delta is not None,
        worst_t=float(grid[worst]),
        worst_margin=float(margin[worst]),
        time_bound=prop1_time_bound(x0_large, gamma),
        negative=bool(np.all(rate_small < 0) and np.all(rate_large < 0)),
    )
    if not verdict.holds:
        logger.info(
            f"rate ordering of {x0_small:g} vs {x0_large:g} breaks after t={t_delta} "
            f"(guaranteed up to {verdict.time_bound:.6g})"
        )
    return verdict
