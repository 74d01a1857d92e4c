from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from ..core.errors import require

if TYPE_CHECKING:
    from ..diffusion.forward import TrajectoryReport

DEFAULT_MEAN_TOL = 0.05
DEFAULT_VAR_TOL = 0.05


def first_stable_step(
    mean: npt.ArrayLike, var: npt.ArrayLike, mean_tol: float, var_tol: float
) -> int:
    """
    Smallest i from which every later row satisfies |mean| < mean_tol and |var - 1| < var_tol.

    Rows are steps, columns channels (all channels must qualify). Returns len(mean),
    i.e. T + 1, when the last step does not qualify.
    """
    require(mean_tol > 0 and var_tol > 0, f"tolerances must be > 0, got {mean_tol}, {var_tol}")
    mean = np.asarray(mean, dtype=np.float64).reshape(len(mean), -1)
    var = np.asarray(var, dtype=np.float64).reshape(len(var), -1)
    ok = np.all((np.abs(mean) < mean_tol) & (np.abs(var - 1.0) < var_tol), axis=1)
    failing = np.flatnonzero(~ok)
    return 0 if failing.size == 0 else int(failing[-1]) + 1


def convergence_steps(
    report: "TrajectoryReport", mean_tol: float = DEFAULT_MEAN_TOL, var_tol: float = DEFAULT_VAR_TOL
) -> int:
    return first_stable_step(report.empirical_mean, report.empirical_var, mean_tol, var_tol)
