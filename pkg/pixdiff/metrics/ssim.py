from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import numpy.typing as npt
from skimage.metrics import structural_similarity

from ..core.errors import ConfigError, require, require_same_shape
from ..core.image import Grid, Image, as_hwc

SMALL_WINDOW = 7
LARGE_WINDOW = 11
# images at least this wide get the large window by default
LARGE_WINDOW_MIN_SIDE = 32


@dataclass(frozen=True)
class SsimConfig:
    """
    Structural similarity with a uniform (box) window.

    Attributes:
        window (Optional[int]): odd side length; None picks 7 below 32x32 and 11 otherwise.
        data_range (float): dynamic range L of the compared values.
        k1 (float): luminance stabilizer, C1 = (k1 L)^2.
        k2 (float): contrast stabilizer, C2 = (k2 L)^2.
    """

    window: Optional[int] = None
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self) -> None:
        if self.window is not None:
            require(self.window >= 3 and self.window % 2 == 1, f"SSIM window must be odd and >= 3, got {self.window}")
        require(self.data_range > 0, f"data_range must be > 0, got {self.data_range}")

    def window_for(self, height: int, width: int) -> int:
        window = self.window
        if window is None:
            window = LARGE_WINDOW if min(height, width) >= LARGE_WINDOW_MIN_SIDE else SMALL_WINDOW
        if window > min(height, width):
            raise ConfigError(f"SSIM window {window} does not fit a {height}x{width} image")
        return window


ImageLike = Union[Image, npt.ArrayLike]


def _hwc(x: ImageLike) -> Grid:
    return x.data if isinstance(x, Image) else as_hwc(x)


def ssim(a: ImageLike, b: ImageLike, cfg: Optional[SsimConfig] = None) -> float:
    """Mean local SSIM in [-1, 1]; multi-channel images average the per-channel values."""
    cfg = cfg or SsimConfig()
    a, b = _hwc(a), _hwc(b)
    require_same_shape(a.shape, b.shape, "ssim inputs")
    window = cfg.window_for(a.shape[0], a.shape[1])
    values = [
        structural_similarity(
            a[:, :, c],
            b[:, :, c],
            win_size=window,
            data_range=cfg.data_range,
            gaussian_weights=False,
            use_sample_covariance=False,
            K1=cfg.k1,
            K2=cfg.k2,
        )
        for c in range(a.shape[2])
    ]
    return float(np.mean(values))


def ssim_batch(a: npt.ArrayLike, b: npt.ArrayLike, cfg: Optional[SsimConfig] = None) -> float:
    """Mean SSIM over two (N, H, W[, C]) stacks compared pairwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    require_same_shape(a.shape, b.shape, "ssim_batch inputs")
    require(len(a) > 0, "ssim_batch needs at least one pair")
    return float(np.mean([ssim(x, y, cfg) for x, y in zip(a, b)]))
