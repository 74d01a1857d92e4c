import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt
from PIL import Image as PILImage

from .errors import ArtifactError, ConfigError, require

logger = logging.getLogger(__name__)

# (height, width, channels) float64 array; C-order ravel is row-major, channel-interleaved
Grid = npt.NDArray[np.float64]

DEFAULT_EPSILON = 1e-3
MAXVAL = 255
SIDECAR_SUFFIX = ".eps"


def as_hwc(raw: npt.ArrayLike) -> Grid:
    """Promote a (H, W) or (H, W, C) array to float64 (H, W, C)."""
    array = np.asarray(raw, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, np.newaxis]
    if array.ndim != 3:
        raise ConfigError(f"image data must be 2-D or 3-D, got {array.ndim} dimensions")
    if array.shape[2] not in (1, 3):
        raise ConfigError(f"image must have 1 or 3 channels, got {array.shape[2]}")
    return array


def _frozen(array: Grid) -> Grid:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class NoiseField:
    """Real-valued samples shaped like the grid they perturb (ε̃ᵢ, εᵢ, z)."""

    data: Grid

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen(self.data))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Image:
    """
    A normalized pixel grid with every value in (0, 1].

    `data` has shape (height, width, channels); `flat` is its row-major,
    channel-interleaved ravel.
    """

    data: Grid

    def __post_init__(self) -> None:
        data = _frozen(as_hwc(self.data))
        if not np.all(np.isfinite(data)):
            raise ConfigError("image contains non-finite values")
        if data.size and (data.min() <= 0.0 or data.max() > 1.0):
            raise ConfigError(
                f"image values must lie in (0, 1], got [{data.min():.6g}, {data.max():.6g}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore

    @property
    def flat(self) -> Grid:
        return self.data.ravel()

    @staticmethod
    def from_flat(flat: npt.ArrayLike, height: int, width: int, channels: int = 1) -> "Image":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != height * width * channels:
            raise ConfigError(
                f"flat data has {flat.size} values, expected {height}x{width}x{channels}"
            )
        return Image(flat.reshape(height, width, channels))


def normalize_image(raw: npt.ArrayLike, epsilon: float = DEFAULT_EPSILON) -> Image:
    """
    Shift a [0, 1] raw grid by `epsilon` so no pixel is exactly zero.

    Values pushed past 1 by the shift are clamped to 1.0 so the (0, 1] invariant holds.
    """
    if not epsilon > 0:
        raise ConfigError(f"normalization epsilon must be > 0, got {epsilon}")
    array = as_hwc(raw)
    if not np.all(np.isfinite(array)):
        raise ConfigError("raw image contains non-finite values")
    if array.size and array.min() < 0.0:
        raise ConfigError(f"raw pixel values must be >= 0, got minimum {array.min():.6g}")
    if array.size and array.max() > 1.0:
        raise ConfigError(f"raw pixel values must be <= 1, got maximum {array.max():.6g}")
    return Image(np.minimum(array + epsilon, 1.0))


def to_raw(image: Image, epsilon: float = DEFAULT_EPSILON) -> Grid:
    """Undo `normalize_image` (pixels that were clamped come back as 1 - epsilon)."""
    return np.clip(image.data - epsilon, 0.0, 1.0)


def quantize(raw: Grid) -> npt.NDArray[np.uint8]:
    return np.rint(np.clip(raw, 0.0, 1.0) * MAXVAL).astype(np.uint8)


def write_image(path: str, image: Image, epsilon: float = DEFAULT_EPSILON) -> None:
    """Write a binary PGM (1 channel) or PPM (3 channels) plus a sidecar holding epsilon."""
    pixels = quantize(to_raw(image, epsilon))
    if image.channels == 1:
        pil_image = PILImage.fromarray(pixels[:, :, 0])
    else:
        pil_image = PILImage.fromarray(pixels)
    pil_image.save(path, format="PPM")
    with open(path + SIDECAR_SUFFIX, "w") as f:
        f.write(f"{epsilon!r}\n")


def write_frame(path: str, grid: Grid) -> None:
    """Write an unnormalized state (e.g. a noisy xᵢ) clipped to [0, 1]; no sidecar."""
    pixels = quantize(as_hwc(grid))
    if pixels.shape[2] == 1:
        PILImage.fromarray(pixels[:, :, 0]).save(path, format="PPM")
    else:
        PILImage.fromarray(pixels).save(path, format="PPM")


def read_epsilon(path: str) -> Optional[float]:
    sidecar = path + SIDECAR_SUFFIX
    if not os.path.exists(sidecar):
        return None
    with open(sidecar, "r") as f:
        text = f.read().strip()
    try:
        return float(text)
    except ValueError as e:
        raise ArtifactError(f"malformed epsilon sidecar {sidecar}: {text!r}") from e


def read_image(path: str, epsilon: Optional[float] = None) -> Image:
    """
    Read a PGM/PPM file and normalize it with the epsilon recorded in its sidecar.

    An explicit `epsilon` wins over the sidecar; with neither, DEFAULT_EPSILON is used.
    """
    if not os.path.exists(path):
        raise ArtifactError(f"image file not found: {path}")
    if epsilon is None:
        epsilon = read_epsilon(path)
    if epsilon is None:
        logger.warning(f"No epsilon sidecar for {path}, using {DEFAULT_EPSILON}")
        epsilon = DEFAULT_EPSILON
    with PILImage.open(path) as pil_image:
        if pil_image.mode not in ("L", "RGB"):
            pil_image = pil_image.convert("RGB")
        pixels = np.asarray(pil_image, dtype=np.float64)
    require(pixels.ndim in (2, 3), f"unsupported image layout in {path}")
    return normalize_image(pixels / MAXVAL, epsilon)
