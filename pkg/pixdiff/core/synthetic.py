import numpy as np

from .errors import require
from .image import DEFAULT_EPSILON, Grid, Image, normalize_image
from .rng import RngStream


def gradient_field(generator: np.random.Generator, height: int, width: int) -> Grid:
    """A random low-frequency linear ramp plus one slow cosine, shape (H, W)."""
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    angle = generator.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xs + np.sin(angle) * ys
    phase = generator.uniform(0.0, 2.0 * np.pi)
    wave = 0.25 * np.cos(np.pi * (xs + ys) + phase)
    return ramp + wave


def blob_field(
    generator: np.random.Generator, height: int, width: int, count: int
) -> Grid:
    """Sum of `count` isotropic Gaussian bumps with random centre, width and sign."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    field = np.zeros((height, width), dtype=np.float64)
    size = max(height, width)
    for _ in range(count):
        cy = generator.uniform(0, height - 1)
        cx = generator.uniform(0, width - 1)
        sigma = generator.uniform(0.08, 0.25) * size
        amplitude = generator.uniform(0.5, 1.5) * generator.choice([-1.0, 1.0])
        field += amplitude * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))
    return field


def rescale(field: Grid, low: float, high: float) -> Grid:
    span = field.max() - field.min()
    if span == 0:
        return np.full_like(field, (low + high) / 2.0)
    return low + (high - low) * (field - field.min()) / span


def synthetic_raw(
    rng: RngStream, height: int, width: int, channels: int = 1, blobs: int = 4,
    low: float = 0.0, high: float = 1.0,
) -> Grid:
    """Raw (H, W, C) image in [low, high]: gradient plus blobs, one tint per channel."""
    require(0.0 <= low < high <= 1.0, f"raw range must satisfy 0 <= low < high <= 1, got [{low}, {high}]")
    generator = rng.generator()
    base = gradient_field(generator, height, width) + blob_field(generator, height, width, blobs)
    planes = []
    for _ in range(channels):
        tint = generator.uniform(0.8, 1.2, size=2)
        planes.append(rescale(tint[0] * base + (tint[1] - 1.0) * base**2, low, high))
    return np.stack(planes, axis=-1)


def synthetic_portrait(
    seed: int = 0, size: int = 128, channels: int = 1, epsilon: float = DEFAULT_EPSILON
) -> Image:
    """
    Deterministic smooth test image standing in for a face photograph.

    Raw values span [0.3, 1.0] so no region is black, which keeps every pixel's
    schedule decaying at a comparable order of magnitude.
    """
    raw = synthetic_raw(RngStream(seed), size, size, channels, blobs=6, low=0.3, high=1.0)
    return normalize_image(raw, epsilon)
