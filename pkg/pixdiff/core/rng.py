from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import require
from .image import NoiseField

Shape = Union[int, Sequence[int]]

MAX_SEED = 2**64


@dataclass(frozen=True)
class RngStream:
    """
    An immutable handle on a counter-based random stream.

    A stream is identified by (seed, stream_id, path). Every draw made from the
    same handle yields the same numbers, so code that needs fresh randomness at
    each step derives a sub-stream with `child(step)` instead of reusing a handle.

    Attributes:
        seed (int): 64-bit run seed.
        stream_id (int): independent top-level stream (e.g. one per component).
        path (Tuple[int, ...]): child indices derived from the top-level stream.
    """

    seed: int
    stream_id: int = 0
    path: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        require(0 <= self.seed < MAX_SEED, f"seed must be a 64-bit unsigned integer, got {self.seed}")
        require(self.stream_id >= 0, f"stream_id must be non-negative, got {self.stream_id}")
        require(all(k >= 0 for k in self.path), f"stream path must be non-negative, got {self.path}")

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (index,))

    def stream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id, ())

    def generator(self) -> np.random.Generator:
        seed_sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *self.path)
        )
        return np.random.Generator(np.random.Philox(seed_sequence))

    def __str__(self) -> str:
        suffix = "".join(f"/{k}" for k in self.path)
        return f"rng:{self.seed}:{self.stream_id}{suffix}"


def sample_standard_normal(shape: Shape, rng: RngStream) -> NoiseField:
    """i.i.d. N(0, 1) float64 samples; a pure function of (shape, rng)."""
    return NoiseField(rng.generator().standard_normal(shape, dtype=np.float64))
