import numpy as np
import pytest

from .errors import ConfigError
from .rng import RngStream, sample_standard_normal


def test_standard_normal_moments():
    samples = sample_standard_normal(10**6, RngStream(2024)).data
    assert abs(samples.mean()) < 0.005
    assert abs(samples.var() - 1.0) < 0.01


def test_same_stream_is_bit_identical():
    a = sample_standard_normal((64, 3), RngStream(7, 1)).data
    b = sample_standard_normal((64, 3), RngStream(7, 1)).data
    assert np.array_equal(a, b)


def test_streams_are_uncorrelated():
    n = 10**6
    a = sample_standard_normal(n, RngStream(7, 0)).data
    b = sample_standard_normal(n, RngStream(7, 1)).data
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_children_differ_from_parent_and_each_other():
    root = RngStream(99)
    draws = [sample_standard_normal(8, s).data for s in (root, root.child(0), root.child(1))]
    assert not np.array_equal(draws[0], draws[1])
    assert not np.array_equal(draws[1], draws[2])
    assert np.array_equal(draws[1], sample_standard_normal(8, RngStream(99).child(0)).data)


def test_rejects_negative_seed():
    with pytest.raises(ConfigError):
        RngStream(-1)
