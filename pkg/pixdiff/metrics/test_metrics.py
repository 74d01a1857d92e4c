import numpy as np
import pytest

from ..core.errors import ConfigError, ShapeError
from ..core.rng import RngStream
from ..core.synthetic import synthetic_portrait, synthetic_raw
from ..diffusion.forward import empirical_report, simulate_chain
from ..diffusion.schedule import ScheduleConfig, baseline_linear, build_schedule
from .convergence import convergence_steps, first_stable_step
from .ssim import SsimConfig, ssim, ssim_batch


def raw_image(seed: int, size: int = 8, channels: int = 1) -> np.ndarray:
    return synthetic_raw(RngStream(seed), size, size, channels)


class TestSsim:
    def test_identity(self):
        x = raw_image(0)
        assert ssim(x, x) == 1.0

    def test_structural_inversion(self):
        x = raw_image(1)
        assert ssim(x, 1.0 - x) < 0.5

    def test_symmetric_and_bounded(self):
        for seed in range(10):
            a, b = raw_image(seed), raw_image(seed + 100)
            assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
            assert ssim(a, b) <= 1.0

    def test_noise_lowers_similarity(self):
        x = raw_image(2, size=32)
        noise = RngStream(3).generator().normal(0.0, 0.05, size=x.shape)
        assert ssim(x, x + noise) < ssim(x, x + 0.1 * noise) < 1.0

    def test_window_defaults(self):
        assert SsimConfig().window_for(8, 8) == 7
        assert SsimConfig().window_for(32, 40) == 11
        assert SsimConfig(window=5).window_for(128, 128) == 5

    def test_window_must_fit(self):
        with pytest.raises(ConfigError):
            ssim(raw_image(0), raw_image(1), SsimConfig(window=11))
        with pytest.raises(ConfigError):
            ssim(raw_image(0, size=5), raw_image(1, size=5))
        with pytest.raises(ConfigError):
            SsimConfig(window=6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(raw_image(0, size=8), raw_image(0, size=9))

    def test_channels_are_averaged(self):
        a, b = raw_image(4, channels=3), raw_image(5, channels=3)
        per_channel = [ssim(a[:, :, c], b[:, :, c]) for c in range(3)]
        assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-15)

    def test_batch(self):
        a = np.stack([raw_image(k) for k in range(4)])
        b = np.stack([raw_image(k + 10) for k in range(4)])
        expected = np.mean([ssim(x, y) for x, y in zip(a, b)])
        assert ssim_batch(a, b) == pytest.approx(expected, abs=1e-15)
        assert ssim_batch(a, a) == 1.0


class TestConvergence:
    def test_isotropic_from_start(self):
        mean = np.zeros((11, 1))
        var = np.ones((11, 1))
        assert first_stable_step(mean, var, 0.05, 0.05) == 0

    def test_never_converges(self):
        mean = np.full((11, 1), 0.5)
        var = np.ones((11, 1))
        assert first_stable_step(mean, var, 0.05, 0.05) == 11

    def test_late_violation_resets(self):
        mean = np.zeros((6, 1))
        var = np.array([[0.0], [1.0], [1.0], [0.5], [1.0], [1.0]])
        assert first_stable_step(mean, var, 0.05, 0.05) == 4

    def test_every_channel_must_qualify(self):
        mean = np.zeros((4, 2))
        var = np.ones((4, 2))
        var[2, 1] = 2.0
        assert first_stable_step(mean, var, 0.05, 0.05) == 3

    def test_bad_tolerance(self):
        with pytest.raises(ConfigError):
            first_stable_step(np.zeros((2, 1)), np.ones((2, 1)), 0.0, 0.05)

    def test_pixelwise_beats_baseline_and_is_monotone(self):
        x0 = synthetic_portrait(seed=0, size=128)
        pixel = empirical_report(
            simulate_chain(x0, build_schedule(x0, ScheduleConfig(20.0, 200)), RngStream(7), record_stride=200)
        )
        baseline = empirical_report(
            simulate_chain(x0, baseline_linear(1e-4, 0.02, 200), RngStream(7), record_stride=200)
        )
        assert convergence_steps(pixel) < convergence_steps(baseline)
        assert convergence_steps(baseline) == 201
        previous = 0
        for tol in (0.2, 0.1, 0.05, 0.03):
            step = convergence_steps(pixel, tol, tol)
            assert step >= previous
            previous = step
