import math
import os

import numpy as np
import pytest

from ..core.errors import ConfigError, ShapeError
from ..core.image import Image, normalize_image
from ..core.rng import RngStream, sample_standard_normal
from ..core.synthetic import synthetic_raw
from ..metrics.ssim import ssim
from ..util import qcheck
from .forward import ensemble_of, forward_jump, forward_step, simulate_chain
from .posterior import (
    OracleNoise,
    OracleScale,
    PosteriorParams,
    oracle_reverse_trajectory,
    posterior_from_noise,
    posterior_from_x0,
    recover_x0,
    reverse_step,
    run_sampling_algorithm,
    sample_trajectory,
    schedule_only_reconstruction,
    write_frames,
)
from .schedule import (
    BaselineSchedule,
    PixelSchedule,
    ScheduleConfig,
    baseline_linear,
    build_schedule,
    image_scale,
    invert_scale,
)


def small_image() -> Image:
    return Image(np.array([[0.2, 0.5], [0.7, 1.0]]))


def toy_image(seed: int) -> Image:
    return normalize_image(synthetic_raw(RngStream(seed), 8, 8, low=0.05, high=0.95))


class TestPosteriorForms:
    def test_first_step_has_zero_variance_and_lands_on_x0(self):
        x0 = small_image()
        for sched in (build_schedule(x0, ScheduleConfig(20.0, 200)), baseline_linear(1e-4, 0.02, 200)):
            x_1, _ = forward_jump(x0, sched, 1, RngStream(0))
            params = posterior_from_x0(x_1, x0.data, sched, 1)
            assert np.all(np.asarray(params.beta_tilde) == 0.0)
            assert np.array_equal(params.mu, x0.data)

    def test_clean_and_noise_forms_agree(self):
        gen_case = qcheck.gen_bind(
            qcheck.gen_tuple(qcheck.gen_range(12, 500), qcheck.gen_array((2, 2, 1), 1e-2, 1.0)),
            lambda drawn: qcheck.gen_tuple(
                qcheck.lift(drawn[1]),
                qcheck.gen_uniform(10.0 * drawn[1].max(), drawn[0]),
                qcheck.lift(drawn[0]),
                qcheck.gen_range(1, drawn[0]),
                qcheck.gen_normal(drawn[1].shape),
            ),
        )

        def forms_agree(case):
            x0, gamma, total_steps, step, eps = case
            sched = build_schedule(Image(x0), ScheduleConfig(gamma, total_steps))
            x_i, _ = forward_jump(x0, sched, step, noise=eps)
            clean = posterior_from_x0(x_i, x0, sched, step)
            noisy = posterior_from_noise(x_i, eps, sched, step)
            return np.max(np.abs(clean.mu - noisy.mu)) < 1e-10 and np.allclose(
                clean.beta_tilde, noisy.beta_tilde, rtol=1e-14, atol=0
            )

        qcheck.check_or_fail(forms_agree, gen_case, RngStream(17), count=10_000)

    def test_forms_agree_on_baseline(self):
        x0 = small_image()
        sched = baseline_linear(1e-4, 0.02, 500)
        for step in (1, 2, 100, 250, 500):
            x_i, eps = forward_jump(x0, sched, step, RngStream(step))
            clean = posterior_from_x0(x_i, x0.data, sched, step)
            noisy = posterior_from_noise(x_i, eps.data, sched, step)
            assert np.max(np.abs(clean.mu - noisy.mu)) < 1e-10

    def test_zero_noise(self):
        x0 = small_image()
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        x_i = np.full(x0.shape, 0.3)
        params = posterior_from_noise(x_i, np.zeros(x0.shape), sched, 50)
        assert np.allclose(params.mu, x_i / np.sqrt(sched.alpha), rtol=1e-15, atol=0)

    def test_last_step_is_well_conditioned(self):
        x0 = Image(np.full((1, 1, 1), 0.5))
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        assert 1.0 - sched.alpha_bar(200)[0, 0, 0] == pytest.approx(0.9999546, abs=1e-7)
        params = posterior_from_noise(np.full((1, 1, 1), 0.1), np.ones((1, 1, 1)), sched, 200)
        assert np.all(np.isfinite(params.mu)) and not params.guarded
        assert 0.0 < params.beta_tilde[0, 0, 0] < 1.0

    def test_noise_form_rejects_unit_alpha_bar(self):
        sched = BaselineSchedule(
            beta_min=0.0, beta_max=0.1, total_steps=2, betas=np.array([0.0, 0.1]), alpha_bars=np.array([1.0, 1.0, 0.9])
        )
        with pytest.raises(ConfigError):
            posterior_from_noise(np.zeros(3), np.zeros(3), sched, 1)

    def test_shape_checked(self):
        sched = build_schedule(small_image(), ScheduleConfig(20.0, 200))
        with pytest.raises(ShapeError):
            posterior_from_x0(np.zeros((2, 2, 1)), np.zeros((3, 2, 1)), sched, 5)


class TestReverseStep:
    def test_zero_variance_returns_mean(self):
        mu = np.linspace(-1.0, 1.0, 12).reshape(2, 2, 3)
        params = PosteriorParams(mu=mu, beta_tilde=np.zeros_like(mu), step=7)
        assert np.array_equal(reverse_step(params, RngStream(0)), mu)

    def test_first_step_suppresses_noise(self):
        mu = np.full((2, 2, 1), 0.25)
        params = PosteriorParams(mu=mu, beta_tilde=np.full_like(mu, 0.5), step=1)
        assert np.array_equal(reverse_step(params, RngStream(0)), mu)

    def test_variance(self):
        n = 100_000
        params = PosteriorParams(mu=np.full(n, 0.4), beta_tilde=0.3, step=5)
        out = reverse_step(params, RngStream(1))
        assert abs(out.mean() - 0.4) < 3 * math.sqrt(0.3 / n)
        assert abs(out.var(ddof=1) - 0.3) < 3 * 0.3 * math.sqrt(2.0 / (n - 1))

    def test_composition_reproduces_marginal(self):
        x0 = small_image()
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        n, i = 100_000, 30
        batch = ensemble_of(x0, n)
        x_i, _ = forward_jump(batch, sched, i, RngStream(2))
        x_prev = reverse_step(posterior_from_x0(x_i, batch, sched, i), RngStream(3))
        alpha_bar_prev = sched.alpha_bar(i - 1)
        var = 1.0 - alpha_bar_prev
        assert np.all(np.abs(x_prev.mean(axis=0) - np.sqrt(alpha_bar_prev) * x0.data) < 4 * np.sqrt(var / n))
        assert np.all(np.abs(x_prev.var(axis=0, ddof=1) - var) < 4 * var * math.sqrt(2.0 / (n - 1)))


class TestRecoverX0:
    def test_round_trip(self):
        x0 = small_image()
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        for i in (1, 17, 100, 200):
            x_i, eps = forward_jump(x0, sched, i, RngStream(i))
            recovered, guarded = recover_x0(x_i, eps.data, sched, i)
            assert np.max(np.abs(recovered - x0.data)) < 1e-10
            assert not guarded

    def test_wrong_noise_is_amplified(self):
        x0 = Image(np.full((1, 1, 1), 0.5))
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        x_i, _ = forward_jump(x0, sched, 200, noise=np.zeros((1, 1, 1)))
        recovered, _ = recover_x0(x_i, np.ones((1, 1, 1)), sched, 200)
        error = recovered - x0.data
        assert abs(error[0, 0, 0]) == pytest.approx(148.4, rel=1e-3)

    def test_step_zero_is_identity(self):
        x0 = small_image()
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        recovered, guarded = recover_x0(x0.data, np.ones(x0.shape), sched, 0)
        assert np.array_equal(recovered, x0.data) and not guarded

    def test_underflow_is_flagged(self):
        alpha = np.array([1e-200])
        sched = PixelSchedule(scale=np.array([1e-300]), alpha=alpha, total_steps=2)
        recovered, guarded = recover_x0(np.array([0.5]), np.array([0.25]), sched, 2)
        assert guarded
        assert np.all(np.isfinite(recovered))
        _, guarded = recover_x0(np.array([0.5]), np.array([0.25]), sched, 1)
        assert not guarded


class TestOracleTrajectory:
    def test_clean_oracle_reaches_the_image(self):
        scores = []
        for seed in range(8):
            x0 = toy_image(seed)
            sched = build_schedule(x0, ScheduleConfig(10.0, 20))
            x_i, _ = forward_jump(x0, sched, 20, RngStream(seed))
            traj = oracle_reverse_trajectory(x_i, 20, sched, RngStream(seed + 50), x0=x0.data)
            assert traj.steps == list(range(20, -1, -1))
            scores.append(ssim(np.clip(traj.final, 0.0, 1.0), x0))
        assert np.mean(scores) >= 0.95

    def test_estimated_schedule_degrades_quality(self):
        oracle, estimated = [], []
        for seed in range(8):
            x0 = toy_image(seed)
            truth = build_schedule(x0, ScheduleConfig(10.0, 20))
            x_i, _ = forward_jump(x0, truth, 20, RngStream(seed))
            wobble = RngStream(seed + 200).generator().normal(0.0, 0.3, size=x0.shape)
            guess = PixelSchedule.from_scale(np.exp(np.log(truth.scale) * np.exp(wobble)), 20)
            rng = RngStream(seed + 100)
            exact = oracle_reverse_trajectory(x_i, 20, truth, rng, x0=x0.data, truth=truth)
            rough = oracle_reverse_trajectory(x_i, 20, guess, rng, x0=x0.data, truth=truth)
            oracle.append(ssim(np.clip(exact.final, 0.0, 1.0), x0))
            estimated.append(ssim(np.clip(rough.final, 0.0, 1.0), x0))
        assert np.mean(estimated) < np.mean(oracle)

    def test_recorded_noises_drive_the_noise_form(self):
        x0 = toy_image(3)
        sched = build_schedule(x0, ScheduleConfig(10.0, 20))
        forward = simulate_chain(x0, sched, RngStream(4), record_stride=1)
        traj = oracle_reverse_trajectory(forward.states[-1], 20, sched, RngStream(5), eps_sequence=forward.eps_sequence())
        assert len(traj) == 21
        assert np.all(np.isfinite(traj.final))

    def test_single_first_step_is_deterministic(self):
        x0 = small_image()
        sched = build_schedule(x0, ScheduleConfig(20.0, 200))
        x_1, _ = forward_jump(x0, sched, 1, RngStream(0))
        a = oracle_reverse_trajectory(x_1, 1, sched, RngStream(1), x0=x0.data).final
        b = oracle_reverse_trajectory(x_1, 1, sched, RngStream(2), x0=x0.data).final
        assert np.array_equal(a, b)
        assert np.array_equal(a, x0.data)

    def test_exactly_one_oracle_source(self):
        sched = build_schedule(small_image(), ScheduleConfig(20.0, 200))
        with pytest.raises(ConfigError):
            oracle_reverse_trajectory(np.zeros((2, 2, 1)), 3, sched, RngStream(0))


class CountingNoise:
    def __init__(self, source):
        self.source = source
        self.calls = 0

    def predict(self, x_i, scale, i):
        self.calls += 1
        return self.source.predict(x_i, scale, i)


class TestSamplingAlgorithm:
    def setup_method(self):
        self.x0 = toy_image(9)
        self.sched = build_schedule(self.x0, ScheduleConfig(10.0, 20))
        self.forward = simulate_chain(self.x0, self.sched, RngStream(10), record_stride=1)
        self.scale = OracleScale(image_scale(self.x0, 10.0))
        self.noise = OracleNoise(self.forward.eps_sequence())

    def test_oracle_sources_match_oracle_trajectory(self):
        for i in (20, 10, 3):
            x_i = self.forward.state_at(i)
            sampled = sample_trajectory(x_i, i, self.scale, self.noise, RngStream(11))
            derived = PixelSchedule.from_scale(self.scale.scale, 20)
            oracle = oracle_reverse_trajectory(
                x_i, i, derived, RngStream(11), eps_sequence=self.forward.eps_sequence()
            )
            for a, b in zip(sampled.states, oracle.states):
                assert np.array_equal(a, b)
            truth = oracle_reverse_trajectory(x_i, i, self.sched, RngStream(11), eps_sequence=self.forward.eps_sequence())
            assert np.max(np.abs(sampled.final - truth.final)) < 1e-6

    def test_predictor_runs_once(self):
        for i in (20, 7, 1):
            counting = CountingNoise(self.noise)
            run_sampling_algorithm(self.forward.state_at(i), i, self.scale, counting, RngStream(0))
            assert counting.calls == 1

    def test_first_step_is_deterministic(self):
        x_1 = self.forward.state_at(1)
        a = run_sampling_algorithm(x_1, 1, self.scale, self.noise, RngStream(1))
        b = run_sampling_algorithm(x_1, 1, self.scale, self.noise, RngStream(2))
        assert np.array_equal(a, b)
        assert np.max(np.abs(a - self.x0.data)) < 1e-10

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            run_sampling_algorithm(self.forward.state_at(5), 5, _Fixed(np.full((4, 4, 1), 0.5)), self.noise, RngStream(0))
        bad_noise = OracleNoise([np.zeros((4, 4, 1))] * 20)
        with pytest.raises(ShapeError):
            run_sampling_algorithm(self.forward.state_at(5), 5, self.scale, bad_noise, RngStream(0))

    def test_saturated_scale_estimate(self):
        shape = self.x0.shape
        for top in (np.nextafter(1.0, 0.0), 1.0 - 1e-13):
            saturated = OracleScale(np.full(shape, top))
            silent = OracleNoise([np.zeros(shape)] * 20)
            for i in (20, 1):
                x0_hat = run_sampling_algorithm(np.zeros(shape), i, saturated, silent, RngStream(0))
                assert np.all(np.isfinite(x0_hat))

    def test_step_range(self):
        with pytest.raises(ConfigError):
            run_sampling_algorithm(self.forward.state_at(0), 0, self.scale, self.noise, RngStream(0))

    def test_schedule_only_ends_on_inverted_scale(self):
        x_i = self.forward.state_at(12)
        traj = schedule_only_reconstruction(x_i, 12, self.scale, 10.0, 20, RngStream(3))
        assert np.array_equal(traj.final, invert_scale(self.scale.scale, 10.0))
        assert np.max(np.abs(traj.final - self.x0.data)) < 1e-12

    def test_frames(self, tmp_path):
        traj = sample_trajectory(self.forward.state_at(4), 4, self.scale, self.noise, RngStream(0))
        csv_path = write_frames(str(tmp_path), traj)
        names = sorted(os.listdir(tmp_path))
        assert names == ["frame_0.pgm", "frame_1.pgm", "frame_2.pgm", "frame_3.pgm", "frame_4.pgm", "frames.csv"]
        with open(csv_path) as f:
            lines = f.read().splitlines()
        assert lines[0] == "step,channel,mean,var"
        assert len(lines) == 6
        assert lines[1].startswith("4,0,")


class _Fixed:
    def __init__(self, value):
        self.value = value

    def estimate(self, x_i, i):
        return self.value


def scalar_reference_chain(x0, alphas, alpha_bars, forward_noises, reverse_noises, i):
    """Textbook scalar DDPM, one pixel at a time, with plain Python floats."""
    out = []
    for p in range(len(x0)):
        x = x0[p]
        for k in range(1, i + 1):
            a = alphas[k]
            x = math.sqrt(a) * x + math.sqrt(1.0 - a) * forward_noises[k - 1][p]
        states = [x]
        for j in range(i, 0, -1):
            a, ab, ab_prev = alphas[j], alpha_bars[j], alpha_bars[j - 1]
            beta = 1.0 - a
            denominator = 1.0 - ab
            mu = math.sqrt(ab_prev) * beta / denominator * x0[p] + math.sqrt(a) * (1.0 - ab_prev) / denominator * x
            beta_tilde = (1.0 - ab_prev) / denominator * beta
            x = mu if j == 1 else mu + math.sqrt(beta_tilde) * reverse_noises[j][p]
            states.append(x)
        out.append(states)
    return out


def test_uniform_image_matches_scalar_reference_bit_for_bit():
    x0 = Image(np.full((2, 3, 1), 0.4))
    sched = build_schedule(x0, ScheduleConfig(20.0, 50))
    i = 12
    alpha = float(sched.alpha.flat[0])
    alphas = [None] + [alpha] * 50
    alpha_bars = [float(sched.alpha_bar(k).flat[0]) for k in range(51)]

    forward_noises = [sample_standard_normal(x0.shape, RngStream(1).child(k)).data for k in range(1, i + 1)]
    x_i = x0.data
    for k in range(1, i + 1):
        x_i = forward_step(x_i, sched.alpha_at(k), noise=forward_noises[k - 1])
    rng = RngStream(2)
    traj = oracle_reverse_trajectory(x_i, i, sched, rng, x0=x0.data)

    reverse_noises = {j: sample_standard_normal(x0.shape, rng.child(j)).data.ravel() for j in range(2, i + 1)}
    reference = scalar_reference_chain(
        list(x0.flat), alphas, alpha_bars, [n.ravel() for n in forward_noises], reverse_noises, i
    )
    for p, states in enumerate(reference):
        assert [float(s.flat[p]) for s in traj.states] == states
