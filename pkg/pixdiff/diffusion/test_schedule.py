import difflib
import math
import os

import numpy as np
import pytest

from ..core.errors import ConfigError
from ..core.image import Image
from ..core.rng import RngStream
from ..util import qcheck
from .schedule import (
    DENOMINATOR_FLOOR,
    SCALE_CEILING,
    PixelSchedule,
    ScheduleConfig,
    alpha_bar,
    alpha_bar_continuous,
    baseline_linear,
    beta_tilde,
    build_schedule,
    image_scale,
    schedule_csv,
    schedule_from_scale,
)


def half_image(value: float = 0.5, size: int = 2) -> Image:
    return Image(np.full((size, size, 1), value))


class TestScheduleConfig:
    def test_reference_setting_accepted(self):
        cfg = ScheduleConfig(20.0, 200)
        assert cfg.gamma == 20.0 and cfg.total_steps == 200

    def test_gamma_not_below_steps_rejected(self):
        with pytest.raises(ConfigError, match="gamma < T"):
            ScheduleConfig(250.0, 200)
        with pytest.raises(ConfigError):
            ScheduleConfig(200.0, 200)

    def test_bad_values_rejected(self):
        for gamma, steps in [(0.0, 200), (-1.0, 200), (20.0, 1), (0.5, 1)]:
            with pytest.raises(ConfigError):
                ScheduleConfig(gamma, steps)

    def test_gamma_must_dominate_pixels(self):
        with pytest.raises(ConfigError, match="max pixel"):
            build_schedule(half_image(1.0), ScheduleConfig(9.0, 200))
        build_schedule(half_image(1.0), ScheduleConfig(10.0, 200))


def test_image_scale():
    scale = image_scale(half_image(), 20.0)
    assert np.allclose(scale, math.exp(-10.0), rtol=1e-14, atol=0)
    tiny = image_scale(Image(np.full((1, 1, 1), 1e-9)), 20.0)
    assert 1.0 - 1e-7 < tiny[0, 0, 0] < 1.0
    with pytest.raises(ConfigError):
        image_scale(half_image(), 250.0, total_steps=200)


def test_build_schedule_alpha():
    sched = build_schedule(half_image(), ScheduleConfig(20.0, 200))
    assert np.allclose(sched.alpha, math.exp(-0.05), rtol=1e-14, atol=0)
    assert np.allclose(sched.beta, 1.0 - math.exp(-0.05), rtol=1e-12, atol=0)
    assert sched.gamma == 20.0


def test_uniform_image_has_scalar_schedule():
    sched = build_schedule(half_image(0.3, size=4), ScheduleConfig(20.0, 200))
    assert np.all(sched.alpha == sched.alpha.flat[0])


def test_alpha_reverses_pixel_order():
    x0 = Image(np.array([[0.1, 0.4], [0.7, 1.0]]))
    sched = build_schedule(x0, ScheduleConfig(20.0, 200))
    alphas = sched.alpha.ravel()
    assert np.all(np.diff(alphas) < 0)
    for i in (1, 50, 200):
        assert np.all(np.diff(sched.alpha_bar(i).ravel()) < 0)


def test_alpha_bar_examples():
    sched = build_schedule(half_image(), ScheduleConfig(20.0, 200))
    assert np.all(alpha_bar(sched, 0) == 1.0)
    assert np.allclose(alpha_bar(sched, 200), math.exp(-10.0), rtol=1e-12, atol=0)
    assert np.allclose(alpha_bar(sched, 100), math.exp(-5.0), rtol=1e-12, atol=0)
    with pytest.raises(ConfigError):
        alpha_bar(sched, 201)
    with pytest.raises(ConfigError):
        alpha_bar(sched, -1)


def test_alpha_bar_strictly_decreasing():
    sched = build_schedule(half_image(0.05), ScheduleConfig(20.0, 200))
    table = sched.alpha_bar_table()
    assert table.shape == (201, 2, 2, 1)
    assert np.all(np.diff(table, axis=0) < 0)


def test_schedule_is_immutable():
    sched = build_schedule(half_image(), ScheduleConfig(20.0, 200))
    with pytest.raises(ValueError):
        sched.alpha[0, 0, 0] = 0.5


def test_schedule_from_scale_examples():
    alpha, alpha_bars, beta_tildes = schedule_from_scale(np.array([math.exp(-10.0)]), 200)
    assert alpha_bars.shape == (201, 1)
    assert math.isclose(alpha_bars[100, 0], math.exp(-5.0), rel_tol=1e-12)
    assert alpha_bars[0, 0] == 1.0
    assert beta_tildes[1, 0] == 0.0
    assert math.isclose(alpha[0], math.exp(-0.05), rel_tol=1e-12)


def test_schedule_from_scale_rejects_out_of_range():
    for bad in (0.0, 1.0, 1.5, -0.2):
        with pytest.raises(ConfigError):
            schedule_from_scale(np.array([0.5, bad]), 20)


def test_scale_near_one_is_clamped():
    near_one = np.array([0.5, np.nextafter(1.0, 0.0), 1.0 - 1e-14])
    for total_steps in (2, 200, 100_000):
        alpha, alpha_bars, beta_tildes = schedule_from_scale(near_one, total_steps)
        assert np.all(alpha < 1.0)
        assert np.all(alpha_bars[1:] < 1.0)
        assert np.all(np.isfinite(beta_tildes))
        sched = PixelSchedule.from_scale(near_one, total_steps)
        assert np.array_equal(sched.scale, [0.5, SCALE_CEILING, SCALE_CEILING])
    alpha, _, _ = schedule_from_scale(np.array([SCALE_CEILING]), 200)
    assert math.isclose(alpha[0], math.exp(math.log(SCALE_CEILING) / 200), rel_tol=1e-15)


def test_beta_tilde_first_step_is_zero():
    x0 = Image(np.array([[0.001, 0.5], [0.9, 1.0]]))
    sched = build_schedule(x0, ScheduleConfig(20.0, 200))
    value, guarded = beta_tilde(sched, 1)
    assert np.all(value == 0.0)
    assert not guarded
    value, _ = beta_tilde(baseline_linear(1e-4, 0.02, 10), 1)
    assert value == 0.0


def test_beta_tilde_denominator_floor():
    # 1 - alpha_bar_2 is a couple of ulps, far below the floor
    alpha = np.array([np.nextafter(1.0, 0.0)])
    sched = PixelSchedule(scale=alpha**2, alpha=alpha, total_steps=2)
    value, guarded = beta_tilde(sched, 2)
    assert guarded
    assert np.all(np.isfinite(value))
    assert DENOMINATOR_FLOOR == 1e-15


def test_random_configs_satisfy_schedule_identities():
    """Power form, product form, endpoints and the scale round trip over random valid configs."""

    gen_case = qcheck.gen_bind(
        qcheck.gen_tuple(qcheck.gen_range(12, 1000), qcheck.gen_array((2, 3, 1), 1e-3, 1.0)),
        lambda drawn: qcheck.gen_tuple(
            qcheck.lift(drawn[1]),
            qcheck.gen_uniform(10.0 * drawn[1].max(), drawn[0]),
            qcheck.lift(drawn[0]),
            qcheck.gen_range(0, drawn[0]),
        ),
    )

    def identities_hold(case):
        x0, gamma, total_steps, step = case
        image = Image(x0)
        sched = build_schedule(image, ScheduleConfig(gamma, total_steps))
        power = sched.alpha_bar(step)
        product = sched.alpha_bar_product(step)
        _, alpha_bars, beta_tildes = schedule_from_scale(image_scale(image, gamma), total_steps)
        alpha_round_trip = PixelSchedule.from_scale(image_scale(image, gamma), total_steps).alpha
        return (
            np.allclose(power, product, rtol=1e-12, atol=1e-300)
            and np.all(sched.alpha_bar(0) == 1.0)
            and np.allclose(sched.alpha_bar(total_steps), sched.scale, rtol=1e-12, atol=1e-300)
            and np.allclose(alpha_round_trip, sched.alpha, rtol=1e-12, atol=0)
            and np.allclose(alpha_bars[step], power, rtol=1e-12, atol=1e-300)
            and np.all(beta_tildes[1] == 0.0)
        )

    qcheck.check_or_fail(identities_hold, gen_case, RngStream(1), count=1000)


def test_alpha_bar_continuous_matches_discrete():
    x0 = Image(np.array([[0.1, 0.5], [0.8, 1.0]]))
    sched = build_schedule(x0, ScheduleConfig(20.0, 200))
    for i in (0, 1, 37, 100, 200):
        continuous = alpha_bar_continuous(x0.data, 20.0, i / 200)
        assert np.allclose(continuous, sched.alpha_bar(i), rtol=1e-12, atol=0)


class TestBaseline:
    def test_endpoints(self):
        sched = baseline_linear(1e-4, 0.02, 500)
        assert sched.betas[0] == 1e-4
        assert sched.betas[-1] == 0.02
        assert sched.beta_at(1) == pytest.approx(1e-4, rel=1e-10)

    def test_midpoint_follows_linear_formula(self):
        sched = baseline_linear(1e-4, 0.02, 500)
        expected = 1e-4 + 249 * (0.02 - 1e-4) / 499
        assert math.isclose(sched.betas[249], expected, rel_tol=1e-12)
        assert math.isclose(sched.betas[249], 0.01003006012, rel_tol=1e-9)

    def test_two_steps(self):
        sched = baseline_linear(0.1, 0.3, 2)
        assert list(sched.betas) == [0.1, 0.3]
        assert math.isclose(sched.alpha_bar(2), 0.9 * 0.7, rel_tol=1e-15)

    def test_strictly_increasing_and_cumulative(self):
        sched = baseline_linear(1e-4, 0.02, 200)
        assert np.all(np.diff(sched.betas) > 0)
        assert sched.alpha_bar(0) == 1.0
        assert math.isclose(sched.alpha_bar(200), float(np.prod(1.0 - sched.betas)), rel_tol=1e-12)

    def test_ordering_rejected(self):
        for low, high in [(0.02, 1e-4), (0.0, 0.02), (1e-4, 1.0), (0.01, 0.01)]:
            with pytest.raises(ConfigError):
                baseline_linear(low, high, 100)


def test_schedule_csv_golden():
    script_dir = os.path.dirname(os.path.abspath(__file__))
    test_file = os.path.join(script_dir, "schedule_golden.csv")
    with open(test_file, "r") as f:
        old_test_data = f.read()

    x0 = Image(np.array([[0.5, 0.25]]))
    sched = build_schedule(x0, ScheduleConfig(20.0, 200))
    new_test_data = schedule_csv(sched, x0, steps=[100])

    if new_test_data != old_test_data:
        diff = difflib.unified_diff(
            old_test_data.splitlines(keepends=True),
            new_test_data.splitlines(keepends=True),
        )
        diff_output = "".join(diff)

        update_golden = os.getenv("UPDATE_TESTS", "False") == "True"
        if update_golden:
            print("Updating schedule golden file...")
            with open(test_file, "w") as f:
                f.write(new_test_data)

        assert update_golden, f"Schedule CSV has changed (to update set `UPDATE_TESTS=True`):\n\n{diff_output}"
