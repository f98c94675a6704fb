"""Тесты расписания шума, двойного guidance и DDIM."""
import numpy as np
import pytest

from src.diffusion import (
    CASCADED, COMPOSABLE, GuidanceWeights, ddim_sample, ddim_step,
    ddim_timesteps, draw_condition_drops, dual_cfg, make_schedule, q_sample
)
from src.exceptions import ConfigError, TensorShapeError, UsageError


@pytest.fixture
def schedule():
    return make_schedule(1000, 1e-4, 2e-2)


def exact_denoiser(schedule, target: np.ndarray):
    """Идеальный предсказатель шума для распределения, сосредоточенного в target."""

    def denoise(x_t: np.ndarray, t: int) -> np.ndarray:
        ab = schedule.alpha_bar(t)
        return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)

    return denoise


class TestNoiseSchedule:
    """Тесты линейного расписания."""

    def test_alpha_bar(self, schedule):
        assert schedule.train_timesteps == 1000
        assert schedule.alpha_bar(0) == 1.0
        assert schedule.alpha_bar(1) == pytest.approx(1 - 1e-4)
        assert schedule.alpha_bar(1000) < 1e-4
        assert (np.diff(schedule.alpha_bars) < 0).all()

    @pytest.mark.parametrize("beta_min,beta_max", [(0.0, 0.02), (0.02, 0.01), (1e-4, 1.0)])
    def test_bad_betas(self, beta_min, beta_max):
        with pytest.raises(ConfigError):
            make_schedule(100, beta_min, beta_max)

    def test_too_few_timesteps(self):
        with pytest.raises(ConfigError):
            make_schedule(1)

    def test_timestep_out_of_range(self, schedule):
        with pytest.raises(UsageError):
            schedule.alpha_bar(1001)


class TestForwardProcess:
    """Тесты зашумления x_t."""

    def test_moments(self, schedule, rng):
        x0 = np.ones((100_000,))
        x_t = q_sample(schedule, x0, 300, rng.standard_normal(x0.shape))
        ab = schedule.alpha_bar(300)
        assert x_t.mean() == pytest.approx(np.sqrt(ab), abs=0.01)
        assert x_t.var() == pytest.approx(1 - ab, rel=0.02)

    def test_per_item_timesteps(self, schedule, rng):
        x0 = rng.standard_normal((3, 2, 4))
        eps = rng.standard_normal((3, 2, 4))
        batched = q_sample(schedule, x0, np.array([1, 500, 1000]), eps)
        for i, t in enumerate([1, 500, 1000]):
            np.testing.assert_allclose(batched[i], q_sample(schedule, x0[i], t, eps[i]))

    def test_dtype_is_kept(self, schedule):
        x0 = np.zeros((2, 3), dtype=np.float32)
        assert q_sample(schedule, x0, np.array([3, 4]), x0).dtype == np.float32

    def test_out_of_range(self, schedule):
        with pytest.raises(UsageError):
            q_sample(schedule, np.zeros(2), 0, np.zeros(2))
        with pytest.raises(UsageError):
            q_sample(schedule, np.zeros((2, 1)), np.array([5, 1001]), np.zeros((2, 1)))

    def test_shape_mismatch(self, schedule):
        with pytest.raises(TensorShapeError):
            q_sample(schedule, np.zeros(2), 10, np.zeros(3))


class TestGuidance:
    """Тесты двойного classifier-free guidance."""

    @pytest.fixture
    def predictions(self, rng):
        return {name: rng.standard_normal((2, 3, 5)) for name in ("uu", "ru", "uc", "rc")}

    def test_zero_weights_give_unconditional(self, predictions):
        p = predictions
        out = dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(0.0, 0.0))
        np.testing.assert_allclose(out, p["uu"])

    def test_reference_only(self, predictions):
        p = predictions
        out = dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(1.0, 0.0))
        np.testing.assert_allclose(out, p["ru"])

    def test_composable(self, predictions):
        p = predictions
        out = dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(2.0, 0.5))
        expected = p["uu"] + 2.0 * (p["ru"] - p["uu"]) + 0.5 * (p["uc"] - p["uu"])
        np.testing.assert_allclose(out, expected)

    def test_cascaded_unit_weights_give_joint(self, predictions):
        p = predictions
        out = dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(1.0, 1.0),
                       eps_rc=p["rc"], mode=CASCADED)
        np.testing.assert_allclose(out, p["rc"])

    def test_cascaded_needs_joint_prediction(self, predictions):
        p = predictions
        with pytest.raises(UsageError):
            dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(), mode=CASCADED)

    def test_unknown_mode(self, predictions):
        p = predictions
        with pytest.raises(ConfigError):
            dual_cfg(p["uu"], p["ru"], p["uc"], GuidanceWeights(), mode="sequential")

    def test_shape_mismatch(self, predictions):
        p = predictions
        with pytest.raises(TensorShapeError):
            dual_cfg(p["uu"], p["ru"], p["uc"][:1], GuidanceWeights(), mode=COMPOSABLE)

    def test_weights_must_be_finite(self):
        with pytest.raises(ConfigError):
            GuidanceWeights(float("nan"), 1.0)

    def test_condition_drop_rates(self, rng):
        drop_scene, drop_content = draw_condition_drops(rng, 10_000, 0.1, 0.1)
        assert drop_scene.mean() == pytest.approx(0.1, abs=0.01)
        assert drop_content.mean() == pytest.approx(0.1, abs=0.01)
        assert (drop_scene & drop_content).mean() == pytest.approx(0.01, abs=0.005)


class TestDDIM:
    """Тесты детерминированного сэмплера."""

    @pytest.mark.parametrize("total,steps,expected", [
        (50, 5, [50, 40, 30, 20, 10]),
        (10, 3, [9, 6, 3]),
        (4, 4, [4, 3, 2, 1]),
    ])
    def test_timesteps(self, total, steps, expected):
        assert ddim_timesteps(total, steps) == expected

    @pytest.mark.parametrize("steps", [0, 1001])
    def test_timesteps_out_of_range(self, steps):
        with pytest.raises(ConfigError):
            ddim_timesteps(1000, steps)

    def test_step_to_zero_returns_estimate(self, schedule, rng):
        x_t, eps = rng.standard_normal(4), rng.standard_normal(4)
        x_prev, x0_hat = ddim_step(schedule, x_t, 10, 0, eps)
        np.testing.assert_allclose(x_prev, x0_hat)

    @pytest.mark.parametrize("steps", [1, 10, 100])
    def test_exact_denoiser_recovers_target(self, schedule, rng, steps):
        target = rng.standard_normal((2, 4, 6))
        out = ddim_sample(exact_denoiser(schedule, target), target.shape, schedule,
                          steps=steps, seed=3, dtype=np.float64)
        np.testing.assert_allclose(out, target, atol=1e-6)

    def test_deterministic_by_seed(self, schedule):
        denoise = exact_denoiser(schedule, np.zeros((3,)))
        a = ddim_sample(lambda x, t: 0.5 * denoise(x, t), (3,), schedule, 5, seed=1)
        b = ddim_sample(lambda x, t: 0.5 * denoise(x, t), (3,), schedule, 5, seed=1)
        c = ddim_sample(lambda x, t: 0.5 * denoise(x, t), (3,), schedule, 5, seed=2)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)
        assert a.dtype == np.float32

    def test_explicit_start_noise(self, schedule):
        x_T = np.ones((2, 2))
        seen = []

        def record(x, t):
            seen.append(x.copy())
            return np.zeros_like(x)

        ddim_sample(record, (2, 2), schedule, steps=2, x_T=x_T)
        np.testing.assert_array_equal(seen[0], x_T)
        with pytest.raises(TensorShapeError):
            ddim_sample(record, (2, 3), schedule, steps=2, x_T=x_T)

    def test_denoiser_shape_checked(self, schedule):
        with pytest.raises(TensorShapeError):
            ddim_sample(lambda x, t: np.zeros(5), (2, 2), schedule, steps=2)
