import unittest
from unittest.mock import Mock
import sys
import os

import numpy as np
from scipy import stats

# Add parent directory to path to import the kit modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from flow_match import (
    FlowConfig,
    GaussianMixtureToy,
    channel_denormalize,
    channel_normalize,
    euler_sample,
    fit_channel_stats,
    fit_toy,
    interpolate,
    logit_normal_cdf,
    mode_weights,
    resolution_shift,
    sample_timestep,
    sample_toy,
    shift_factor,
    sliced_wasserstein,
    training_loss,
    validation_loss,
    validation_timesteps,
    velocity_target,
    wasserstein_1,
)
from config import REFERENCE_TOKEN_COUNT
from errors import ConfigError, DegenerateStatsError, DimensionError, DomainError, PreconditionError
from latent_codec import LatentVideo
from numerics import make_rng

SLOW = os.environ.get("OPEN_SORA_KIT_SLOW") == "1"


def zero_velocity(x, t):
    return np.zeros_like(x)


def point_mass_velocity(center):
    """Exact straight-path velocity when all data sits at ``center``."""

    def fn(x, t):
        tt = np.asarray(t).reshape(t.shape + (1,) * (x.ndim - 2))
        return (x - center) / tt

    return fn


class TestTimesteps(unittest.TestCase):
    def test_unshifted_draws_follow_logit_normal(self):
        cfg = FlowConfig(resolution_shift=False)
        draws = sample_timestep(make_rng(0, "ks"), cfg, REFERENCE_TOKEN_COUNT, size=100000)
        self.assertTrue(np.all((draws > 0) & (draws < 1)))
        result = stats.kstest(draws, logit_normal_cdf)
        self.assertGreater(result.pvalue, 0.01)

    def test_more_tokens_shift_toward_noise(self):
        cfg = FlowConfig()
        base = sample_timestep(make_rng(1, "shift"), cfg, REFERENCE_TOKEN_COUNT, size=5000)
        shifted = sample_timestep(make_rng(1, "shift"), cfg, 4 * REFERENCE_TOKEN_COUNT, size=5000)
        self.assertGreater(shifted.mean(), base.mean() + 0.05)
        self.assertTrue(np.all(shifted >= base))

    def test_shift_map(self):
        self.assertEqual(shift_factor(REFERENCE_TOKEN_COUNT), 1.0)
        self.assertEqual(shift_factor(4 * REFERENCE_TOKEN_COUNT), 2.0)
        with self.assertRaises(PreconditionError):
            shift_factor(0)
        u = np.linspace(0, 1, 11)
        np.testing.assert_allclose(resolution_shift(u, 1.0), u)
        shifted = resolution_shift(u, 3.0)
        self.assertEqual(shifted[0], 0.0)
        self.assertEqual(shifted[-1], 1.0)
        self.assertTrue(np.all(np.diff(shifted) > 0))

    def test_single_draw_is_a_float(self):
        self.assertIsInstance(sample_timestep(make_rng(0), FlowConfig(), 10), float)

    def test_validation_timesteps_are_bin_midpoints(self):
        np.testing.assert_allclose(validation_timesteps(4), [0.125, 0.375, 0.625, 0.875])

    def test_config_is_checked(self):
        with self.assertRaises(ConfigError):
            FlowConfig(steps=0)
        with self.assertRaises(ConfigError):
            FlowConfig(scale=0.0)
        with self.assertRaises(ConfigError):
            FlowConfig(validation_timesteps=0)


class TestPath(unittest.TestCase):
    def test_interpolate_endpoints_and_per_frame_times(self):
        rng = np.random.default_rng(0)
        x0, x1 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(interpolate(x0, x1, 0.0), x0, atol=1e-6)
        np.testing.assert_allclose(interpolate(x0, x1, 1.0), x1, atol=1e-6)
        t = np.array([[0.0, 0.5, 1.0], [1.0, 0.25, 0.0]])
        out = interpolate(x0, x1, t)
        np.testing.assert_allclose(out[0, 1], 0.5 * x0[0, 1] + 0.5 * x1[0, 1], atol=1e-6)
        np.testing.assert_allclose(out[1, 2], x0[1, 2], atol=1e-6)
        np.testing.assert_allclose(velocity_target(x0, x1), (x1 - x0).astype(np.float32), atol=1e-6)

    def test_interpolate_rejects_bad_input(self):
        x = np.zeros((2, 3))
        with self.assertRaises(DomainError):
            interpolate(x, x, 1.5)
        with self.assertRaises(DimensionError):
            interpolate(x, np.zeros((3, 2)), 0.5)
        with self.assertRaises(DimensionError):
            interpolate(x, x, np.zeros(3))


class TestChannelStats(unittest.TestCase):
    def test_normalize_round_trip(self):
        z = np.random.default_rng(0).normal(3.0, 2.0, size=(5, 2, 2, 4))
        mean, std = fit_channel_stats([z])
        normalized = channel_normalize(z, mean, std)
        np.testing.assert_allclose(normalized.reshape(-1, 4).mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(normalized.reshape(-1, 4).std(axis=0), 1.0, atol=1e-5)
        np.testing.assert_allclose(channel_denormalize(normalized, mean, std), z, atol=1e-4)

    def test_stats_come_from_the_latent(self):
        latent = LatentVideo(np.full((2, 1, 1, 2), 5.0), np.array([1.0, 3.0]), np.array([2.0, 4.0]), frames=5)
        np.testing.assert_allclose(channel_normalize(latent)[0, 0, 0], [2.0, 0.5])
        with self.assertRaises(PreconditionError):
            channel_normalize(np.zeros((2, 2)))

    def test_degenerate_stats(self):
        with self.assertRaises(DegenerateStatsError):
            fit_channel_stats([np.ones((3, 2))])
        with self.assertRaises(DegenerateStatsError):
            channel_denormalize(np.zeros((3, 2)), np.zeros(2), np.array([1.0, 0.0]))
        with self.assertRaises(DimensionError):
            channel_normalize(np.zeros((3, 2)), np.zeros(3), np.ones(3))
        with self.assertRaises(PreconditionError):
            fit_channel_stats([])


class TestObjectives(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.x0 = rng.normal(size=(2, 3, 2, 2, 4)).astype(np.float32)
        self.noise = rng.normal(size=self.x0.shape).astype(np.float32)

    def test_conditioning_frames_are_clean_and_excluded(self):
        seen = {}

        def fn(x, t):
            seen["x"], seen["t"] = x, t
            return np.zeros_like(x)

        mask = np.array([True, False, False])
        noise = self.noise.copy()
        noise[:, 0] += 100.0
        loss = training_loss(fn, self.x0, make_rng(0), mask=mask, t=0.7, noise=noise).item()
        target = (noise - self.x0)[:, 1:].astype(np.float64)
        self.assertAlmostEqual(loss, float(np.mean(target ** 2)), places=4)
        np.testing.assert_array_equal(seen["t"][:, 0], 0.0)
        np.testing.assert_allclose(seen["t"][:, 1:], 0.7)
        np.testing.assert_allclose(seen["x"][:, 0], self.x0[:, 0], atol=1e-6)

    def test_fully_masked_batch_has_zero_loss(self):
        mask = np.ones((2, 3), dtype=bool)
        self.assertEqual(training_loss(zero_velocity, self.x0, make_rng(0), mask=mask).item(), 0.0)

    def test_prediction_shape_is_checked(self):
        with self.assertRaises(DimensionError):
            training_loss(lambda x, t: x[:, :1], self.x0, make_rng(0))
        with self.assertRaises(DimensionError):
            training_loss(zero_velocity, self.x0, make_rng(0), mask=np.zeros((3, 3), dtype=bool))

    def test_validation_loss_is_seeded(self):
        a = validation_loss(zero_velocity, self.x0, seed=3)
        b = validation_loss(zero_velocity, self.x0, seed=3)
        c = validation_loss(zero_velocity, self.x0, seed=4)
        self.assertEqual(a, b)
        self.assertNotEqual(a, c)
        noise = make_rng(3, "flow.validation").standard_normal(self.x0.shape).astype(np.float32)
        self.assertAlmostEqual(a, float(np.mean((noise - self.x0).astype(np.float64) ** 2)), places=4)


class TestEulerSampler(unittest.TestCase):
    def test_exact_velocity_lands_on_the_data(self):
        center = 0.75
        out = euler_sample(point_mass_velocity(center), (3, 2, 4), make_rng(0), steps=5)
        np.testing.assert_allclose(out, center, atol=1e-5)

    def test_conditioning_frames_are_overwritten(self):
        seen = []

        def fn(x, t):
            seen.append((x.copy(), t.copy()))
            return np.ones_like(x)

        cond = np.full((1, 3, 2), 0.25, dtype=np.float32)
        mask = np.array([True, False, True])
        out = euler_sample(fn, (1, 3, 2), make_rng(1), steps=4, mask=mask, cond_latent=cond)
        np.testing.assert_array_equal(out[:, [0, 2]], 0.25)
        for x, t in seen:
            np.testing.assert_array_equal(x[:, 0], 0.25)
            self.assertEqual(t[0, 0], 0.0)
            self.assertGreater(t[0, 1], 0.0)
        self.assertEqual(len(seen), 4)

    def test_sampler_preconditions(self):
        with self.assertRaises(PreconditionError):
            euler_sample(zero_velocity, (1, 2, 2), make_rng(0), steps=0)
        with self.assertRaises(PreconditionError):
            euler_sample(zero_velocity, (1, 2, 2), make_rng(0), mask=np.array([True, False]))

    def test_guidance_uses_unconditional_branch_only_when_needed(self):
        uncond = Mock(side_effect=zero_velocity)
        euler_sample(zero_velocity, (1, 2, 2), make_rng(0), steps=3, guidance_scale=1.0, uncond_fn=uncond)
        uncond.assert_not_called()
        cond_fn = lambda x, t: np.ones_like(x)  # noqa: E731
        guided = euler_sample(cond_fn, (1, 2, 2), make_rng(0), steps=3, guidance_scale=2.0, uncond_fn=uncond)
        plain = euler_sample(cond_fn, (1, 2, 2), make_rng(0), steps=3)
        self.assertEqual(uncond.call_count, 3)
        # v = vu + 2 (v - vu) = 2 against 1 without guidance
        np.testing.assert_allclose(plain - guided, 1.0, atol=1e-5)

    def test_sampling_is_seeded(self):
        a = euler_sample(zero_velocity, (2, 2, 3), make_rng(5, "sample"), steps=2)
        b = euler_sample(zero_velocity, (2, 2, 3), make_rng(5, "sample"), steps=2)
        np.testing.assert_array_equal(a, b)


class TestGaussianMixtureToy(unittest.TestCase):
    def setUp(self):
        self.toy = GaussianMixtureToy(np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]]), sigma=0.3)

    def test_config_errors(self):
        with self.assertRaises(ConfigError):
            GaussianMixtureToy(np.zeros((2, 2)), weights=np.array([0.9, 0.3]))
        with self.assertRaises(ConfigError):
            GaussianMixtureToy(np.zeros((2, 2)), sigma=0.0)

    def test_exact_field_converges_with_more_steps(self):
        reference = self.toy.sample(make_rng(1, "reference"), 1000)
        distances = [
            wasserstein_1(sample_toy(self.toy.velocity_fn(), 2, 1000, steps=steps, seed=0), reference)
            for steps in (2, 5, 10, 30)
        ]
        for coarse, fine in zip(distances, distances[1:]):
            self.assertLess(fine, coarse)
        self.assertLessEqual(distances[-1], 0.1)
        samples = sample_toy(self.toy.velocity_fn(), 2, 1000, steps=30, seed=0)
        np.testing.assert_allclose(mode_weights(samples, self.toy.means), self.toy.weights, atol=0.05)

    def test_wasserstein_1(self):
        points = np.random.default_rng(0).normal(size=(50, 2))
        self.assertEqual(wasserstein_1(points, points), 0.0)
        self.assertAlmostEqual(wasserstein_1(points, points[::-1] + np.array([3.0, 4.0])), 5.0, places=9)
        with self.assertRaises(DimensionError):
            wasserstein_1(points, points[:10])

    def test_sliced_wasserstein(self):
        points = np.random.default_rng(0).normal(size=(100, 2))
        self.assertEqual(sliced_wasserstein(points, points), 0.0)
        self.assertGreater(sliced_wasserstein(points, points + 1.0), 0.5)
        with self.assertRaises(DimensionError):
            sliced_wasserstein(points, np.zeros((10, 3)))

    @unittest.skipUnless(SLOW, "set OPEN_SORA_KIT_SLOW=1 to run")
    def test_learned_field_recovers_the_modes(self):
        net = fit_toy(self.toy, steps=3000, batch=256, seed=0)
        samples = sample_toy(net.velocity_fn(), 2, 1000, steps=50, seed=2)
        reference = self.toy.sample(make_rng(3, "reference"), 1000)
        self.assertLess(wasserstein_1(samples, reference), 0.3)
        np.testing.assert_allclose(mode_weights(samples, self.toy.means), self.toy.weights, atol=0.1)


if __name__ == '__main__':
    unittest.main()
