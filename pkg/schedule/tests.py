import math
from decimal import Decimal, getcontext

import torch
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from earlyexit_lab.errors import (
    ConfigError, DegenerateStep, ShapeMismatch, TimestepOutOfRange)
from .schedules import (
    NoiseSchedule, build_linear_schedule, forward_diffuse, posterior_mean,
    posterior_variance, predict_start)


def scalar(value):
    return torch.tensor(value, dtype=torch.float64)


class TestBuildLinearSchedule(SimpleTestCase):

    def test_two_step_cumulative_product(self):
        """
        With beta = (0.5, 0.5) the cumulative products are 0.5 and 0.25.
        """
        sched = build_linear_schedule(2, 0.5, 0.5)
        self.assertEqual(sched.T, 2)
        self.assertEqual(sched.alpha_bars[1:].tolist(), [0.5, 0.25])

    def test_zero_noise_single_step(self):
        """
        A single step with beta = 0 leaves the data untouched.
        """
        sched = build_linear_schedule(1, 0.0, 0.0)
        self.assertEqual(float(sched.alpha_bars[1]), 1.0)
        self.assertEqual(float(sched.noise_coefs[1]), 0.0)

    def test_default_schedule_against_extended_precision(self):
        """
        The 1000-step default schedule's final alpha_bar matches a 50-digit
        product of the same betas to 1e-8 relative error.
        """
        sched = build_linear_schedule(1000, 1e-4, 0.02)
        getcontext().prec = 50
        product = Decimal(1)
        for beta in sched.betas[1:].tolist():
            product *= Decimal(1) - Decimal(beta)
        oracle = float(product)
        self.assertLess(
            abs(float(sched.alpha_bars[1000]) - oracle) / oracle, 1e-8)
        self.assertAlmostEqual(
            float(sched.alpha_bars[1000]) / 4.04e-5, 1.0, delta=0.01)

    def test_linear_endpoints(self):
        """
        Betas run from beta_start to beta_end inclusive.
        """
        sched = build_linear_schedule(5, 0.1, 0.5)
        self.assertAlmostEqual(float(sched.betas[1]), 0.1, places=15)
        self.assertAlmostEqual(float(sched.betas[5]), 0.5, places=15)

    def test_rejects_bad_arguments(self):
        """
        T < 1 and betas outside [0, 1) or out of order are refused.
        """
        with self.assertRaises(ConfigError):
            build_linear_schedule(0, 1e-4, 0.02)
        with self.assertRaises(ConfigError):
            build_linear_schedule(10, -0.1, 0.02)
        with self.assertRaises(ConfigError):
            build_linear_schedule(10, 0.1, 1.0)
        with self.assertRaises(ConfigError):
            build_linear_schedule(10, 0.2, 0.1)
        with self.assertRaises(ConfigError):
            NoiseSchedule.from_betas([0.5, 1.5])

    def test_table_invariants(self):
        """
        The variance-preserving identity holds to 1e-10, alpha_bar is
        non-increasing inside (0, 1], posterior variances are nonnegative
        and the first one is exactly zero.
        """
        sched = build_linear_schedule()
        identity = sched.signal_coefs ** 2 + sched.noise_coefs ** 2
        self.assertLess(float((identity - 1).abs().max()), 1e-10)
        diffs = sched.alpha_bars[1:] - sched.alpha_bars[:-1]
        self.assertTrue(bool((diffs <= 0).all()))
        self.assertTrue(bool((sched.alpha_bars > 0).all()))
        self.assertTrue(bool((sched.alpha_bars <= 1).all()))
        self.assertTrue(bool((sched.posterior_vars >= 0).all()))
        self.assertEqual(float(sched.posterior_vars[1]), 0.0)

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(
        T=st.integers(min_value=1, max_value=200),
        start=st.floats(min_value=0.0, max_value=0.5),
        width=st.floats(min_value=0.0, max_value=0.49),
    )
    def test_identity_for_any_linear_schedule(self, T, start, width):
        """
        Any valid linear schedule satisfies the variance-preserving
        identity.
        """
        sched = build_linear_schedule(T, start, start + width)
        identity = sched.signal_coefs ** 2 + sched.noise_coefs ** 2
        self.assertLess(float((identity - 1).abs().max()), 1e-10)


class TestForwardDiffuse(SimpleTestCase):

    def setUp(self):
        self.sched = build_linear_schedule(2, 0.5, 0.5)

    def test_zero_noise(self):
        """
        With eps = 0 the noisy sample is the scaled input.
        """
        x0 = torch.randn(4, 2, dtype=torch.float64)
        sample = forward_diffuse(x0, 2, torch.zeros_like(x0), self.sched)
        self.assertTrue(torch.equal(
            sample.x_t, self.sched.signal_coefs[2] * x0))

    def test_identity_when_alpha_bar_is_one(self):
        """
        With alpha_bar_t = 1 the input comes back unchanged.
        """
        sched = build_linear_schedule(1, 0.0, 0.0)
        x0 = torch.randn(3, 2, dtype=torch.float64)
        sample = forward_diffuse(x0, 1, torch.randn_like(x0), sched)
        self.assertTrue(torch.equal(sample.x_t, x0))

    def test_hand_arithmetic(self):
        """
        x0 = 0, eps = 1 and alpha_bar = 0.25 gives sqrt(0.75) everywhere.
        """
        x0 = torch.zeros(2, 3, dtype=torch.float64)
        sample = forward_diffuse(x0, 2, torch.ones_like(x0), self.sched)
        self.assertTrue(torch.allclose(
            sample.x_t, torch.full_like(x0, math.sqrt(0.75)), atol=1e-15))
        self.assertAlmostEqual(float(sample.x_t[0, 0]), 0.86603, places=5)

    def test_per_sample_timesteps(self):
        """
        A batch of timesteps applies each coefficient to its own row.
        """
        x0 = torch.ones(2, 3, dtype=torch.float64)
        sample = forward_diffuse(
            x0, torch.tensor([1, 2]), torch.zeros_like(x0), self.sched)
        self.assertAlmostEqual(float(sample.x_t[0, 0]), math.sqrt(0.5))
        self.assertAlmostEqual(float(sample.x_t[1, 0]), 0.5)

    def test_errors(self):
        """
        Mismatched shapes and out-of-range timesteps are refused.
        """
        x0 = torch.zeros(2, 3)
        with self.assertRaises(ShapeMismatch):
            forward_diffuse(x0, 1, torch.zeros(2, 2), self.sched)
        with self.assertRaises(TimestepOutOfRange):
            forward_diffuse(x0, 0, torch.zeros_like(x0), self.sched)
        with self.assertRaises(TimestepOutOfRange):
            forward_diffuse(x0, 3, torch.zeros_like(x0), self.sched)

    def test_marginal_moments(self):
        """
        Monte-Carlo mean and variance of x_t match sqrt(abar) x0 and
        1 - abar within three standard errors at t = 1, T/2 and T.
        """
        sched = build_linear_schedule()
        generator = torch.Generator().manual_seed(1234)
        n = 100000
        x0 = torch.full((n,), 1.5, dtype=torch.float64)
        for t in (1, sched.T // 2, sched.T):
            eps = torch.randn(n, dtype=torch.float64, generator=generator)
            x_t = forward_diffuse(x0, t, eps, sched).x_t
            mean = float(sched.signal_coefs[t]) * 1.5
            var = 1.0 - float(sched.alpha_bars[t])
            mean_se = math.sqrt(var / n)
            var_se = var * math.sqrt(2.0 / (n - 1))
            self.assertLess(abs(float(x_t.mean()) - mean), 3 * mean_se)
            self.assertLess(abs(float(x_t.var()) - var), 3 * var_se)


class TestPosterior(SimpleTestCase):

    def setUp(self):
        self.sched = build_linear_schedule(2, 0.5, 0.5)

    def test_noise_free_step_is_identity(self):
        """
        beta_t = 0 with alpha_bar_t < 1 leaves x_t unchanged.
        """
        sched = NoiseSchedule.from_betas([0.5, 0.0])
        v = torch.randn(3, 2, dtype=torch.float64)
        out = posterior_mean(v, torch.randn_like(v), 2, sched)
        self.assertTrue(torch.equal(out, v))

    def test_linearity_at_zero(self):
        """
        Zero input and zero noise prediction give zero.
        """
        zeros = torch.zeros(2, 2, dtype=torch.float64)
        out = posterior_mean(zeros, zeros, 2, self.sched)
        self.assertTrue(torch.equal(out, zeros))

    def test_hand_evaluated_scalar(self):
        """
        t = 2, x_t = 1, eps_hat = 0.5 on the two-step schedule matches the
        closed form evaluated by hand.
        """
        expected = (1.0 - (0.5 / math.sqrt(0.75)) * 0.5) / math.sqrt(0.5)
        out = posterior_mean(scalar(1.0), scalar(0.5), 2, self.sched)
        self.assertAlmostEqual(float(out), expected, places=12)

    def test_degenerate_step(self):
        """
        alpha_bar_t = 1 with a nonzero noise prediction is reported; a zero
        prediction is accepted and returns x_t.
        """
        sched = NoiseSchedule.from_betas([0.0, 0.5])
        x = torch.ones(2, 2, dtype=torch.float64)
        with self.assertRaises(DegenerateStep):
            posterior_mean(x, torch.ones_like(x), 1, sched)
        out = posterior_mean(x, torch.zeros_like(x), 1, sched)
        self.assertTrue(torch.equal(out, x))

    def test_variance_examples(self):
        """
        beta_tilde_1 = 0, a zero-beta step has zero variance and the
        two-step schedule gives 1/3 at t = 2.
        """
        self.assertEqual(posterior_variance(1, self.sched), 0.0)
        self.assertAlmostEqual(
            posterior_variance(2, self.sched), 1.0 / 3.0, places=15)
        sched = NoiseSchedule.from_betas([0.5, 0.0])
        self.assertEqual(posterior_variance(2, sched), 0.0)
        with self.assertRaises(TimestepOutOfRange):
            posterior_variance(3, self.sched)

    def test_perfect_prediction_recovers_start(self):
        """
        Feeding the true noise at every step of a 10-step chain, with no
        injected noise, walks back to x0.
        """
        sched = build_linear_schedule(10, 1e-4, 0.2)
        generator = torch.Generator().manual_seed(7)
        x0 = torch.tensor([0.7, -1.3], dtype=torch.float64)
        eps = torch.randn(2, dtype=torch.float64, generator=generator)
        x = forward_diffuse(x0, 10, eps, sched).x_t
        for t in range(10, 0, -1):
            true_eps = ((x - sched.signal_coefs[t] * x0) /
                        sched.noise_coefs[t])
            x = posterior_mean(x, true_eps, t, sched)
        self.assertLess(float((x - x0).abs().max()), 1e-5)

    def test_predict_start_inverts_forward(self):
        """
        predict_start undoes forward_diffuse when given the true noise.
        """
        sched = build_linear_schedule(50)
        x0 = torch.randn(4, 2, dtype=torch.float64)
        eps = torch.randn_like(x0)
        x_t = forward_diffuse(x0, 30, eps, sched).x_t
        self.assertTrue(torch.allclose(
            predict_start(x_t, eps, 30, sched), x0, atol=1e-12))
