import os
import shutil
import tempfile
from unittest import mock

import numpy as np
import torch
import torch.nn as nn
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st
from PIL import Image

from backbone.models import BackboneConfig
from earlyexit_lab.errors import (
    ConfigError, EmptyInput, NonFiniteState, RecordNotFound)
from runs.artifacts import RunDirectory
from schedule.schedules import (
    build_linear_schedule, posterior_mean, posterior_variance, predict_start)
from uem.models import EarlyExitDenoiser
from .exports import (
    export_uncertainty_maps, read_samples, uncertainty_map_image,
    write_samples, write_traces)
from .policies import ExitPolicy
from .samplers import (
    ChainNoise, SampleRun, ancestral_sample, deterministic_sample,
    early_exit_denoise, sample, strided_timesteps, uncertainty_trend)


def micro_model(seed=0, input_shape=(2,), patch_size=1, depth=4):
    """ A small untrained model with random uncertainty heads, so exits
    happen at a spread of layers.
    """
    torch.manual_seed(seed)
    config = BackboneConfig(
        depth=depth, hidden_dim=8, num_heads=2, input_shape=input_shape,
        patch_size=patch_size)
    model = EarlyExitDenoiser(config)
    for head in model.uem.heads:
        nn.init.normal_(head.weight, std=1.0)
        nn.init.normal_(head.bias, std=0.5)
    return model.eval()


def reference_ancestral(model, sched, n, seed):
    """ The ancestral chain written directly against the plain model, with
    no uncertainty heads involved.
    """
    shape = tuple(model.config.input_shape)
    noise = ChainNoise(seed, 0, n)
    x = noise.draw(shape)
    for t in range(sched.T, 0, -1):
        with torch.no_grad():
            mean = posterior_mean(x, model(x, t), t, sched)
        if t == 1:
            x = mean
        else:
            x = mean + posterior_variance(t, sched) ** 0.5 * noise.draw(shape)
    return x


def reference_deterministic(model, sched, n, steps, seed):
    shape = tuple(model.config.input_shape)
    x = ChainNoise(seed, 0, n).draw(shape)
    ts = strided_timesteps(sched.T, steps)
    for t, target in zip(ts, ts[1:] + [0]):
        with torch.no_grad():
            eps_hat = model(x, t)
            x0 = predict_start(x, eps_hat, t, sched)
        x = (float(sched.signal_coefs[target]) * x0 +
             float(sched.noise_coefs[target]) * eps_hat)
    return x


class TestExitPolicy(SimpleTestCase):

    def test_validation(self):
        for bad in (dict(threshold=-0.1), dict(threshold=float('nan')),
                    dict(aggregation='median'), dict(min_layer=0)):
            with self.assertRaises(ConfigError):
                ExitPolicy(**bad)
        with self.assertRaises(ConfigError):
            ExitPolicy(min_layer=5).check_depth(4)

    def test_threshold_zero_never_exits(self):
        self.assertTrue(ExitPolicy().never_exits)
        policy = ExitPolicy(aggregation='max', min_layer=2)
        self.assertEqual(policy.with_threshold(0.1),
                         ExitPolicy(0.1, 'max', 2))


class TestEarlyExitDenoise(SimpleTestCase):

    def setUp(self):
        self.model = micro_model()
        generator = torch.Generator().manual_seed(3)
        self.x_t = torch.randn(32, 2, generator=generator)
        self.t = torch.randint(1, 1001, (32,), generator=generator)

    def test_threshold_zero_is_the_full_model(self):
        """
        With threshold 0 every row runs to depth N, eps_hat equals the full
        forward bit for bit and u_at_exit is the layer N - 1 uncertainty.
        """
        result = early_exit_denoise(self.x_t, self.t, self.model, ExitPolicy())
        with torch.no_grad():
            expected = self.model(self.x_t, self.t)
            _, _, records = self.model.collect(self.x_t, self.t)
        self.assertTrue(torch.equal(result.eps_hat, expected))
        self.assertEqual(result.exit_layer.tolist(), [4] * 32)
        self.assertTrue(torch.allclose(
            result.u_at_exit, records[-1].u_scalar, atol=1e-6))

    def test_high_threshold_exits_at_min_layer(self):
        """
        u < 1 always, so a threshold of 1 leaves at min_layer with that
        head's prediction.
        """
        policy = ExitPolicy(threshold=1.0, min_layer=2)
        result = early_exit_denoise(self.x_t, self.t, self.model, policy)
        with torch.no_grad():
            _, trace, records = self.model.collect(self.x_t, self.t)
        self.assertEqual(result.exit_layer.tolist(), [2] * 32)
        self.assertTrue(torch.allclose(
            result.eps_hat, trace.preds[1], atol=1e-6))
        self.assertTrue(torch.allclose(
            result.u_at_exit, records[1].u_scalar, atol=1e-6))

    def test_heads_above_exit_are_skipped(self):
        calls = []
        original = self.model.layer_uncertainty

        def spy(layer, *args, **kwargs):
            calls.append(layer)
            return original(layer, *args, **kwargs)

        with mock.patch.object(self.model, 'layer_uncertainty', spy):
            early_exit_denoise(
                self.x_t, self.t, self.model, ExitPolicy(threshold=1.0))
        self.assertEqual(calls, [1])

    def test_exits_spread_over_layers(self):
        result = early_exit_denoise(
            self.x_t, self.t, self.model, ExitPolicy(threshold=0.5))
        self.assertGreater(len(set(result.exit_layer.tolist())), 1)

    @hypothesis_settings(max_examples=25, deadline=None)
    @given(low=st.floats(0.0, 1.0), high=st.floats(0.0, 1.0))
    def test_depth_monotone_in_threshold(self, low, high):
        """
        A smaller threshold never exits earlier than a larger one.
        """
        low, high = min(low, high), max(low, high)
        strict = early_exit_denoise(
            self.x_t, self.t, self.model, ExitPolicy(threshold=low))
        loose = early_exit_denoise(
            self.x_t, self.t, self.model, ExitPolicy(threshold=high))
        self.assertTrue(bool(
            (strict.exit_layer >= loose.exit_layer).all()))


class TestStridedTimesteps(SimpleTestCase):

    def test_fifty_of_a_thousand(self):
        ts = strided_timesteps(1000, 50)
        self.assertEqual(len(ts), 50)
        self.assertEqual((ts[0], ts[-1]), (1000, 1))
        self.assertTrue(all(a > b for a, b in zip(ts, ts[1:])))

    def test_every_step(self):
        self.assertEqual(strided_timesteps(7, 7), [7, 6, 5, 4, 3, 2, 1])
        self.assertEqual(strided_timesteps(7, 1), [7])
        self.assertEqual(strided_timesteps(10, 4), [10, 7, 4, 1])

    def test_bad_step_counts(self):
        for steps in (0, 11):
            with self.assertRaises(ConfigError):
                strided_timesteps(10, steps)


class TestAncestralSample(SimpleTestCase):

    def setUp(self):
        self.model = micro_model()
        self.sched = build_linear_schedule(20, 1e-4, 0.2)

    def test_threshold_zero_matches_plain_chain(self):
        run = ancestral_sample(
            self.model, self.sched, ExitPolicy(), n=6, seed=11)
        expected = reference_ancestral(self.model, self.sched, 6, 11)
        self.assertTrue(torch.equal(run.samples, expected))
        self.assertTrue(bool((run.layers_used == 4).all()))

    def test_reproducible(self):
        policy = ExitPolicy(threshold=0.4)
        first = ancestral_sample(self.model, self.sched, policy, 5, seed=2)
        second = ancestral_sample(self.model, self.sched, policy, 5, seed=2)
        self.assertTrue(torch.equal(first.samples, second.samples))
        self.assertTrue(torch.equal(first.layers_used, second.layers_used))
        other = ancestral_sample(self.model, self.sched, policy, 5, seed=3)
        self.assertFalse(torch.equal(first.samples, other.samples))

    def test_trace_shapes(self):
        policy = ExitPolicy(threshold=0.4, min_layer=2)
        run = ancestral_sample(self.model, self.sched, policy, 3, seed=0)
        self.assertEqual(tuple(run.layers_used.shape), (3, 20))
        self.assertEqual(tuple(run.u_traces.shape), (3, 20))
        self.assertEqual(run.ts, list(range(20, 0, -1)))
        self.assertTrue(bool((run.layers_used >= 2).all()))
        self.assertTrue(bool((run.layers_used <= 4).all()))
        self.assertEqual(len(list(run.trace_rows())), 60)

    def test_chains_do_not_depend_on_batching(self):
        policy = ExitPolicy()
        whole = ancestral_sample(self.model, self.sched, policy, 6, seed=4)
        split = ancestral_sample(
            self.model, self.sched, policy, 6, seed=4, batch_size=4)
        self.assertTrue(torch.allclose(
            whole.samples, split.samples, atol=1e-5))

    def test_average_layers_fall_with_threshold(self):
        averages = [
            ancestral_sample(
                self.model, self.sched, ExitPolicy(threshold=tau), 8,
                seed=0).average_layers
            for tau in (0.0, 0.4, 1.0)]
        self.assertEqual(averages[0], 4.0)
        self.assertEqual(averages[-1], 1.0)
        self.assertTrue(1.0 <= averages[1] <= 4.0)

    def test_divergence_names_the_step(self):
        with torch.no_grad():
            self.model.backbone.heads[-1].linear.bias.fill_(float('inf'))
        with self.assertRaises(NonFiniteState) as cm:
            ancestral_sample(self.model, self.sched, ExitPolicy(), 2, seed=0)
        self.assertEqual(cm.exception.step, 0)
        self.assertEqual(cm.exception.t, 20)

    def test_needs_samples(self):
        with self.assertRaises(ConfigError):
            ancestral_sample(self.model, self.sched, ExitPolicy(), 0, seed=0)


class TestDeterministicSample(SimpleTestCase):

    def setUp(self):
        self.model = micro_model()
        self.sched = build_linear_schedule(30, 1e-4, 0.2)

    def test_threshold_zero_matches_plain_chain(self):
        run = deterministic_sample(
            self.model, self.sched, ExitPolicy(), n=5, steps=7, seed=8)
        expected = reference_deterministic(self.model, self.sched, 5, 7, 8)
        self.assertTrue(torch.equal(run.samples, expected))

    def test_steps_and_traces(self):
        run = deterministic_sample(
            self.model, self.sched, ExitPolicy(threshold=0.3), n=4,
            steps=10, seed=0)
        self.assertEqual(run.steps, 10)
        self.assertEqual(tuple(run.layers_used.shape), (4, 10))
        full = deterministic_sample(
            self.model, self.sched, ExitPolicy(), n=1, steps=30, seed=0)
        self.assertEqual(full.ts, list(range(30, 0, -1)))

    def test_full_length_stride_visits_every_timestep(self):
        policy = ExitPolicy(threshold=0.3)
        full = deterministic_sample(
            self.model, self.sched, policy, n=3, steps=self.sched.T, seed=5)
        ancestral = ancestral_sample(
            self.model, self.sched, policy, n=3, seed=5)
        self.assertEqual(full.steps, self.sched.T)
        self.assertEqual(full.ts, ancestral.ts)
        self.assertEqual(
            tuple(full.layers_used.shape), tuple(ancestral.layers_used.shape))
        self.assertTrue(bool(torch.isfinite(full.samples).all()))
        expected = reference_deterministic(
            self.model, self.sched, 3, self.sched.T, 5)
        plain = deterministic_sample(
            self.model, self.sched, ExitPolicy(), n=3, steps=self.sched.T,
            seed=5)
        self.assertTrue(torch.equal(plain.samples, expected))

    def test_reproducible(self):
        runs = [deterministic_sample(
            self.model, self.sched, ExitPolicy(threshold=0.3), n=4, steps=5,
            seed=1) for _ in range(2)]
        self.assertTrue(torch.equal(runs[0].samples, runs[1].samples))

    def test_bad_steps(self):
        with self.assertRaises(ConfigError):
            deterministic_sample(
                self.model, self.sched, ExitPolicy(), n=1, steps=31, seed=0)

    def test_dispatch(self):
        run = sample(self.model, self.sched, ExitPolicy(), 2, 0,
                     sampler='deterministic', steps=3)
        self.assertEqual(run.sampler, 'deterministic')
        with self.assertRaises(ConfigError):
            sample(self.model, self.sched, ExitPolicy(), 2, 0, sampler='sde')


class TestUncertaintyTrend(SimpleTestCase):

    def make_run(self, u_traces):
        n, steps = u_traces.shape
        return SampleRun(
            samples=torch.zeros(n, 2),
            layers_used=torch.full((n, steps), 3, dtype=torch.long),
            u_traces=u_traces, ts=list(range(steps, 0, -1)),
            sampler='ancestral', policy=ExitPolicy(), seed=0, depth=3)

    def test_first_and_last_tenth(self):
        u = torch.linspace(0, 1, 20, dtype=torch.float64).repeat(2, 1)
        trend = uncertainty_trend(self.make_run(u))
        self.assertAlmostEqual(trend['u_first'], float(u[0, :2].mean()))
        self.assertAlmostEqual(trend['u_last'], float(u[0, -2:].mean()))

    def test_short_chain_uses_one_step(self):
        u = torch.tensor([[0.1, 0.9]], dtype=torch.float64)
        self.assertEqual(uncertainty_trend(self.make_run(u)),
                         {'u_first': 0.1, 'u_last': 0.9})

    def test_empty(self):
        with self.assertRaises(EmptyInput):
            uncertainty_trend(self.make_run(torch.zeros(0, 0)))


class TestExports(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='earlyexit-sampling-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def test_mid_gray(self):
        image = uncertainty_map_image(torch.full((4,), 0.5), (2, 2))
        self.assertEqual(image.mode, 'L')
        self.assertEqual(set(np.asarray(image).ravel().tolist()), {128})

    def test_endpoints(self):
        image = uncertainty_map_image(torch.tensor([0.0, 1.0]), (1, 2))
        self.assertEqual(np.asarray(image).tolist(), [[0, 255]])

    def test_image_maps_follow_token_grid(self):
        model = micro_model(input_shape=(1, 8, 8), patch_size=2)
        sched = build_linear_schedule(6, 1e-4, 0.2)
        run = ancestral_sample(
            model, sched, ExitPolicy(threshold=0.4), 2, seed=0, map_steps=[])
        self.assertEqual(sorted(run.maps), [0, 3, 5])
        paths = export_uncertainty_maps(
            run, [0, 5], os.path.join(self.tmp, 'maps'),
            model.config.token_grid)
        self.assertEqual(len(paths), 4)
        with Image.open(paths[0]) as image:
            self.assertEqual(image.size, (4, 4))
        with self.assertRaises(RecordNotFound):
            export_uncertainty_maps(run, [1], self.tmp, (4, 4))

    def test_traces_and_archive(self):
        model = micro_model()
        sched = build_linear_schedule(5, 1e-4, 0.2)
        run = ancestral_sample(
            model, sched, ExitPolicy(threshold=0.4), 3, seed=0,
            map_steps=[1])
        run_dir = RunDirectory(self.tmp)
        path = write_traces(run, run_dir)
        with open(path) as handle:
            lines = handle.read().splitlines()
        self.assertEqual(lines[0], 'sample,step,t,exit_layer,u_at_exit')
        self.assertEqual(len(lines), 1 + 3 * 5)
        self.assertTrue(lines[1].startswith('0,0,5,'))

        archive = write_samples(run, run_dir.path('samples.eex'))
        restored = read_samples(archive)
        self.assertTrue(torch.equal(restored.samples, run.samples))
        self.assertTrue(torch.equal(restored.layers_used, run.layers_used))
        self.assertTrue(torch.equal(restored.maps[1], run.maps[1]))
        self.assertEqual(restored.ts, run.ts)
        self.assertEqual(restored.policy, run.policy)
