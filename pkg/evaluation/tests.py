import os
import shutil
import tempfile

import torch
from django.test import SimpleTestCase
from PIL import Image

from backbone.models import BackboneConfig
from earlyexit_lab.errors import (
    CheckpointError, ConfigError, EmptyInput, ShapeMismatch)
from runs.serializers import resolve_run_config
from sampling.policies import ExitPolicy
from sampling.samplers import SampleRun
from schedule.schedules import build_linear_schedule
from training.checkpoints import save_checkpoint
from training.datasets import make_toy_dataset
from uem.models import EarlyExitDenoiser
from .metrics import (
    flops_estimate, frechet_pixel_distance, layer_costs, layer_usage_report,
    mmd_quality, noise_floor)
from .profiling import (
    default_t_grid, error_accumulation_curve, layer_redundancy_profile)
from .render import render_heatmap, render_lines
from .sweeps import (
    evaluate_policy, load_for_evaluation, reference_points, threshold_sweep)

MICRO_RUN = {
    'seed': 5,
    'schedule': {'T': 10},
    'data': {'kind': 'gmm', 'n': 64},
    'model': {'depth': 3, 'hidden_dim': 8, 'num_heads': 2},
    'sample': {'n': 16},
    'eval': {'n_reference': 32, 'bandwidths': [0.5, 1.0]},
}


def micro_model(seed=0, depth=4):
    torch.manual_seed(seed)
    config = BackboneConfig(depth=depth, hidden_dim=8, num_heads=2)
    model = EarlyExitDenoiser(config)
    for head in model.uem.heads:
        torch.nn.init.normal_(head.weight, std=1.0)
    return model.eval()


class TestLayerUsageReport(SimpleTestCase):

    def test_full_depth(self):
        report = layer_usage_report(torch.full((4, 10), 13), 13)
        self.assertEqual(report.avg_layers, 13.0)
        self.assertEqual(report.layers_ratio_reduction, 0.0)

    def test_half_and_half(self):
        """
        Half the steps at 13 and half at 7 average 10 layers, a 23.1%
        saving.
        """
        used = torch.tensor([[13, 7], [7, 13]])
        report = layer_usage_report(used, 13)
        self.assertEqual(report.avg_layers, 10.0)
        self.assertAlmostEqual(report.layers_ratio_reduction, 3 / 13)
        self.assertAlmostEqual(report.reduction_percent, -23.0769, places=3)

    def test_mean_depth_of_six_point_eight(self):
        used = torch.tensor([6] * 4 + [7] * 16)
        report = layer_usage_report(used, 13)
        self.assertAlmostEqual(report.avg_layers, 6.8)
        self.assertAlmostEqual(report.reduction_percent, -47.6923, places=3)

    def test_matches_a_plain_mean(self):
        generator = torch.Generator().manual_seed(0)
        used = torch.randint(1, 14, (37, 11), generator=generator)
        report = layer_usage_report(used, 13)
        expected = sum(used.flatten().tolist()) / used.numel()
        self.assertAlmostEqual(report.avg_layers, expected, places=12)

    def test_accepts_a_sample_run(self):
        run = SampleRun(
            samples=torch.zeros(2, 2),
            layers_used=torch.tensor([[2, 3], [3, 3]]),
            u_traces=torch.zeros(2, 2), ts=[2, 1], sampler='ancestral',
            policy=ExitPolicy(0.1), seed=0, depth=3)
        config = BackboneConfig(depth=3, hidden_dim=8, num_heads=2)
        report = layer_usage_report(run, 3, config)
        self.assertEqual(report.avg_layers, 2.75)
        self.assertLess(report.flops_actual, report.flops_full)
        self.assertEqual(report.as_dict()['depth'], 3)

    def test_empty(self):
        with self.assertRaises(EmptyInput):
            layer_usage_report(torch.zeros(0, dtype=torch.long), 13)


class TestFlopsEstimate(SimpleTestCase):

    def setUp(self):
        self.config = BackboneConfig(depth=13, hidden_dim=64, num_heads=4)

    def test_full_depth_costs_full(self):
        full, actual = flops_estimate(self.config, 13)
        self.assertEqual(full, actual)

    def test_reduction_tracks_layer_ratio(self):
        """
        A 47.6% layer saving turns into a cost saving within 2 points of
        it on the 13-layer benchmark model.
        """
        full, actual = flops_estimate(self.config, 13 * (1 - 0.476))
        self.assertLess(abs((1 - actual / full) - 0.476), 0.02)

    def test_linear_in_depth(self):
        _, fixed_only = flops_estimate(self.config, 0)
        _, one = flops_estimate(self.config, 1)
        _, seven = flops_estimate(self.config, 7)
        self.assertAlmostEqual(seven - fixed_only, 7 * (one - fixed_only))
        per_layer, fixed = layer_costs(self.config)
        self.assertEqual(fixed_only, float(sum(fixed.values())))

    def test_mlp_term_quadruples(self):
        wide = BackboneConfig(depth=13, hidden_dim=128, num_heads=4)
        self.assertEqual(layer_costs(wide)[0]['mlp'],
                         4 * layer_costs(self.config)[0]['mlp'])


class TestMmdQuality(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(1)
        self.a = torch.randn(40, 2, generator=generator)
        self.b = torch.randn(55, 2, generator=generator) + 0.5

    def test_symmetric(self):
        for unbiased in (True, False):
            self.assertEqual(
                mmd_quality(self.a, self.b, [0.5, 1.0], unbiased=unbiased),
                mmd_quality(self.b, self.a, [0.5, 1.0], unbiased=unbiased))

    def test_same_set_is_zero(self):
        self.assertEqual(
            mmd_quality(self.a, self.a, [0.2, 2.0], unbiased=False), 0.0)

    def test_two_point_masses(self):
        """
        One point at the origin and one at distance d: the biased estimate
        is 2 (1 - exp(-d^2 / 2h^2)).
        """
        d, h = 1.5, 0.7
        value = mmd_quality(
            torch.tensor([[0.0, 0.0], [0.0, 0.0]]),
            torch.tensor([[d, 0.0], [d, 0.0]]), [h], unbiased=False)
        expected = 2 * (1 - torch.exp(torch.tensor(-d * d / (2 * h * h),
                                                   dtype=torch.float64)))
        self.assertAlmostEqual(value, float(expected), places=12)

    def test_separated_sets_score_higher(self):
        near = mmd_quality(self.a, self.a + 0.1, [1.0])
        far = mmd_quality(self.a, self.a + 3.0, [1.0])
        self.assertGreater(far, near)

    def test_errors(self):
        with self.assertRaises(ShapeMismatch):
            mmd_quality(self.a, torch.zeros(5, 3), [1.0])
        with self.assertRaises(EmptyInput):
            mmd_quality(self.a[:1], self.b, [1.0])
        with self.assertRaises(EmptyInput):
            mmd_quality(self.a, self.b, [])

    def test_matched_halves_sit_in_the_noise(self):
        """
        Two disjoint halves of one 5000-point draw score within three
        permutation standard deviations of zero.
        """
        data = make_toy_dataset('gmm', 5000, seed=3).data
        bandwidths = [0.1, 0.2, 0.5, 1.0, 2.0]
        observed = noise_floor(data, bandwidths)
        generator = torch.Generator().manual_seed(0)
        permuted = []
        for _ in range(10):
            shuffled = data[torch.randperm(5000, generator=generator)]
            permuted.append(noise_floor(shuffled, bandwidths))
        sigma = torch.tensor(permuted, dtype=torch.float64).std()
        self.assertLess(abs(observed), 3 * float(sigma) + 1e-12)


class TestFrechetPixelDistance(SimpleTestCase):

    def test_identical_sets(self):
        data = torch.randn(200, 3, generator=torch.Generator().manual_seed(0))
        self.assertLess(frechet_pixel_distance(data, data), 1e-8)

    def test_shifted_mean(self):
        data = torch.randn(300, 2, generator=torch.Generator().manual_seed(0))
        value = frechet_pixel_distance(data, data + 1.0)
        self.assertAlmostEqual(value, 2.0, places=6)

    def test_images_are_flattened(self):
        images = torch.rand(30, 1, 2, 2, generator=torch.Generator())
        self.assertGreaterEqual(frechet_pixel_distance(images, images), 0.0)
        with self.assertRaises(ShapeMismatch):
            frechet_pixel_distance(images, torch.rand(30, 3))


class TestProfiling(SimpleTestCase):

    def setUp(self):
        self.model = micro_model()
        self.sched = build_linear_schedule(50, 1e-4, 0.2)
        self.data = make_toy_dataset('gmm', 200, seed=0).data

    def test_redundancy_on_untrained_model(self):
        table = layer_redundancy_profile(
            self.model, self.data, self.sched, [1, 25, 50], probe_n=32)
        self.assertEqual(tuple(table.values.shape), (3, 4))
        self.assertTrue(bool(torch.isfinite(table.values).all()))
        self.assertTrue(bool((table.values >= 0).all()))
        self.assertEqual(table.values[:, -1].tolist(), [0.0, 0.0, 0.0])
        self.assertEqual(len(list(table.rows())), 12)

    def test_redundancy_is_reproducible(self):
        first = layer_redundancy_profile(
            self.model, self.data, self.sched, [10], probe_n=16, seed=4)
        second = layer_redundancy_profile(
            self.model, self.data, self.sched, [10], probe_n=16, seed=4)
        self.assertTrue(torch.equal(first.values, second.values))

    def test_redundancy_needs_a_grid(self):
        with self.assertRaises(EmptyInput):
            layer_redundancy_profile(self.model, self.data, self.sched, [])

    def test_default_grid(self):
        grid = default_t_grid(1000)
        self.assertEqual(len(grid), 10)
        self.assertEqual((grid[0], grid[-1]), (1, 1000))
        self.assertEqual(default_t_grid(4), [1, 2, 3, 4])

    def test_error_accumulation_is_zero_without_exits(self):
        rows = error_accumulation_curve(
            self.model, self.sched, ExitPolicy(), n=4, seed=0)
        self.assertEqual(len(rows), 50)
        self.assertEqual(set(gap for _, _, gap in rows), {0.0})

    def test_error_accumulation_with_exits(self):
        rows = error_accumulation_curve(
            self.model, self.sched, ExitPolicy(threshold=0.6), n=4, seed=0,
            sampler='deterministic', steps=10)
        self.assertEqual([t for _, t, _ in rows][:2], [50, 45])
        self.assertTrue(all(gap >= 0 for _, _, gap in rows))
        self.assertGreater(rows[-1][2], 0.0)
        with self.assertRaises(ConfigError):
            error_accumulation_curve(
                self.model, self.sched, ExitPolicy(), 2, 0, sampler='sde')


class TestRender(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='earlyexit-render-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def test_heatmap(self):
        path = render_heatmap(
            torch.rand(3, 5).numpy(), os.path.join(self.tmp, 'h.png'), cell=4)
        with Image.open(path) as image:
            self.assertEqual(image.size, (20, 12))

    def test_lines(self):
        path = render_lines(
            {'ual': [(0, 1.0), (1, 0.5), (2, float('nan'))],
             'plain': [(0, 2.0), (2, 1.0)]},
            os.path.join(self.tmp, 'l.png'), log_y=True)
        with Image.open(path) as image:
            self.assertEqual(image.size, (480, 320))


class TestThresholdSweep(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='earlyexit-sweep-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)
        self.run_config = resolve_run_config(MICRO_RUN)
        torch.manual_seed(0)
        model = EarlyExitDenoiser.from_run_config(self.run_config, (2,))
        for head in model.uem.heads:
            torch.nn.init.normal_(head.weight, std=1.0)
        self.checkpoint = save_checkpoint(
            os.path.join(self.tmp, 'model.eex'), model, self.run_config, 0)

    def test_one_point_per_threshold(self):
        points = threshold_sweep(
            self.checkpoint, self.run_config, [0.0, 0.45, 1.0])
        self.assertEqual([p.threshold for p in points], [0.0, 0.45, 1.0])
        self.assertEqual(points[0].layers_ratio_reduction, 0.0)
        self.assertEqual(points[2].avg_layers, 1.0)

    def test_zero_threshold_scores_the_full_model(self):
        point = threshold_sweep(self.checkpoint, self.run_config, [0.0])[0]
        model, sched = load_for_evaluation(self.checkpoint, self.run_config)
        _, report, scores = evaluate_policy(
            model, sched, self.run_config, ExitPolicy(),
            reference_points(self.run_config))
        self.assertEqual(point.mmd, scores['mmd'])
        self.assertEqual(point.avg_layers, 3.0)
        self.assertEqual(point.flops_actual, report.flops_full)

    def test_reference_is_in_training_coordinates(self):
        reference = reference_points(self.run_config)
        self.assertEqual(tuple(reference.shape), (32, 2))
        self.assertLess(float(reference.mean(dim=0).abs().max()), 1.0)

    def test_errors(self):
        with self.assertRaises(ConfigError):
            threshold_sweep(self.checkpoint, self.run_config, [])
        with self.assertRaises(ConfigError):
            threshold_sweep(self.checkpoint, self.run_config, [-0.1])
        other = resolve_run_config(MICRO_RUN, ['model.depth=4'])
        with self.assertRaises(CheckpointError):
            threshold_sweep(self.checkpoint, other, [0.1])
