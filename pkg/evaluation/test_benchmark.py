""" Directional checks on the trained gaussian-mixture benchmark. Each
training run takes tens of minutes, so the suite only runs with
EARLYEXIT_BENCHMARK=1.
"""
import csv
import json
import os
import shutil
import tempfile
import unittest

from django.conf import settings
from django.test import SimpleTestCase

from runs.serializers import load_run_config
from sampling.policies import ExitPolicy
from sampling.samplers import sample_from_config, uncertainty_trend
from training.tasks import train_model
from .profiling import error_accumulation_curve
from .sweeps import load_for_evaluation, threshold_sweep

BENCHMARK = os.environ.get('EARLYEXIT_BENCHMARK') == '1'
THRESHOLDS = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2]
SEEDS = (0, 1, 2)


def benchmark_config(*overrides):
    path = os.path.join(settings.BASE_DIR, 'configs', 'gmm.json')
    return load_run_config(path, overrides)


def first_saving_point(points, saving=0.3):
    for point in points:
        if point.layers_ratio_reduction >= saving:
            return point
    return None


@unittest.skipUnless(BENCHMARK, "set EARLYEXIT_BENCHMARK=1 to run")
class TestGaussianMixtureBenchmark(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super(TestGaussianMixtureBenchmark, cls).setUpClass()
        cls.tmp = tempfile.mkdtemp(prefix='earlyexit-benchmark-')
        cls.runs = {}
        for seed in SEEDS:
            for mode in ('ual', 'plain'):
                run_config = benchmark_config(
                    'loss.layerwise="%s"' % mode, 'seed=%s' % seed)
                out = os.path.join(cls.tmp, '%s-%s' % (mode, seed))
                summary = train_model.delay(run_config, out).get()
                cls.runs[mode, seed] = (
                    run_config, summary['checkpoint'], out)
        cls.sweeps = dict(
            (key, threshold_sweep(checkpoint, run_config, THRESHOLDS))
            for key, (run_config, checkpoint, _) in cls.runs.items())

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super(TestGaussianMixtureBenchmark, cls).tearDownClass()

    def load(self, mode, seed=0):
        run_config, checkpoint, _ = self.runs[mode, seed]
        model, sched = load_for_evaluation(checkpoint, run_config)
        return run_config, model, sched

    def test_sweep_trades_quality_for_depth(self):
        """
        Layer savings grow with the threshold, and some point saving 30%
        of layers stays within twice the full model's MMD.
        """
        points = self.sweeps['ual', 0]
        savings = [p.layers_ratio_reduction for p in points]
        self.assertEqual(savings, sorted(savings))
        self.assertEqual(points[0].layers_ratio_reduction, 0.0)
        saving = [p for p in points if p.layers_ratio_reduction >= 0.3]
        self.assertTrue(any(p.mmd <= 2 * points[0].mmd for p in saving))

    def test_uncertainty_aware_loss_beats_plain_at_matched_depth(self):
        """
        At the first threshold saving 30% of layers the uncertainty-aware
        model scores the lower MMD for a majority of seeds.
        """
        wins = 0
        for seed in SEEDS:
            ual = first_saving_point(self.sweeps['ual', seed])
            plain = first_saving_point(self.sweeps['plain', seed])
            self.assertIsNotNone(ual, seed)
            self.assertIsNotNone(plain, seed)
            if ual.mmd <= plain.mmd:
                wins += 1
        self.assertGreaterEqual(wins, 2)

    def test_uncertainty_rises_along_the_chain(self):
        run_config, model, sched = self.load('ual')
        run = sample_from_config(
            model, sched, run_config, ExitPolicy.from_run_config(run_config))
        trend = uncertainty_trend(run)
        self.assertGreater(trend['u_last'], trend['u_first'])

    def test_simple_loss_falls_over_training(self):
        """
        Mean L_simple over the last 10% of steps is below the mean over the
        first 10%.
        """
        for seed in SEEDS:
            run_config, _, out = self.runs['ual', seed]
            self.assertGreaterEqual(
                run_config['train']['total_steps'], 5000)
            with open(os.path.join(out, 'loss_curve.csv')) as handle:
                losses = [float(row['loss_simple'])
                          for row in csv.DictReader(handle)]
            width = len(losses) // 10
            first = sum(losses[:width]) / width
            last = sum(losses[-width:]) / width
            self.assertLess(last, first, seed)

    def test_training_loss_is_lower_at_large_t(self):
        _, _, out = self.runs['ual', 0]
        with open(os.path.join(out, 'metrics.json')) as handle:
            train = json.load(handle)['train']
        self.assertLess(train['loss_band_high_t'], train['loss_band_low_t'])

    def test_error_accumulates_less_with_uncertainty_aware_loss(self):
        """
        Each model runs at the threshold of its first 30%-saving sweep
        point; the uncertainty-aware chain ends closer to its full-depth
        twin.
        """
        terminal = {}
        for mode in ('ual', 'plain'):
            run_config, model, sched = self.load(mode)
            point = first_saving_point(self.sweeps[mode, 0])
            self.assertIsNotNone(point, mode)
            threshold = point.threshold
            policy = ExitPolicy.from_run_config(run_config).with_threshold(
                threshold)
            rows = error_accumulation_curve(
                model, sched, policy, n=256, seed=0)
            self.assertEqual(
                error_accumulation_curve(
                    model, sched, ExitPolicy(), n=8, seed=0)[-1][2], 0.0)
            terminal[mode] = rows[-1][2]
        self.assertLess(terminal['ual'], terminal['plain'])
