import os
import shutil
import tempfile

import torch
from django.test import SimpleTestCase
from scipy.stats import chisquare

from backbone.models import BackboneConfig
from earlyexit_lab.errors import (
    CheckpointError, ConfigError, EmptyInput, NonFiniteLoss)
from runs.serializers import resolve_run_config
from schedule.schedules import build_linear_schedule
from uem.models import EarlyExitDenoiser
from .archive import MAGIC, read_archive, write_archive
from .checkpoints import config_differences, load_checkpoint, save_checkpoint
from .datasets import make_toy_dataset, resolve_kind, sample_timesteps
from .loop import TimestepLossHistogram, Trainer
from .tasks import train_model

MICRO_RUN = {
    'seed': 3,
    'schedule': {'T': 20},
    'data': {'kind': 'gmm', 'n': 64},
    'model': {'depth': 3, 'hidden_dim': 8, 'num_heads': 2},
    'train': {'batch_size': 8, 'total_steps': 4, 'checkpoint_every': 2,
              'log_every': 0, 'learning_rate': 1e-3},
}


def micro_model(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    config = BackboneConfig(depth=3, hidden_dim=8, num_heads=2)
    return EarlyExitDenoiser(config).to(dtype)


class TempDirMixin(object):

    def setUp(self):
        super(TempDirMixin, self).setUp()
        self.tmp = tempfile.mkdtemp(prefix='earlyexit-training-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)


class TestToyDatasets(SimpleTestCase):

    def test_same_seed_same_data(self):
        for kind in ('gmm', 'swissroll', 'checkerboard', 'tinyimage'):
            first = make_toy_dataset(kind, 200, seed=5)
            second = make_toy_dataset(kind, 200, seed=5)
            self.assertTrue(torch.equal(first.data, second.data), kind)
        self.assertFalse(torch.equal(
            make_toy_dataset('gmm', 200, seed=5).data,
            make_toy_dataset('gmm', 200, seed=6).data))

    def test_mode_proportions(self):
        """
        Each of the 8 mixture modes holds 1/8 of the points within three
        binomial standard deviations.
        """
        n = 8000
        dataset = make_toy_dataset('gaussian-mixture', n, seed=0)
        counts = torch.bincount(dataset.labels, minlength=8).double() / n
        sigma = (0.125 * 0.875 / n) ** 0.5
        self.assertEqual(counts.numel(), 8)
        self.assertLess(float((counts - 0.125).abs().max()), 3 * sigma)

    def test_standardised(self):
        """
        Every dimension of every kind has mean within 0.02 of 0 and unit
        spread.
        """
        for kind in ('gmm', 'swissroll', 'checkerboard'):
            data = make_toy_dataset(kind, 10000, seed=1).data
            self.assertLess(float(data.mean(dim=0).abs().max()), 0.02)
            self.assertLess(float((data.std(dim=0) - 1).abs().max()), 0.01)

    def test_tiny_images(self):
        dataset = make_toy_dataset('tiny-image', 50, seed=2, image_size=8)
        self.assertEqual(dataset.input_shape, (1, 8, 8))
        self.assertEqual(set(dataset.labels.tolist()) - {0, 1, 2}, set())
        restored = dataset.restore(dataset.data)
        self.assertLess(float(restored.min()), -0.5)
        self.assertGreater(float(restored.max()), 0.5)

    def test_kinds(self):
        self.assertEqual(resolve_kind('gmm'), 'gaussian-mixture')
        self.assertEqual(resolve_kind('Swiss Roll'), 'swiss-roll')
        self.assertEqual(resolve_kind('tinyimage'), 'tiny-image')
        with self.assertRaises(ConfigError):
            make_toy_dataset('moons', 10, seed=0)
        with self.assertRaises(ConfigError):
            make_toy_dataset('gmm', 0, seed=0)


class TestSampleTimesteps(SimpleTestCase):

    def test_single_step(self):
        self.assertEqual(sample_timesteps(5, 1).tolist(), [1] * 5)

    def test_uniform(self):
        """
        10^5 draws on [1, 1000] pass a chi-square uniformity test at
        alpha = 0.01.
        """
        generator = torch.Generator().manual_seed(42)
        draws = sample_timesteps(100000, 1000, generator)
        self.assertEqual(int(draws.min()), 1)
        self.assertEqual(int(draws.max()), 1000)
        counts = torch.bincount(draws, minlength=1001)[1:].numpy()
        self.assertGreater(chisquare(counts).pvalue, 0.01)

    def test_reproducible(self):
        first = sample_timesteps(
            64, 1000, torch.Generator().manual_seed(9))
        second = sample_timesteps(
            64, 1000, torch.Generator().manual_seed(9))
        self.assertTrue(torch.equal(first, second))

    def test_rejects_empty_schedule(self):
        with self.assertRaises(ConfigError):
            sample_timesteps(4, 0)


class TestTimestepLossHistogram(SimpleTestCase):

    def test_running_means(self):
        histogram = TimestepLossHistogram(4)
        histogram.update(
            torch.tensor([1, 1, 3]), torch.tensor([1.0, 3.0, 5.0]))
        rows = list(histogram.rows())
        self.assertEqual(rows[0], (1, 2, 2.0))
        self.assertEqual(rows[2], (3, 1, 5.0))
        self.assertEqual(rows[1][1], 0)
        self.assertNotEqual(rows[1][2], rows[1][2])
        self.assertEqual(histogram.band_means(1, 3), 3.0)
        with self.assertRaises(EmptyInput):
            histogram.band_means(4, 4)

    def test_completeness(self):
        """
        30 T uniform draws leave no timestep bucket empty.
        """
        T = 200
        histogram = TimestepLossHistogram(T)
        generator = torch.Generator().manual_seed(0)
        t = sample_timesteps(30 * T, T, generator)
        histogram.update(t, torch.rand(30 * T, generator=generator))
        self.assertTrue(bool((histogram.counts[1:] > 0).all()))
        self.assertTrue(bool(torch.isfinite(histogram.means()).all()))


class TestTrainer(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super(TestTrainer, self).setUp()
        self.sched = build_linear_schedule(50, 1e-4, 0.2)
        self.data = make_toy_dataset('gmm', 128, seed=0).data

    def make_trainer(self, model=None, seed=7, **options):
        options.setdefault('batch_size', 16)
        options.setdefault('learning_rate', 1e-3)
        return Trainer(model or micro_model(), self.sched, seed=seed,
                       **options)

    def test_zero_learning_rate(self):
        """
        With lr = 0 a step leaves every parameter bitwise unchanged.
        """
        trainer = self.make_trainer(learning_rate=0.0)
        before = [p.detach().clone() for p in trainer.model.parameters()]
        trainer.train_step(trainer.next_batch(self.data))
        for old, new in zip(before, trainer.model.parameters()):
            self.assertTrue(torch.equal(old, new))

    def test_deterministic_trajectory(self):
        """
        Equal seeds and configs give equal loss trajectories.
        """
        trajectories = []
        for _ in range(2):
            trainer = self.make_trainer()
            losses = []
            trainer.fit(self.data, 5,
                        callback=lambda step, parts: losses.append(
                            parts.as_floats()))
            trajectories.append(losses)
        self.assertEqual(trajectories[0], trajectories[1])

    def test_single_step_matches_reference_optimizer(self):
        """
        One update equals a hand-written AdamW step with bias correction
        and decoupled weight decay, within 1e-10 in double precision.
        """
        lr, beta1, beta2, decay, eps = 1e-3, 0.99, 0.99, 0.03, 1e-8
        trainer = self.make_trainer(
            model=micro_model(dtype=torch.float64), learning_rate=lr,
            betas=(beta1, beta2), weight_decay=decay)
        before = [p.detach().clone() for p in trainer.model.parameters()]
        trainer.train_step(trainer.next_batch(self.data).double())
        for old, param in zip(before, trainer.model.parameters()):
            grad = param.grad
            m = (1 - beta1) * grad
            v = (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1)
            denom = v.sqrt() / (1 - beta2) ** 0.5 + eps
            expected = old * (1 - lr * decay) - lr * m_hat / denom
            self.assertLess(float((param.detach() - expected).abs().max()),
                            1e-10)

    def test_non_finite_loss_aborts(self):
        """
        A batch that makes the loss nan raises before any parameter moves.
        """
        trainer = self.make_trainer()
        before = [p.detach().clone() for p in trainer.model.parameters()]
        batch = torch.full((16, 2), float('nan'))
        with self.assertRaises(NonFiniteLoss) as cm:
            trainer.train_step(batch)
        self.assertEqual(cm.exception.component, 'simple')
        for old, new in zip(before, trainer.model.parameters()):
            self.assertTrue(torch.equal(old, new))
        self.assertEqual(trainer.step, 0)

    def test_histogram_follows_steps(self):
        trainer = self.make_trainer()
        trainer.fit(self.data, 3)
        self.assertEqual(int(trainer.histogram.counts.sum()), 3 * 16)

    def test_layerwise_modes(self):
        for mode in ('plain', 'none'):
            trainer = self.make_trainer(layerwise=mode)
            parts = trainer.train_step(trainer.next_batch(self.data))
            self.assertTrue(torch.isfinite(parts.total))
        with self.assertRaises(ConfigError):
            self.make_trainer(layerwise='both')

    def test_empty_data(self):
        with self.assertRaises(EmptyInput):
            self.make_trainer().next_batch(torch.zeros(0, 2))


class TestArchive(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super(TestArchive, self).setUp()
        self.path = os.path.join(self.tmp, 'sample.eex')
        self.tensors = {
            'weights': torch.randn(3, 4),
            'steps': torch.arange(5),
            'mask': torch.tensor([True, False]),
            'scalar': torch.tensor(2.5, dtype=torch.float64),
        }

    def test_round_trip(self):
        write_archive(self.path, self.tensors, {'note': 'hello'})
        metadata, tensors = read_archive(self.path)
        self.assertEqual(metadata, {'note': 'hello'})
        self.assertEqual(list(tensors), list(self.tensors))
        for name, value in self.tensors.items():
            self.assertEqual(tensors[name].dtype, value.dtype)
            self.assertTrue(torch.equal(tensors[name], value), name)
        self.assertFalse(os.path.exists(self.path + '.partial'))

    def test_truncated(self):
        write_archive(self.path, self.tensors)
        with open(self.path, 'rb') as handle:
            blob = handle.read()
        for cut in (len(MAGIC) + 4, len(MAGIC) + 20, len(blob) - 3):
            with open(self.path, 'wb') as handle:
                handle.write(blob[:cut])
            with self.assertRaises(CheckpointError):
                read_archive(self.path)

    def test_corruption_and_junk(self):
        write_archive(self.path, self.tensors)
        with open(self.path, 'rb') as handle:
            blob = bytearray(handle.read())
        blob[-1] ^= 0xFF
        with open(self.path, 'wb') as handle:
            handle.write(bytes(blob))
        with self.assertRaises(CheckpointError):
            read_archive(self.path)
        with open(self.path, 'wb') as handle:
            handle.write(b'not an archive')
        with self.assertRaises(CheckpointError):
            read_archive(self.path)


class TestCheckpoints(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super(TestCheckpoints, self).setUp()
        self.sched = build_linear_schedule(50, 1e-4, 0.2)
        self.data = make_toy_dataset('gmm', 128, seed=0).data
        self.path = os.path.join(self.tmp, 'checkpoints', 'model.eex')
        self.run_config = resolve_run_config(MICRO_RUN)

    def make_trainer(self, model, seed=7):
        return Trainer(model, self.sched, batch_size=16,
                       learning_rate=1e-3, seed=seed)

    def test_round_trip_is_bitwise(self):
        model = micro_model()
        save_checkpoint(self.path, model, self.run_config, step=12)
        checkpoint = load_checkpoint(self.path)
        self.assertEqual(checkpoint.step, 12)
        self.assertEqual(checkpoint.run_config, self.run_config)
        self.assertEqual(checkpoint.model.config, model.config)
        restored = dict(checkpoint.model.named_parameters())
        for name, param in model.named_parameters():
            self.assertTrue(torch.equal(param, restored[name]), name)

    def test_resume_reproduces_next_step(self):
        """
        Saving mid-run and resuming gives the same next loss as carrying
        on without interruption.
        """
        trainer = self.make_trainer(micro_model())
        trainer.fit(self.data, 3)
        save_checkpoint(
            self.path, trainer.model, self.run_config, trainer.step,
            optimizer=trainer.optimizer, generator=trainer.generator,
            histogram=trainer.histogram)
        expected = trainer.train_step(trainer.next_batch(self.data))

        checkpoint = load_checkpoint(self.path)
        resumed = self.make_trainer(checkpoint.model, seed=999)
        resumed.resume(checkpoint)
        self.assertEqual(resumed.step, 3)
        got = resumed.train_step(resumed.next_batch(self.data))
        self.assertEqual(got.as_floats(), expected.as_floats())

    def test_config_mismatch_lists_keys(self):
        save_checkpoint(self.path, micro_model(), self.run_config, step=1)
        other = resolve_run_config(
            MICRO_RUN, ['model.share_final_head=false', 'schedule.T=30',
                        'train.total_steps=9'])
        with self.assertRaises(CheckpointError) as cm:
            load_checkpoint(self.path, expected_config=other)
        self.assertEqual(
            cm.exception.differing_keys,
            ['model.share_final_head', 'schedule.T'])
        self.assertEqual(
            config_differences(self.run_config, self.run_config), [])

    def test_truncated_and_missing(self):
        save_checkpoint(self.path, micro_model(), self.run_config, step=1)
        with open(self.path, 'rb') as handle:
            blob = handle.read()
        with open(self.path, 'wb') as handle:
            handle.write(blob[:len(blob) // 2])
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)
        missing = os.path.join(self.tmp, 'nowhere.eex')
        with self.assertRaises(CheckpointError) as cm:
            load_checkpoint(missing)
        self.assertIn(missing, str(cm.exception))


class TestTrainModelTask(TempDirMixin, SimpleTestCase):

    def test_writes_run_directory(self):
        run_config = resolve_run_config(MICRO_RUN)
        out = os.path.join(self.tmp, 'run')
        summary = train_model.delay(run_config, out).get()
        self.assertEqual(summary['steps'], 4)
        for name in ('config.json', 'loss_curve.csv', 'timestep_loss.csv',
                     'metrics.json', 'checkpoints/step_0000002.eex',
                     'checkpoints/final.eex'):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        with open(os.path.join(out, 'loss_curve.csv')) as handle:
            lines = handle.read().splitlines()
        self.assertEqual(
            lines[0],
            'step,loss_simple,loss_uncertainty,loss_layerwise,loss_total')
        self.assertEqual(len(lines), 5)
        with open(os.path.join(out, 'timestep_loss.csv')) as handle:
            self.assertEqual(len(handle.read().splitlines()), 21)

    def test_reruns_are_byte_identical(self):
        run_config = resolve_run_config(MICRO_RUN)
        curves = []
        for name in ('first', 'second'):
            out = os.path.join(self.tmp, name)
            train_model.delay(run_config, out).get()
            with open(os.path.join(out, 'loss_curve.csv'), 'rb') as handle:
                curves.append(handle.read())
        self.assertEqual(curves[0], curves[1])

    def test_resume_continues_the_curve(self):
        """
        Resuming a 2-step checkpoint to 4 steps reproduces the rows of an
        uninterrupted run.
        """
        run_config = resolve_run_config(MICRO_RUN)
        straight = os.path.join(self.tmp, 'straight')
        train_model.delay(run_config, straight).get()

        short = resolve_run_config(MICRO_RUN, ['train.total_steps=2'])
        resumed = os.path.join(self.tmp, 'resumed')
        train_model.delay(short, resumed).get()
        checkpoint = os.path.join(resumed, 'checkpoints', 'final.eex')
        train_model.delay(run_config, resumed, resume=checkpoint).get()

        with open(os.path.join(straight, 'loss_curve.csv')) as handle:
            expected = handle.read()
        with open(os.path.join(resumed, 'loss_curve.csv')) as handle:
            self.assertEqual(handle.read(), expected)

    def test_resume_from_periodic_checkpoint_in_place(self):
        run_config = resolve_run_config(MICRO_RUN)
        out = os.path.join(self.tmp, 'run')
        train_model.delay(run_config, out).get()
        with open(os.path.join(out, 'loss_curve.csv')) as handle:
            expected = handle.read()

        checkpoint = os.path.join(out, 'checkpoints', 'step_0000002.eex')
        train_model.delay(run_config, out, resume=checkpoint).get()
        with open(os.path.join(out, 'loss_curve.csv')) as handle:
            curve = handle.read()
        steps = [int(line.split(',')[0]) for line in curve.splitlines()[1:]]
        self.assertEqual(steps, [1, 2, 3, 4])
        self.assertEqual(curve, expected)

    def test_resume_past_the_end(self):
        run_config = resolve_run_config(MICRO_RUN)
        out = os.path.join(self.tmp, 'run')
        train_model.delay(run_config, out).get()
        with self.assertRaises(ConfigError):
            train_model.delay(
                run_config, out,
                resume=os.path.join(out, 'checkpoints', 'final.eex')).get()
