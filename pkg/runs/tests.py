import csv
import json
import os
import shutil
import tempfile
from io import StringIO

import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from earlyexit_lab.cli import main
from earlyexit_lab.errors import ConfigError
from training.checkpoints import save_checkpoint
from uem.models import EarlyExitDenoiser
from .artifacts import CsvLog, RunDirectory, format_cell
from .serializers import (
    flatten_errors, load_run_config, parse_override, resolve_run_config)

MICRO_RUN = {
    'seed': 2,
    'schedule': {'T': 8},
    'data': {'kind': 'gmm', 'n': 64},
    'model': {'depth': 3, 'hidden_dim': 8, 'num_heads': 2},
    'train': {'batch_size': 8, 'total_steps': 3, 'checkpoint_every': 0,
              'log_every': 0},
    'sample': {'n': 4, 'steps': 4},
    'eval': {'n_reference': 16, 'bandwidths': [1.0], 't_grid': [1, 8],
             'probe_n': 8},
}


class TempDirMixin(object):

    def setUp(self):
        super(TempDirMixin, self).setUp()
        self.tmp = tempfile.mkdtemp(prefix='earlyexit-runs-')
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def write_json(self, name, data):
        path = os.path.join(self.tmp, name)
        with open(path, 'w') as handle:
            json.dump(data, handle)
        return path

    def read_csv(self, *parts):
        with open(os.path.join(*parts)) as handle:
            return list(csv.reader(handle))


class TestRunConfigSerializer(SimpleTestCase):

    def test_defaults(self):
        run_config = resolve_run_config()
        self.assertEqual(run_config['schedule'], {
            'T': 1000, 'beta_start': 1e-4, 'beta_end': 0.02})
        self.assertEqual(run_config['model']['depth'], 13)
        self.assertEqual(run_config['loss']['layerwise'], 'ual')
        self.assertEqual(run_config['eval']['thresholds'],
                         [0.2, 0.1, 0.05, 0.02, 0.01])
        self.assertEqual(run_config['paths'],
                         {'out': None, 'checkpoint': None})

    def test_unknown_keys_are_listed(self):
        with self.assertRaises(ConfigError) as cm:
            resolve_run_config({'model': {'depht': 4, 'widht': 2}})
        self.assertEqual(sorted(cm.exception.details),
                         ['model.depht', 'model.widht'])
        with self.assertRaises(ConfigError) as cm:
            resolve_run_config({'extra': 1})
        self.assertEqual(list(cm.exception.details), ['extra'])

    def test_cross_field_rules(self):
        cases = [
            ({'schedule': {'beta_start': 0.1, 'beta_end': 0.01}},
             'schedule.beta_start'),
            ({'model': {'hidden_dim': 10, 'num_heads': 4}},
             'model.hidden_dim'),
            ({'model': {'depth': 3}, 'exit': {'min_layer': 4}},
             'exit.min_layer'),
            ({'data': {'kind': 'tinyimage', 'image_size': 8},
              'model': {'patch_size': 3}}, 'model.patch_size'),
            ({'schedule': {'T': 10},
              'sample': {'sampler': 'deterministic', 'steps': 11}},
             'sample.steps'),
            ({'train': {'learning_rate': 0}}, 'train.learning_rate'),
        ]
        for document, key in cases:
            with self.assertRaises(ConfigError) as cm:
                resolve_run_config(document)
            self.assertIn(key, cm.exception.details, document)

    def test_overrides(self):
        run_config = resolve_run_config(
            {'exit': {'threshold': 0.2}},
            ['exit.threshold=0.1', 'uem.aggregation=max',
             ('sample.n', 12)])
        self.assertEqual(run_config['exit']['threshold'], 0.1)
        self.assertEqual(run_config['uem']['aggregation'], 'max')
        self.assertEqual(run_config['sample']['n'], 12)

    def test_parse_override(self):
        self.assertEqual(parse_override('a.b=[1, 2]'), ('a.b', [1, 2]))
        self.assertEqual(parse_override('a.b=mean'), ('a.b', 'mean'))
        self.assertEqual(parse_override('seed=3'), ('seed', 3))
        with self.assertRaises(ConfigError):
            parse_override('exit.threshold')
        with self.assertRaises(ConfigError):
            resolve_run_config({'seed': 1}, ['seed.value=2'])

    def test_flatten_errors(self):
        self.assertEqual(
            flatten_errors({'model': {'depth': ['bad']},
                            'non_field_errors': ['worse']}),
            {'model.depth': ['bad'], 'config': ['worse']})

    def test_load_run_config(self):
        with self.assertRaises(ConfigError) as cm:
            load_run_config('/nonexistent/run.json')
        self.assertIn('/nonexistent/run.json', str(cm.exception))
        tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmp)
        path = os.path.join(tmp, 'broken.json')
        with open(path, 'w') as handle:
            handle.write('{"seed": ')
        with self.assertRaises(ConfigError):
            load_run_config(path)


class TestArtifacts(TempDirMixin, SimpleTestCase):

    def test_format_cell(self):
        self.assertEqual(format_cell(True), '1')
        self.assertEqual(format_cell(3), '3')
        self.assertEqual(format_cell(0.1), '0.1')
        self.assertEqual(format_cell(float('nan')), 'nan')
        self.assertEqual(format_cell(torch.tensor(2)), '2')

    def test_csv_log_appends_one_header(self):
        path = os.path.join(self.tmp, 'log.csv')
        with CsvLog(path, ['step', 'loss']) as log:
            log.append([1, 0.5])
        with CsvLog(path, ['step', 'loss']) as log:
            log.append([2, 0.25])
        self.assertEqual(self.read_csv(path),
                         [['step', 'loss'], ['1', '0.5'], ['2', '0.25']])

    def test_run_directory(self):
        run_dir = RunDirectory(os.path.join(self.tmp, 'run'))
        run_dir.write_config({'b': 1, 'a': 2})
        with open(run_dir.path('config.json')) as handle:
            self.assertEqual(handle.read(), '{\n  "a": 2,\n  "b": 1\n}\n')
        run_dir.update_metrics('train', {'steps': 3})
        run_dir.update_metrics('sample', {'n': 4})
        self.assertEqual(run_dir.read_json('metrics.json'),
                         {'train': {'steps': 3}, 'sample': {'n': 4}})
        self.assertTrue(run_dir.checkpoint_path(12).endswith(
            os.path.join('checkpoints', 'step_0000012.eex')))

    @override_settings(EARLYEXIT_OUTPUT_ROOT='/data/runs')
    def test_default_run_path(self):
        from .artifacts import default_run_path
        self.assertEqual(default_run_path('sample-seed0'),
                         '/data/runs/sample-seed0')


class TestTrainCommand(TempDirMixin, SimpleTestCase):

    def call(self, *args):
        return call_command('train', *args, stdout=StringIO())

    def test_missing_config_file(self):
        missing = os.path.join(self.tmp, 'absent.json')
        with self.assertRaises(CommandError) as cm:
            self.call('--config', missing, '--out', self.tmp)
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn(missing, str(cm.exception))

    def test_invalid_keys_are_config_errors(self):
        path = self.write_json('bad.json', {'model': {'layers': 3}})
        with self.assertRaises(CommandError) as cm:
            self.call('--config', path, '--out', self.tmp)
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn('model.layers', str(cm.exception))

    def test_unusable_output_directory(self):
        path = self.write_json('micro.json', MICRO_RUN)
        blocker = self.write_json('not-a-directory', {})
        out = os.path.join(blocker, 'run')
        with self.assertRaises(CommandError) as cm:
            self.call('--config', path, '--out', out)
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn(out, str(cm.exception))
        self.assertEqual(len(str(cm.exception).splitlines()), 1)
        with self.assertRaises(SystemExit) as cm:
            main(['earlyexit-lab', 'train', '--config', path, '--out', out])
        self.assertEqual(cm.exception.code, 3)

    def test_overrides_are_echoed(self):
        path = self.write_json('micro.json', MICRO_RUN)
        out = os.path.join(self.tmp, 'run')
        self.call('--config', path, '--out', out,
                  '--set', 'exit.threshold=0.1', '--seed', '9')
        with open(os.path.join(out, 'config.json')) as handle:
            echoed = json.load(handle)
        self.assertEqual(echoed['exit']['threshold'], 0.1)
        self.assertEqual(echoed['seed'], 9)
        self.assertTrue(os.path.exists(
            os.path.join(out, 'checkpoints', 'final.eex')))

    def test_reruns_write_identical_loss_curves(self):
        path = self.write_json('micro.json', MICRO_RUN)
        curves = []
        for name in ('a', 'b'):
            out = os.path.join(self.tmp, name)
            self.call('--config', path, '--out', out)
            with open(os.path.join(out, 'loss_curve.csv'), 'rb') as handle:
                curves.append(handle.read())
        self.assertEqual(curves[0], curves[1])


class CheckpointCommandMixin(TempDirMixin):

    def setUp(self):
        super(CheckpointCommandMixin, self).setUp()
        self.run_config = resolve_run_config(MICRO_RUN)
        torch.manual_seed(0)
        model = EarlyExitDenoiser.from_run_config(self.run_config, (2,))
        for head in model.uem.heads:
            torch.nn.init.normal_(head.weight, std=1.0)
        self.checkpoint = save_checkpoint(
            os.path.join(self.tmp, 'model.eex'), model, self.run_config, 3)
        self.out = os.path.join(self.tmp, 'out')

    def call(self, command, *args):
        return call_command(
            command, '--checkpoint', self.checkpoint, '--out', self.out,
            *args, stdout=StringIO())


class TestSampleCommand(CheckpointCommandMixin, SimpleTestCase):

    def test_threshold_zero_reports_no_reduction(self):
        self.call('sample', '--threshold', '0')
        rows = self.read_csv(self.out, 'efficiency.csv')
        row = dict(zip(rows[0], rows[1]))
        self.assertEqual(row['layers_ratio_reduction'], '0.0')
        self.assertEqual(row['reduction_percent'], '0.0')
        self.assertEqual(row['avg_layers'], '3.0')
        self.assertTrue(os.path.exists(os.path.join(self.out, 'samples.eex')))

    def test_deterministic_steps(self):
        self.call('sample', '--sampler', 'deterministic', '--steps', '5',
                  '--n', '3', '--threshold', '0.4')
        rows = self.read_csv(self.out, 'traces.csv')
        self.assertEqual(rows[0],
                         ['sample', 'step', 't', 'exit_layer', 'u_at_exit'])
        for sample in range(3):
            self.assertEqual(
                len([r for r in rows[1:] if r[0] == str(sample)]), 5)
        maps = os.listdir(os.path.join(self.out, 'maps'))
        self.assertEqual(len(maps), 3 * 3)
        metrics = RunDirectory(self.out).read_json('metrics.json')['sample']
        self.assertIn('u_first', metrics)

    def test_missing_checkpoint(self):
        missing = os.path.join(self.tmp, 'nowhere.eex')
        with self.assertRaises(CommandError) as cm:
            call_command('sample', '--checkpoint', missing, '--out', self.out,
                         stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn(missing, str(cm.exception))

    def test_console_exit_status(self):
        missing = os.path.join(self.tmp, 'nowhere.eex')
        with self.assertRaises(SystemExit) as cm:
            main(['earlyexit-lab', 'sample', '--checkpoint', missing,
                  '--out', self.out])
        self.assertEqual(cm.exception.code, 3)

    def test_checkpoint_taken_from_config(self):
        document = dict(MICRO_RUN, paths={'checkpoint': self.checkpoint})
        path = self.write_json('with-checkpoint.json', document)
        call_command('sample', '--config', path, '--out', self.out,
                     stdout=StringIO())
        self.assertTrue(os.path.exists(os.path.join(self.out, 'traces.csv')))


class TestEvaluationCommands(CheckpointCommandMixin, SimpleTestCase):

    def test_eval(self):
        self.call('eval', '--threshold', '0.3')
        metrics = RunDirectory(self.out).read_json('metrics.json')['eval']
        for key in ('mmd', 'mmd_noise_floor', 'frechet', 'avg_layers',
                    'flops_actual'):
            self.assertIn(key, metrics)

    def test_eval_of_saved_samples(self):
        self.call('sample', '--threshold', '0')
        samples = os.path.join(self.out, 'samples.eex')
        self.call('eval', '--samples', samples)
        metrics = RunDirectory(self.out).read_json('metrics.json')
        self.assertEqual(metrics['eval']['avg_layers'],
                         metrics['sample']['avg_layers'])

    def test_dataset_mismatch(self):
        with self.assertRaises(CommandError) as cm:
            self.call('eval', '--dataset', 'swissroll')
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn('data.kind', str(cm.exception))

    def test_profile_untrained(self):
        self.call('profile')
        rows = self.read_csv(self.out, 'redundancy.csv')
        self.assertEqual(rows[0], ['t', 'layer', 'mse'])
        self.assertEqual(len(rows), 1 + 2 * 3)
        for row in rows[1:]:
            self.assertGreaterEqual(float(row[2]), 0.0)
        accum = self.read_csv(self.out, 'error_accum.csv')
        self.assertEqual(len(accum), 1 + 8)
        for name in ('redundancy.png', 'error_accum.png'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)))

    def test_sweep(self):
        self.call('sweep', '--thresholds', '0.2,0.1,0.05,0.02,0.01')
        rows = self.read_csv(self.out, 'tradeoff.csv')
        self.assertEqual(rows[0][0], 'threshold')
        self.assertEqual([row[0] for row in rows[1:]],
                         ['0.2', '0.1', '0.05', '0.02', '0.01'])
        self.assertTrue(os.path.exists(os.path.join(self.out, 'tradeoff.png')))

    def test_sweep_needs_thresholds(self):
        with self.assertRaises(CommandError) as cm:
            self.call('sweep', '--thresholds', ',')
        self.assertEqual(cm.exception.returncode, 2)
