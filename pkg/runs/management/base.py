""" Shared plumbing for the lab's management commands: run-config
resolution from --config, --set and the dedicated flags, output directory
selection and the mapping of lab errors onto exit statuses.
"""
import json
import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from earlyexit_lab.errors import ConfigError, LabError
from earlyexit_lab.utils import configure_torch, parse_float_list
from training.checkpoints import checkpoint_run_config
from runs.artifacts import RunDirectory, default_run_path
from runs.serializers import DATASET_CHOICES, load_run_config, \
    resolve_run_config

logger = logging.getLogger(__name__)

CONFIG_ERROR_STATUS = 2
RUNTIME_ERROR_STATUS = 3

# flag -> run-config key
FLAG_KEYS = (
    ('seed', 'seed'),
    ('dataset', 'data.kind'),
    ('threshold', 'exit.threshold'),
    ('sampler', 'sample.sampler'),
    ('steps', 'sample.steps'),
    ('n', 'sample.n'),
)


class LabCommand(BaseCommand):
    """ Subclasses implement run(run_config, run_dir, **options) and list
    the dedicated flags they accept in `flags`.
    """
    flags = ('seed',)
    uses_checkpoint = False

    def add_arguments(self, parser):
        parser.add_argument(
            '--config', default=None,
            help='Run config JSON (default: $EARLYEXIT_DEFAULT_CONFIG, or '
                 'the checkpoint\'s own config for commands that load one)')
        parser.add_argument(
            '--out', default=None,
            help='Run directory (default: under $EARLYEXIT_OUTPUT_ROOT)')
        parser.add_argument(
            '--set', action='append', default=[], dest='overrides',
            metavar='SECTION.KEY=VALUE',
            help='Override one run-config key; may be repeated')
        if self.uses_checkpoint:
            parser.add_argument(
                '--checkpoint', default=None,
                help='Checkpoint archive (default: paths.checkpoint)')
        if 'seed' in self.flags:
            parser.add_argument('--seed', type=int, default=None)
        if 'dataset' in self.flags:
            parser.add_argument(
                '--dataset', choices=DATASET_CHOICES, default=None)
        if 'threshold' in self.flags:
            parser.add_argument('--threshold', type=float, default=None)
        if 'sampler' in self.flags:
            parser.add_argument(
                '--sampler', choices=('ancestral', 'deterministic'),
                default=None)
        if 'steps' in self.flags:
            parser.add_argument('--steps', type=int, default=None)
        if 'n' in self.flags:
            parser.add_argument('--n', type=int, default=None)
        self.add_lab_arguments(parser)

    def add_lab_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            configure_torch()
            run_config = self.resolve(options)
            run_dir = RunDirectory(self.output_path(run_config, options))
            summary = self.run(run_config, run_dir, **options)
        except ValidationError as exc:
            raise CommandError(
                "invalid run config: %s" % json.dumps(exc.detail),
                returncode=CONFIG_ERROR_STATUS)
        except ConfigError as exc:
            message = str(exc)
            if exc.details:
                message = "%s %s" % (message, json.dumps(
                    exc.details, sort_keys=True, default=str))
            raise CommandError(message, returncode=CONFIG_ERROR_STATUS)
        except LabError as exc:
            logger.error("%s failed: %s", self.command_name, exc,
                         exc_info=True)
            raise CommandError(str(exc), returncode=RUNTIME_ERROR_STATUS)
        except (OSError, RuntimeError) as exc:
            logger.error("%s failed: %s", self.command_name, exc,
                         exc_info=True)
            raise CommandError(
                "%s: %s" % (type(exc).__name__, exc),
                returncode=RUNTIME_ERROR_STATUS)
        self.stdout.write(json.dumps(summary, sort_keys=True, default=str))

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def overrides(self, options):
        overrides = list(options.get('overrides') or [])
        for flag, key in FLAG_KEYS:
            if options.get(flag) is not None:
                overrides.append((key, options[flag]))
        return overrides

    def checkpoint_path(self, options, document=None):
        path = options.get('checkpoint')
        if path is None and document:
            path = (document.get('paths') or {}).get('checkpoint')
        if not path:
            raise ConfigError(
                "no checkpoint given: pass --checkpoint or set "
                "paths.checkpoint")
        return path

    def resolve(self, options):
        overrides = self.overrides(options)
        if not self.uses_checkpoint:
            path = options.get('config') or settings.EARLYEXIT_DEFAULT_CONFIG
            return load_run_config(path, overrides)
        document = None
        if options.get('config'):
            document = load_run_config(options['config'])
        checkpoint = self.checkpoint_path(options, document)
        options['checkpoint'] = checkpoint
        if document is None:
            # The training run's own paths do not carry over.
            document = dict(checkpoint_run_config(checkpoint), paths={})
        run_config = resolve_run_config(document, overrides)
        run_config['paths']['checkpoint'] = checkpoint
        return run_config

    def output_path(self, run_config, options):
        path = options.get('out') or run_config['paths']['out']
        if not path:
            path = default_run_path(
                '%s-seed%s' % (self.command_name, run_config['seed']))
        run_config['paths']['out'] = path
        return path

    def thresholds(self, text, run_config):
        if text is None:
            return list(run_config['eval']['thresholds'])
        try:
            thresholds = parse_float_list(text)
        except ValueError:
            raise ConfigError("--thresholds must be a comma-separated list "
                              "of numbers, got %r" % (text,))
        if not thresholds:
            raise ConfigError("--thresholds is empty")
        return thresholds

    def run(self, run_config, run_dir, **options):
        raise NotImplementedError()


EFFICIENCY_HEADER = (
    'threshold', 'avg_layers', 'depth', 'layers_ratio_reduction',
    'reduction_percent', 'flops_full', 'flops_actual')


def write_efficiency(run_dir, report, threshold):
    return run_dir.write_csv('efficiency.csv', EFFICIENCY_HEADER, [[
        threshold, report.avg_layers, report.depth,
        report.layers_ratio_reduction, report.reduction_percent,
        report.flops_full, report.flops_actual]])
