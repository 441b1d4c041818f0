from evaluation.render import render_lines
from evaluation.sweeps import TRADEOFF_HEADER, threshold_sweep
from runs.management.base import LabCommand


class Command(LabCommand):
    help = ("Sweep the exit threshold of a checkpoint and write the "
            "quality/efficiency trade-off to tradeoff.csv")
    flags = ('seed', 'dataset', 'sampler', 'steps', 'n')
    uses_checkpoint = True

    def add_lab_arguments(self, parser):
        parser.add_argument(
            '--thresholds', default=None, metavar='T1,T2,...',
            help='Comma-separated thresholds (default: eval.thresholds)')

    def run(self, run_config, run_dir, **options):
        thresholds = self.thresholds(options.get('thresholds'), run_config)
        run_config['eval']['thresholds'] = thresholds
        run_dir.write_config(run_config)
        points = threshold_sweep(
            options['checkpoint'], run_config, thresholds)
        run_dir.write_csv(
            'tradeoff.csv', TRADEOFF_HEADER, [p.row() for p in points])
        render_lines(
            {'mmd': [(p.layers_ratio_reduction, p.mmd) for p in points]},
            run_dir.path('tradeoff.png'))
        summary = {'points': [p.as_dict() for p in points]}
        run_dir.update_metrics('sweep', summary)
        return summary
