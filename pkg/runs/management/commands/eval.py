from evaluation.metrics import layer_usage_report, quality_scores
from evaluation.sweeps import load_for_evaluation, reference_points
from sampling.exports import read_samples
from sampling.policies import ExitPolicy
from sampling.samplers import sample_from_config, uncertainty_trend
from runs.management.base import LabCommand, write_efficiency


class Command(LabCommand):
    help = ("Score a checkpoint: layers used, FLOPs, MMD and Frechet "
            "distance against held-out reference data")
    flags = ('seed', 'dataset', 'threshold', 'sampler', 'steps', 'n')
    uses_checkpoint = True

    def add_lab_arguments(self, parser):
        parser.add_argument(
            '--samples', default=None,
            help='Score an existing samples.eex instead of sampling anew')

    def run(self, run_config, run_dir, **options):
        run_dir.write_config(run_config)
        model, sched = load_for_evaluation(options['checkpoint'], run_config)
        reference = reference_points(run_config)
        if options.get('samples'):
            run = read_samples(options['samples'])
            policy = run.policy
        else:
            policy = ExitPolicy.from_run_config(run_config)
            run = sample_from_config(
                model, sched, run_config, policy, map_steps=None)

        report = layer_usage_report(run, model.depth, model.config)
        write_efficiency(run_dir, report, policy.threshold)
        summary = dict(report.as_dict(), threshold=policy.threshold,
                       sampler=run.sampler, n=run.n)
        summary.update(quality_scores(
            run.samples, reference, run_config['eval']['bandwidths']))
        summary.update(uncertainty_trend(run))
        run_dir.update_metrics('eval', summary)
        return summary
