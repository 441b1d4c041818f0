import os

from evaluation.metrics import layer_usage_report
from evaluation.sweeps import load_for_evaluation
from sampling.exports import (
    export_uncertainty_maps, write_samples, write_traces)
from sampling.policies import ExitPolicy
from sampling.samplers import sample_from_config, uncertainty_trend
from runs.management.base import LabCommand, write_efficiency


class Command(LabCommand):
    help = ("Generate samples from a checkpoint under an exit policy: "
            "samples.eex, traces.csv, efficiency.csv and uncertainty maps")
    flags = ('seed', 'threshold', 'sampler', 'steps', 'n')
    uses_checkpoint = True

    def run(self, run_config, run_dir, **options):
        run_dir.write_config(run_config)
        model, sched = load_for_evaluation(options['checkpoint'], run_config)
        policy = ExitPolicy.from_run_config(run_config)
        run = sample_from_config(model, sched, run_config, policy)

        write_samples(run, run_dir.path('samples.eex'))
        write_traces(run, run_dir)
        report = layer_usage_report(run, model.depth, model.config)
        write_efficiency(run_dir, report, policy.threshold)
        export_uncertainty_maps(
            run, sorted(run.maps), run_dir.subdir('maps'),
            model.config.token_grid)

        summary = dict(report.as_dict(), threshold=policy.threshold,
                       sampler=run.sampler, steps=run.steps, n=run.n)
        summary.update(uncertainty_trend(run))
        run_dir.update_metrics('sample', summary)
        summary['out'] = run_dir.root
        summary['maps'] = os.path.join(run_dir.root, 'maps')
        return summary
