from evaluation.profiling import (
    default_t_grid, error_accumulation_curve, layer_redundancy_profile)
from evaluation.render import render_heatmap, render_lines
from evaluation.sweeps import load_for_evaluation
from sampling.policies import ExitPolicy
from training.datasets import dataset_from_config
from runs.management.base import LabCommand

REDUNDANCY_HEADER = ('t', 'layer', 'mse')
ERROR_ACCUM_HEADER = ('step', 't', 'mse')


class Command(LabCommand):
    help = ("Profile a checkpoint: per-layer distance to the final head "
            "over timesteps and the early-exit error accumulation curve")
    flags = ('seed', 'dataset', 'threshold', 'sampler', 'steps', 'n')
    uses_checkpoint = True

    def run(self, run_config, run_dir, **options):
        run_dir.write_config(run_config)
        model, sched = load_for_evaluation(options['checkpoint'], run_config)
        section = run_config['eval']
        t_grid = section['t_grid'] or default_t_grid(sched.T)
        data = dataset_from_config(run_config).data

        table = layer_redundancy_profile(
            model, data, sched, t_grid, probe_n=section['probe_n'],
            seed=section['probe_seed'])
        run_dir.write_csv('redundancy.csv', REDUNDANCY_HEADER, table.rows())
        render_heatmap(table.values.numpy(), run_dir.path('redundancy.png'))

        policy = ExitPolicy.from_run_config(run_config)
        sample = run_config['sample']
        rows = error_accumulation_curve(
            model, sched, policy, sample['n'], run_config['seed'],
            sampler=sample['sampler'], steps=sample['steps'])
        run_dir.write_csv('error_accum.csv', ERROR_ACCUM_HEADER, rows)
        render_lines(
            {'threshold %s' % policy.threshold:
                [(step, gap) for step, _, gap in rows]},
            run_dir.path('error_accum.png'))

        summary = {
            't_grid': table.t_grid,
            'threshold': policy.threshold,
            'terminal_divergence': rows[-1][2],
            'redundancy_first_layer': [
                float(value) for value in table.values[:, 0]],
        }
        run_dir.update_metrics('profile', summary)
        return summary
