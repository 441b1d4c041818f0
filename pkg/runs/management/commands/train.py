from training.tasks import train_model
from runs.management.base import LabCommand


class Command(LabCommand):
    help = ("Train an early-exit denoiser: writes checkpoints, "
            "loss_curve.csv and timestep_loss.csv into the run directory")
    flags = ('seed', 'dataset')

    def add_lab_arguments(self, parser):
        parser.add_argument(
            '--resume', default=None, metavar='CHECKPOINT',
            help='Continue from a checkpoint trained under the same '
                 'architecture')

    def run(self, run_config, run_dir, **options):
        return train_model.delay(
            run_config, run_dir.root, resume=options.get('resume')).get()
