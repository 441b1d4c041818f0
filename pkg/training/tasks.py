import torch
from celery import Task
from celery.utils.log import get_task_logger

from earlyexit_lab.celery import app
from earlyexit_lab.errors import ConfigError, EmptyInput
from earlyexit_lab.utils import configure_torch
from runs.artifacts import RunDirectory
from schedule.schedules import schedule_from_config
from uem.models import EarlyExitDenoiser
from .checkpoints import load_checkpoint, save_checkpoint
from .datasets import dataset_from_config
from .loop import Trainer

logger = get_task_logger(__name__)

LOSS_CURVE_HEADER = (
    'step', 'loss_simple', 'loss_uncertainty', 'loss_layerwise',
    'loss_total')
TIMESTEP_LOSS_HEADER = ('t', 'count', 'mean_loss')


class TrainModel(Task):
    """ Trains an early-exit denoiser from a resolved run config into a run
    directory: loss_curve.csv, timestep_loss.csv, periodic and final
    checkpoints and a training section in metrics.json.
    """
    name = "training.tasks.train_model"

    def build(self, run_config):
        sched = schedule_from_config(run_config)
        dataset = dataset_from_config(run_config)
        torch.manual_seed(run_config['seed'])
        model = EarlyExitDenoiser.from_run_config(
            run_config, dataset.input_shape)
        trainer = Trainer.from_run_config(run_config, model, sched)
        return sched, dataset, model, trainer

    def save(self, run, trainer, run_config, step=None):
        return save_checkpoint(
            run.checkpoint_path(step), trainer.model, run_config,
            trainer.step, optimizer=trainer.optimizer,
            generator=trainer.generator, histogram=trainer.histogram)

    def summarise(self, trainer, sched):
        T = sched.T
        summary = {'steps': trainer.step}
        bands = (
            ('loss_band_high_t', max(1, int(0.8 * T)), T),
            ('loss_band_low_t', 1, max(1, int(0.2 * T))),
        )
        for name, lo, hi in bands:
            try:
                summary[name] = trainer.histogram.band_means(lo, hi)
            except EmptyInput:
                summary[name] = None
        return summary

    def run(self, run_config, out_dir, resume=None, **kwargs):
        """ Returns a summary dict with the final checkpoint path and the
        mean training loss over t in [0.8T, T] and [1, 0.2T].
        """
        configure_torch()
        run = RunDirectory(out_dir)
        run.write_config(run_config)
        sched, dataset, model, trainer = self.build(run_config)
        train = run_config['train']

        if resume:
            checkpoint = load_checkpoint(resume, expected_config=run_config)
            model.load_state_dict(checkpoint.model.state_dict())
            trainer.resume(checkpoint)
            logger.info("Resuming from %s at step %s", resume, trainer.step)
            if trainer.step >= train['total_steps']:
                raise ConfigError(
                    "checkpoint is already at step %s of %s" % (
                        trainer.step, train['total_steps']),
                    details={'train.total_steps': train['total_steps']})
            # Rows logged after the checkpoint are about to be rewritten.
            run.trim_csv(
                'loss_curve.csv',
                lambda row: int(row['step']) <= trainer.step)

        logger.info(
            "Training %s-layer model on %s (%s points) for %s steps",
            model.depth, dataset.kind, len(dataset), train['total_steps'])
        every = train['checkpoint_every']
        with run.csv_log('loss_curve.csv', LOSS_CURVE_HEADER) as curve:
            def record(step, parts):
                values = parts.as_floats()
                curve.append([step] + [
                    values[key] for key in LOSS_CURVE_HEADER[1:]])
                if every and step % every == 0 and \
                        step < train['total_steps']:
                    curve.flush()
                    self.save(run, trainer, run_config, step)

            trainer.fit(
                dataset.data, train['total_steps'] - trainer.step,
                callback=record, log_every=train['log_every'])

        run.write_csv(
            'timestep_loss.csv', TIMESTEP_LOSS_HEADER,
            trainer.histogram.rows())
        final = self.save(run, trainer, run_config)
        summary = self.summarise(trainer, sched)
        summary['checkpoint'] = final
        run.update_metrics('train', summary)
        logger.info("Training finished at step %s", trainer.step)
        return summary


train_model = app.register_task(TrainModel())
