from celery import Task
from celery.utils.log import get_task_logger

from earlyexit_lab.celery import app
from earlyexit_lab.utils import configure_torch
from .sweeps import evaluate_threshold, load_for_evaluation, reference_points

logger = get_task_logger(__name__)


class SweepPoint(Task):
    """ Samples and scores one exit threshold of a sweep. Arguments and
    result are plain JSON so points can run on any worker.
    """
    name = "evaluation.tasks.sweep_point"

    def run(self, checkpoint, run_config, threshold, **kwargs):
        configure_torch()
        logger.info("Sweep point threshold=%s from %s", threshold, checkpoint)
        model, sched = load_for_evaluation(checkpoint, run_config)
        reference = reference_points(run_config)
        point = evaluate_threshold(
            model, sched, run_config, threshold, reference)
        return point.as_dict()


sweep_point = app.register_task(SweepPoint())
