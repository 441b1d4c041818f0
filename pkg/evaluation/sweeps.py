""" Quality against depth: sample under an exit policy, score the samples
against held-out reference data and account for the layers used.
"""
import logging
from dataclasses import asdict, dataclass

from earlyexit_lab.errors import ConfigError
from sampling.policies import ExitPolicy
from sampling.samplers import sample_from_config
from schedule.schedules import schedule_from_config
from training.checkpoints import load_checkpoint
from training.datasets import dataset_from_config
from .metrics import layer_usage_report, quality_scores

logger = logging.getLogger(__name__)

TRADEOFF_HEADER = (
    'threshold', 'mmd', 'frechet', 'avg_layers', 'layers_ratio_reduction',
    'flops_actual')


@dataclass
class TradeoffPoint:
    threshold: float
    mmd: float
    frechet: float
    avg_layers: float
    layers_ratio_reduction: float
    flops_actual: float

    def row(self):
        return [getattr(self, name) for name in TRADEOFF_HEADER]

    def as_dict(self):
        return asdict(self)


def reference_points(run_config):
    """ The held-out reference draw expressed in the training set's
    standardised coordinates, where the model samples.
    """
    train = dataset_from_config(run_config)
    reference = dataset_from_config(run_config, reference=True)
    return (reference.restore(reference.data) - train.mean) / train.std


def load_for_evaluation(checkpoint, run_config):
    """ (model, schedule) from a checkpoint that must match run_config's
    architecture.
    """
    loaded = load_checkpoint(checkpoint, expected_config=run_config)
    return loaded.model, schedule_from_config(run_config)


def evaluate_policy(model, sched, run_config, policy, reference,
                    map_steps=None):
    """ One generation under `policy`. Returns (run, efficiency report,
    quality scores).
    """
    run = sample_from_config(
        model, sched, run_config, policy, map_steps=map_steps)
    report = layer_usage_report(run, model.depth, model.config)
    scores = quality_scores(
        run.samples, reference, run_config['eval']['bandwidths'])
    return run, report, scores


def evaluate_threshold(model, sched, run_config, threshold, reference):
    policy = ExitPolicy.from_run_config(run_config).with_threshold(threshold)
    _, report, scores = evaluate_policy(
        model, sched, run_config, policy, reference)
    point = TradeoffPoint(
        threshold=float(threshold),
        mmd=scores['mmd'],
        frechet=scores['frechet'],
        avg_layers=report.avg_layers,
        layers_ratio_reduction=report.layers_ratio_reduction,
        flops_actual=report.flops_actual,
    )
    logger.info(
        "threshold %s: mmd=%.5f avg layers %.3f", threshold, point.mmd,
        point.avg_layers)
    return point


def threshold_sweep(checkpoint, run_config, thresholds):
    """ One sweep point per threshold, each dispatched as its own task with
    the run's seed, in the order given.
    """
    from .tasks import sweep_point

    thresholds = [float(value) for value in thresholds]
    if not thresholds:
        raise ConfigError("threshold sweep needs at least one threshold")
    for value in thresholds:
        ExitPolicy(threshold=value)
    results = [
        sweep_point.apply_async(kwargs={
            'checkpoint': checkpoint,
            'run_config': run_config,
            'threshold': value,
        })
        for value in thresholds]
    return [TradeoffPoint(**result.get()) for result in results]
