import math
from dataclasses import dataclass

from earlyexit_lab.errors import ConfigError
from uem.models import AGGREGATIONS


@dataclass(frozen=True)
class ExitPolicy:
    """ When to leave the backbone: the first layer at or past min_layer
    whose aggregated uncertainty is under threshold. A threshold of 0 never
    fires, so the full model runs.
    """
    threshold: float = 0.0
    aggregation: str = 'mean'
    min_layer: int = 1

    def __post_init__(self):
        if not math.isfinite(self.threshold) or self.threshold < 0:
            raise ConfigError(
                "exit threshold must be a finite value >= 0, got %r" % (
                    self.threshold,))
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(
                "unknown aggregation %r" % (self.aggregation,))
        if self.min_layer < 1:
            raise ConfigError(
                "min_layer must be >= 1, got %s" % self.min_layer)

    @property
    def never_exits(self):
        return self.threshold == 0

    def check_depth(self, depth):
        if self.min_layer > depth:
            raise ConfigError(
                "min_layer %s exceeds model depth %s" % (
                    self.min_layer, depth))
        return self

    def with_threshold(self, threshold):
        return ExitPolicy(
            threshold=threshold, aggregation=self.aggregation,
            min_layer=self.min_layer)

    @classmethod
    def from_run_config(cls, run_config):
        return cls(
            threshold=run_config['exit']['threshold'],
            aggregation=run_config['uem']['aggregation'],
            min_layer=run_config['exit']['min_layer'],
        )
