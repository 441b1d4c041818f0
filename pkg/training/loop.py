import logging

import torch

from earlyexit_lab.errors import ConfigError, EmptyInput
from earlyexit_lab.utils import make_generator
from schedule.schedules import forward_diffuse
from uem.losses import LAYERWISE_MODES, LossWeights, joint_objective
from .datasets import sample_timesteps

logger = logging.getLogger(__name__)


class TimestepLossHistogram(object):
    """ Running mean of the per-sample simple loss, one bucket per
    timestep 1..T.
    """

    def __init__(self, T):
        self.T = T
        self.sums = torch.zeros(T + 1, dtype=torch.float64)
        self.counts = torch.zeros(T + 1, dtype=torch.int64)

    def update(self, t, losses):
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        losses = torch.as_tensor(losses).detach().reshape(-1).to(
            torch.float64)
        self.sums.index_add_(0, t, losses)
        self.counts.index_add_(0, t, torch.ones_like(t))

    def means(self):
        """ Per-timestep means for t = 1..T; empty buckets are nan.
        """
        counts = self.counts[1:]
        means = self.sums[1:] / counts.clamp(min=1).to(torch.float64)
        return torch.where(
            counts > 0, means, torch.full_like(means, float('nan')))

    def band_means(self, lo, hi):
        """ Mean loss over every sample drawn with lo <= t <= hi.
        """
        lo, hi = max(int(lo), 1), min(int(hi), self.T)
        count = int(self.counts[lo:hi + 1].sum())
        if count == 0:
            raise EmptyInput("no samples with t in [%s, %s]" % (lo, hi))
        return float(self.sums[lo:hi + 1].sum()) / count

    def rows(self):
        means = self.means()
        for t in range(1, self.T + 1):
            yield t, int(self.counts[t]), float(means[t - 1])

    def state(self):
        return {'histogram/sums': self.sums, 'histogram/counts': self.counts}

    def load_state(self, tensors):
        self.sums = tensors['histogram/sums'].clone()
        self.counts = tensors['histogram/counts'].clone()


class Trainer(object):
    """ Joint training of an EarlyExitDenoiser: one full-depth pass per
    batch, every loss term, one AdamW update.

    All randomness (batch indices, timesteps, noise) comes from one seeded
    generator, so equal seeds give equal trajectories.
    """

    def __init__(self, model, sched, weights=None, layerwise='ual',
                 learning_rate=2e-4, betas=(0.99, 0.99), weight_decay=0.03,
                 batch_size=64, seed=0):
        if layerwise not in LAYERWISE_MODES:
            raise ConfigError("unknown layer-wise loss %r" % (layerwise,))
        if learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.model = model
        self.sched = sched
        self.weights = weights or LossWeights()
        self.layerwise = layerwise
        self.batch_size = batch_size
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=learning_rate, betas=tuple(betas),
            eps=1e-8, weight_decay=weight_decay)
        self.generator = make_generator(seed)
        self.histogram = TimestepLossHistogram(sched.T)
        self.step = 0

    @classmethod
    def from_run_config(cls, run_config, model, sched):
        train = run_config['train']
        loss = run_config['loss']
        return cls(
            model, sched,
            weights=LossWeights(
                lambda_u=loss['lambda_u'], beta_ual=loss['beta_ual']),
            layerwise=loss['layerwise'],
            learning_rate=train['learning_rate'],
            betas=(train['adam_beta1'], train['adam_beta2']),
            weight_decay=train['weight_decay'],
            batch_size=train['batch_size'],
            seed=run_config['seed'],
        )

    def next_batch(self, data):
        if len(data) == 0:
            raise EmptyInput("training data is empty")
        indices = torch.randint(
            0, data.shape[0], (self.batch_size,), generator=self.generator)
        return data[indices]

    def train_step(self, batch):
        """ One update on x0 = batch. Returns the LossComponents; a
        non-finite component raises NonFiniteLoss before any parameter
        moves.
        """
        self.model.train()
        t = sample_timesteps(batch.shape[0], self.sched.T, self.generator)
        eps = torch.randn(
            batch.shape, generator=self.generator, dtype=batch.dtype)
        x_t = forward_diffuse(batch, t, eps, self.sched).x_t
        parts = joint_objective(
            self.model, x_t, t, eps, weights=self.weights,
            layerwise=self.layerwise)
        self.optimizer.zero_grad(set_to_none=True)
        parts.total.backward()
        self.optimizer.step()
        self.histogram.update(t, parts.per_sample)
        self.step += 1
        return parts

    def fit(self, data, steps, callback=None, log_every=100):
        """ Runs `steps` updates on minibatches drawn from data; callback,
        if given, sees (step, LossComponents) after each one.
        """
        for _ in range(steps):
            parts = self.train_step(self.next_batch(data))
            if log_every and self.step % log_every == 0:
                logger.info(
                    "step %s: simple=%.5f uncertainty=%.5f layerwise=%.5f "
                    "total=%.5f", self.step, float(parts.simple),
                    float(parts.uncertainty), float(parts.layerwise),
                    float(parts.total))
            if callback is not None:
                callback(self.step, parts)
        return self.step

    def resume(self, checkpoint):
        """ Continues from a loaded checkpoint: optimizer moments, the
        random stream, the histogram and the step counter.
        """
        self.optimizer.load_state_dict(checkpoint.optimizer_state)
        self.generator.set_state(checkpoint.generator_state)
        self.histogram.load_state(checkpoint.tensors)
        self.step = checkpoint.step
