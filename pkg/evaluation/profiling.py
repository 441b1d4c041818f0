""" Where the backbone's depth goes: how close every intermediate head is
to the last one, and how far an early-exit chain drifts from the
full-depth chain it shadows.
"""
import logging
from dataclasses import dataclass

import torch

from earlyexit_lab.errors import ConfigError, EmptyInput
from earlyexit_lab.utils import make_generator
from sampling.samplers import (
    ChainNoise, ancestral_step, deterministic_step, early_exit_denoise,
    strided_timesteps)
from schedule.schedules import check_timesteps, forward_diffuse

logger = logging.getLogger(__name__)


@dataclass
class RedundancyTable:
    """ values[k, i - 1]: mean squared distance between head i and head N
    at timestep t_grid[k].
    """
    t_grid: list
    values: torch.Tensor

    @property
    def depth(self):
        return self.values.shape[1]

    def rows(self):
        for k, t in enumerate(self.t_grid):
            for layer in range(1, self.depth + 1):
                yield t, layer, float(self.values[k, layer - 1])


def default_t_grid(T, count=10):
    """ `count` evenly spaced timesteps covering 1..T.
    """
    if T <= count:
        return list(range(1, T + 1))
    grid = torch.linspace(1, T, count, dtype=torch.float64).round().long()
    return sorted(set(grid.tolist()))


def probe_batch(data, probe_n, seed):
    """ A fixed draw of probe_n rows and their noise.
    """
    if len(data) == 0:
        raise EmptyInput("probe data is empty")
    generator = make_generator(seed)
    index = torch.randint(0, data.shape[0], (probe_n,), generator=generator)
    x0 = data[index]
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return x0, eps


def layer_redundancy_profile(model, data, sched, t_grid, probe_n=256,
                             seed=0):
    """ For each t in t_grid, the probe-batch mean of |g_i(L_i) - g_N(L_N)|^2
    for every layer i; the last column is zero by construction.
    """
    if not t_grid:
        raise EmptyInput("redundancy profile needs at least one timestep")
    check_timesteps(list(t_grid), sched)
    model.eval()
    x0, eps = probe_batch(data, probe_n, seed)
    dtype = model.backbone.pos_embed.dtype
    x0, eps = x0.to(dtype), eps.to(dtype)
    values = torch.zeros((len(t_grid), model.depth), dtype=torch.float64)
    for k, t in enumerate(t_grid):
        x_t = forward_diffuse(x0, int(t), eps, sched).x_t
        with torch.no_grad():
            _, trace = model.backbone.forward_collect(x_t, int(t))
        last = trace.preds[-1]
        for layer, pred in enumerate(trace.preds, start=1):
            squared = (pred - last).to(torch.float64) ** 2
            values[k, layer - 1] = squared.reshape(
                squared.shape[0], -1).sum(dim=1).mean()
    logger.info("Profiled %s layers at %s timesteps", model.depth,
                len(t_grid))
    return RedundancyTable(t_grid=[int(t) for t in t_grid], values=values)


def error_accumulation_curve(model, sched, policy, n, seed,
                             sampler='ancestral', steps=None):
    """ Runs an early-exit chain and a full-depth chain from the same x_T
    with the same injected noise. Returns (step, t, mse) rows, mse being
    the mean squared difference of the two states after each step.
    """
    model.eval()
    policy.check_depth(model.depth)
    if sampler == 'ancestral':
        ts = list(range(sched.T, 0, -1))
    elif sampler == 'deterministic':
        ts = strided_timesteps(sched.T, steps or sched.T)
    else:
        raise ConfigError("unknown sampler %r" % (sampler,))
    following = ts[1:] + [0]
    shape = tuple(model.config.input_shape)
    noise = ChainNoise(seed, 0, n)
    early = noise.draw(shape, dtype=model.backbone.pos_embed.dtype)
    full = early.clone()

    rows = []
    for step, t in enumerate(ts):
        eps_early = early_exit_denoise(early, t, model, policy).eps_hat
        with torch.no_grad():
            eps_full = model(full, t)
        if sampler == 'ancestral':
            z = noise.draw(shape, dtype=early.dtype) if t > 1 else None
            early = ancestral_step(early, eps_early, t, sched, z)
            full = ancestral_step(full, eps_full, t, sched, z)
        else:
            early = deterministic_step(
                early, eps_early, t, following[step], sched)
            full = deterministic_step(
                full, eps_full, t, following[step], sched)
        gap = float(((early - full).to(torch.float64) ** 2).mean())
        rows.append((step, t, gap))
    return rows
