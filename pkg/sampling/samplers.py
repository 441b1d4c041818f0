""" Reverse-process samplers with uncertainty-driven early exit.

Every chain owns a private noise stream seeded from (run seed, chain index),
so a chain's trajectory does not depend on how chains are batched.
"""
import logging
from dataclasses import dataclass, field

import torch

from earlyexit_lab.errors import ConfigError, EmptyInput, NonFiniteState
from earlyexit_lab.utils import chain_seed, make_generator
from schedule.schedules import posterior_mean, posterior_variance, \
    predict_start
from uem.losses import exit_decision

logger = logging.getLogger(__name__)

SAMPLERS = ('ancestral', 'deterministic')


@dataclass
class ExitResult:
    """ One early-exit denoiser call over a batch.

    `u_at_exit` is the aggregated uncertainty of the head a row left
    through; rows that ran to full depth report layer N - 1. `u_map` holds
    the matching per-token maps.
    """
    eps_hat: torch.Tensor
    exit_layer: torch.Tensor
    u_at_exit: torch.Tensor
    u_map: torch.Tensor


@dataclass
class SampleRun:
    samples: torch.Tensor
    layers_used: torch.Tensor
    u_traces: torch.Tensor
    ts: list
    sampler: str
    policy: object
    seed: int
    depth: int
    maps: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def steps(self):
        return len(self.ts)

    @property
    def average_layers(self):
        if self.layers_used.numel() == 0:
            raise EmptyInput("sample run has no traces")
        return float(self.layers_used.double().mean())

    def trace_rows(self):
        """ (sample, step, t, exit_layer, u_at_exit), chain-major.
        """
        for sample in range(self.n):
            for step, t in enumerate(self.ts):
                yield (sample, step, t,
                       int(self.layers_used[sample, step]),
                       float(self.u_traces[sample, step]))


class ChainNoise(object):
    """ The private Gaussian streams of a block of chains. Draw order is
    x_T first, then one draw per injected-noise step.
    """

    def __init__(self, seed, first, count):
        self.generators = [
            make_generator(chain_seed(seed, index))
            for index in range(first, first + count)]

    def draw(self, shape, dtype=torch.float32):
        return torch.stack([
            torch.randn(shape, generator=generator, dtype=dtype)
            for generator in self.generators])


def early_exit_denoise(x_t, t, model, policy):
    """ Noise prediction that leaves the backbone at the first layer whose
    uncertainty falls under policy.threshold. Heads above a row's exit
    layer are never evaluated.
    """
    batch = x_t.shape[0]
    depth = model.depth
    policy.check_depth(depth)
    running = [torch.arange(batch)]
    u_at_exit = torch.zeros(batch, dtype=x_t.dtype)
    u_map = torch.zeros(
        (batch, model.config.num_tokens), dtype=x_t.dtype)

    def stop_fn(layer, hidden, t_rows):
        rows = running[0]
        if policy.never_exits and layer < depth - 1:
            return False
        record = model.layer_uncertainty(
            layer, hidden, t_rows, aggregation=policy.aggregation)
        u_at_exit[rows] = record.u_scalar.to(u_at_exit.dtype)
        u_map[rows] = record.u_map.to(u_map.dtype)
        if policy.never_exits:
            return False
        stop = exit_decision(record, policy)
        running[0] = rows[~stop]
        return stop

    with torch.no_grad():
        eps_hat, trace = model.backbone.forward_incremental(
            x_t, t, stop_fn=stop_fn, keep_trace=False)
    return ExitResult(
        eps_hat=eps_hat, exit_layer=trace.exit_layer,
        u_at_exit=u_at_exit, u_map=u_map)


def strided_timesteps(T, steps):
    """ `steps` timesteps from T down to 1 at a uniform stride, rounding
    toward larger t. Both ends are always included.
    """
    if not 1 <= steps <= T:
        raise ConfigError(
            "deterministic sampler needs 1 <= steps <= T (T=%s), got %s" % (
                T, steps))
    if steps == 1:
        return [T]
    span = T - 1
    ascending = [1 + -(-(i * span) // (steps - 1)) for i in range(steps)]
    return ascending[::-1]


def ancestral_step(x, eps_hat, t, sched, z=None):
    """ x_{t-1} = mu(x_t, eps_hat) + sqrt(beta_tilde_t) z; z is ignored at
    t = 1.
    """
    with torch.no_grad():
        mean = posterior_mean(x, eps_hat, t, sched)
    if t == 1:
        return mean
    return mean + posterior_variance(t, sched) ** 0.5 * z


def deterministic_step(x, eps_hat, t, target, sched):
    """ Moves x_t to x_target along the noise-free path through the
    predicted x0.
    """
    with torch.no_grad():
        x0 = predict_start(x, eps_hat, t, sched)
    signal = float(sched.signal_coefs[target])
    sigma = float(sched.noise_coefs[target])
    return signal * x0 + sigma * eps_hat


def _check_finite(x, step, t):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteState(step, t)


def _map_steps(total, map_steps):
    if map_steps is None:
        return []
    if not map_steps:
        return sorted(set([0, total // 2, total - 1]))
    return sorted(set(int(step) for step in map_steps))


def _run_chains(sampler, model, sched, policy, n, seed, ts, update,
                map_steps, batch_size):
    if n < 1:
        raise ConfigError("need at least one sample, got %s" % n)
    model.eval()
    policy.check_depth(model.depth)
    shape = tuple(model.config.input_shape)
    dtype = model.backbone.pos_embed.dtype
    steps = len(ts)
    recorded = _map_steps(steps, map_steps)
    batch_size = batch_size or n

    samples, layers, traces = [], [], []
    maps = dict((step, []) for step in recorded)
    for first in range(0, n, batch_size):
        count = min(batch_size, n - first)
        noise = ChainNoise(seed, first, count)
        x = noise.draw(shape, dtype=dtype)
        used = torch.zeros((count, steps), dtype=torch.long)
        u_trace = torch.zeros((count, steps), dtype=torch.float64)
        for step, t in enumerate(ts):
            result = early_exit_denoise(x, t, model, policy)
            used[:, step] = result.exit_layer
            u_trace[:, step] = result.u_at_exit.to(torch.float64)
            if step in maps:
                maps[step].append(result.u_map)
            x = update(x, result.eps_hat, step, t, noise)
            _check_finite(x, step, t)
        samples.append(x)
        layers.append(used)
        traces.append(u_trace)

    return SampleRun(
        samples=torch.cat(samples),
        layers_used=torch.cat(layers),
        u_traces=torch.cat(traces),
        ts=list(ts),
        sampler=sampler,
        policy=policy,
        seed=seed,
        depth=model.depth,
        maps=dict((step, torch.cat(parts)) for step, parts in maps.items()),
    )


def ancestral_sample(model, sched, policy, n, seed, map_steps=None,
                     batch_size=None):
    """ T-step ancestral sampling: x_{t-1} = mu(x_t, eps_hat) +
    sqrt(beta_tilde_t) z, with z = 0 at t = 1.

    :param map_steps: chain step indices whose uncertainty maps are kept;
        an empty list means first, middle and last, None keeps none.
    """
    ts = list(range(sched.T, 0, -1))

    def update(x, eps_hat, step, t, noise):
        z = None
        if t > 1:
            z = noise.draw(x.shape[1:], dtype=x.dtype)
        return ancestral_step(x, eps_hat, t, sched, z)

    run = _run_chains(
        'ancestral', model, sched, policy, n, seed, ts, update, map_steps,
        batch_size)
    _log_run(run)
    return run


def deterministic_sample(model, sched, policy, n, steps, seed,
                         map_steps=None, batch_size=None):
    """ Noise-free strided sampling: predict x0 from eps_hat, then re-noise
    it deterministically to the next timestep of the stride.
    """
    ts = strided_timesteps(sched.T, steps)
    following = ts[1:] + [0]

    def update(x, eps_hat, step, t, noise):
        return deterministic_step(x, eps_hat, t, following[step], sched)

    run = _run_chains(
        'deterministic', model, sched, policy, n, seed, ts, update,
        map_steps, batch_size)
    _log_run(run)
    return run


def sample(model, sched, policy, n, seed, sampler='ancestral', steps=None,
           map_steps=None, batch_size=None):
    if sampler == 'ancestral':
        return ancestral_sample(
            model, sched, policy, n, seed, map_steps=map_steps,
            batch_size=batch_size)
    if sampler == 'deterministic':
        return deterministic_sample(
            model, sched, policy, n, steps or sched.T, seed,
            map_steps=map_steps, batch_size=batch_size)
    raise ConfigError("unknown sampler %r, expected one of %s" % (
        sampler, ", ".join(SAMPLERS)))


def sample_from_config(model, sched, run_config, policy, map_steps=None):
    section = run_config['sample']
    if map_steps is None:
        map_steps = section['map_steps']
    return sample(
        model, sched, policy, section['n'], run_config['seed'],
        sampler=section['sampler'], steps=section['steps'],
        map_steps=map_steps)


def uncertainty_trend(run, fraction=0.1):
    """ Mean exit uncertainty over the first and last `fraction` of the
    chain's steps.
    """
    if run.u_traces.numel() == 0:
        raise EmptyInput("sample run has no traces")
    width = max(1, int(round(fraction * run.steps)))
    return {
        'u_first': float(run.u_traces[:, :width].mean()),
        'u_last': float(run.u_traces[:, -width:].mean()),
    }


def _log_run(run):
    logger.info(
        "%s sampler: n=%s steps=%s threshold=%s average layers %.3f of %s",
        run.sampler, run.n, run.steps, run.policy.threshold,
        run.average_layers, run.depth)
