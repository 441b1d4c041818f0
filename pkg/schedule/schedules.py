""" Variance-preserving diffusion process: noise schedule tables, closed-form
forward noising and the reverse-step posterior statistics.

All tables are float64 and indexed directly by timestep. Index 0 holds the
alpha_bar_0 = 1 convention (beta_0 = 0) so that t - 1 lookups never need a
special case; valid timesteps are 1..T.
"""
from dataclasses import dataclass

import torch

from earlyexit_lab.errors import (
    ConfigError, DegenerateStep, ShapeMismatch, TimestepOutOfRange)


@dataclass(frozen=True)
class NoiseSchedule:
    """ Immutable schedule tables.

    Two coefficient families are kept apart on purpose: `alphas`/`betas`
    are the per-step transition terms, `signal_coefs`/`noise_coefs` are
    the closed-form coefficients of x_0 and eps in x_t.
    """
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    signal_coefs: torch.Tensor
    noise_coefs: torch.Tensor
    posterior_vars: torch.Tensor

    @classmethod
    def from_betas(cls, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ConfigError("A schedule needs at least one step")
        if bool(((betas < 0) | (betas >= 1)).any()):
            raise ConfigError("Every beta must lie in [0, 1)")
        betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        previous = torch.cat([alpha_bars[:1], alpha_bars[:-1]])
        # beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, zero while
        # no noise has been added yet
        denominator = 1.0 - alpha_bars
        safe = torch.where(denominator > 0, denominator,
                           torch.ones_like(denominator))
        posterior_vars = torch.where(
            denominator > 0, (1.0 - previous) / safe * betas,
            torch.zeros_like(betas))
        return cls(
            T=int(betas.numel() - 1),
            betas=betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            signal_coefs=alpha_bars.sqrt(),
            noise_coefs=(1.0 - alpha_bars).sqrt(),
            posterior_vars=posterior_vars,
        )


@dataclass(frozen=True)
class NoisySample:
    x_t: torch.Tensor
    t: object
    eps: torch.Tensor


def build_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """ Betas linearly interpolated from beta_start to beta_end inclusive.
    """
    if int(T) != T or T < 1:
        raise ConfigError("T must be an integer >= 1, got %r" % (T,))
    if not (0 <= beta_start <= beta_end < 1):
        raise ConfigError(
            "Need 0 <= beta_start <= beta_end < 1, got (%r, %r)" % (
                beta_start, beta_end))
    betas = torch.linspace(
        beta_start, beta_end, int(T), dtype=torch.float64)
    return NoiseSchedule.from_betas(betas)


def check_timesteps(t, sched):
    """ Returns t as a 1-D long tensor after checking every entry is in
    [1, T]. Accepts an int or a tensor of per-sample timesteps.
    """
    steps = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if steps.numel() == 0:
        raise TimestepOutOfRange("No timestep given")
    if bool(((steps < 1) | (steps > sched.T)).any()):
        raise TimestepOutOfRange(
            "Timestep outside [1, %d]: %s" % (sched.T, steps.tolist()[:8]))
    return steps


def broadcast(values, like):
    """ Shapes per-step values to broadcast against `like`, whose leading
    dimension is the batch. A single value becomes a scalar.
    """
    values = values.to(dtype=like.dtype, device=like.device)
    if values.numel() == 1:
        return values.reshape(())
    return values.reshape((-1,) + (1,) * (like.dim() - 1))


def extract(table, t, like):
    """ Gathers table[t] shaped to broadcast against `like`.
    """
    return broadcast(table[t], like)


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch("%s shapes differ: %s vs %s" % (
            what, tuple(a.shape), tuple(b.shape)))


def forward_diffuse(x0, t, eps, sched):
    """ x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
    """
    _check_shapes(x0, eps, "x0 and eps")
    steps = check_timesteps(t, sched)
    x_t = (extract(sched.signal_coefs, steps, x0) * x0 +
           extract(sched.noise_coefs, steps, x0) * eps)
    return NoisySample(x_t=x_t, t=t, eps=eps)


def posterior_mean(x_t, eps_hat, t, sched):
    """ Mean of p(x_{t-1} | x_t) given the predicted noise:
    (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t).
    """
    _check_shapes(x_t, eps_hat, "x_t and eps_hat")
    steps = check_timesteps(t, sched)
    noiseless = sched.alpha_bars[steps] >= 1.0
    if bool(noiseless.any()):
        if steps.numel() > 1:
            offending = eps_hat.reshape(eps_hat.shape[0], -1)[noiseless]
        else:
            offending = eps_hat
        if bool((offending != 0).any()):
            raise DegenerateStep(
                "alpha_bar_t = 1 with a nonzero noise prediction at t=%s" % (
                    steps[noiseless].tolist()[:8],))
    betas = sched.betas[steps]
    denominators = sched.noise_coefs[steps]
    ones = torch.ones_like(denominators)
    coefs = torch.where(
        denominators > 0,
        betas / torch.where(denominators > 0, denominators, ones),
        torch.zeros_like(betas))
    scale = 1.0 / sched.alphas[steps].sqrt()
    return broadcast(scale, x_t) * (x_t - broadcast(coefs, x_t) * eps_hat)


def posterior_variance(t, sched):
    """ beta_tilde_t, with the abar_0 = 1 convention making t = 1 exact zero.
    Returns a float for scalar t and a float64 tensor otherwise.
    """
    steps = check_timesteps(t, sched)
    values = sched.posterior_vars[steps]
    if isinstance(t, int) or (torch.is_tensor(t) and t.dim() == 0):
        return float(values[0])
    return values


def predict_start(x_t, eps_hat, t, sched):
    """ Inverts the closed form for x_0: (x_t - sqrt(1 - abar_t) eps) /
    sqrt(abar_t).
    """
    _check_shapes(x_t, eps_hat, "x_t and eps_hat")
    steps = check_timesteps(t, sched)
    return ((x_t - extract(sched.noise_coefs, steps, x_t) * eps_hat) /
            extract(sched.signal_coefs, steps, x_t))


def schedule_from_config(run_config):
    section = run_config['schedule']
    return build_linear_schedule(
        section['T'], section['beta_start'], section['beta_end'])
