""" Training targets and losses: pseudo uncertainty, the simple loss, the
uncertainty loss, plain and uncertainty-aware layer-wise losses and the
joint objective. Plus the inference-time exit rule.

Token-level quantities are pooled per patch (or per sample in vector mode)
so u, its target and the layer-wise weights all share one shape.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from backbone.models import patchify
from earlyexit_lab.errors import ConfigError, NonFiniteLoss, ShapeMismatch

LAYERWISE_MODES = ('ual', 'plain', 'none')


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 1.0
    beta_ual: float = 1.0

    def __post_init__(self):
        if self.lambda_u < 0 or self.beta_ual < 0:
            raise ConfigError("loss weights must be nonnegative")


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch("shapes differ: %s vs %s" % (
            tuple(a.shape), tuple(b.shape)))


def _check_count(preds, depth):
    if len(preds) != depth - 1:
        raise ShapeMismatch(
            "expected %s intermediate predictions for depth %s, got %s" % (
                depth - 1, depth, len(preds)))


def token_mean(values, patch_size=1):
    """ Averages a data-space tensor over each token's patch: (B, tokens).
    """
    return patchify(values, patch_size).mean(dim=-1)


def _u_map(record):
    return record.u_map if hasattr(record, 'u_map') else record


def pseudo_uncertainty(pred, eps, patch_size=1):
    """ u_hat = tanh(per-token mean |pred - eps|), always in [0, 1).
    Returned detached: it is a target, never a gradient path.
    """
    _check_shapes(pred, eps)
    with torch.no_grad():
        target = torch.tanh(token_mean((pred - eps).abs(), patch_size))
        # tanh rounds to exactly 1 for large errors.
        return target.clamp(max=1.0 - torch.finfo(target.dtype).eps)


def loss_simple(eps_hat, eps):
    _check_shapes(eps_hat, eps)
    return F.mse_loss(eps_hat, eps)


def loss_uncertainty(u_all, targets):
    """ Sum over layers of the token-mean squared error between estimated
    and pseudo uncertainty.
    """
    if len(u_all) != len(targets):
        raise ShapeMismatch("%s uncertainty records for %s targets" % (
            len(u_all), len(targets)))
    total = None
    for record, target in zip(u_all, targets):
        u_map = _u_map(record)
        _check_shapes(u_map, target)
        term = ((u_map - target.detach()) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        raise ShapeMismatch("no layers to compare")
    return total


def loss_layerwise_plain(preds, eps, depth):
    """ Sum over the N - 1 intermediate heads of their mean squared error.
    """
    _check_count(preds, depth)
    total = None
    for pred in preds:
        _check_shapes(pred, eps)
        term = F.mse_loss(pred, eps)
        total = term if total is None else total + term
    return total


def loss_ual(preds, eps, u_all, depth, patch_size=1):
    """ Layer-wise loss with every token's squared error weighted by
    (1 - u). The weights are constants: u is anchored by the uncertainty
    loss alone.
    """
    _check_count(preds, depth)
    if len(u_all) != len(preds):
        raise ShapeMismatch("%s uncertainty records for %s predictions" % (
            len(u_all), len(preds)))
    total = None
    for pred, record in zip(preds, u_all):
        _check_shapes(pred, eps)
        errors = token_mean((pred - eps) ** 2, patch_size)
        weights = 1.0 - _u_map(record).detach()
        _check_shapes(weights, errors)
        term = (weights * errors).mean()
        total = term if total is None else total + term
    return total


def loss_joint(simple, uncertainty, layerwise, weights=None):
    """ L_all = simple + lambda * L_u + beta * L_layerwise.
    """
    weights = weights or LossWeights()
    for name, value in (('simple', simple), ('uncertainty', uncertainty),
                        ('layerwise', layerwise)):
        scalar = float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLoss(name, scalar)
    return simple + weights.lambda_u * uncertainty + \
        weights.beta_ual * layerwise


def exit_decision(record, policy):
    """ True per row when the aggregated uncertainty is under the threshold
    and the layer is at or past the policy's minimum depth.
    """
    below = record.u_scalar < policy.threshold
    if record.layer_index < policy.min_layer:
        return torch.zeros_like(below)
    return below


@dataclass
class LossComponents:
    """ One evaluation of the joint objective.

    `targets` are the detached pseudo uncertainties and `confidences` the
    detached u maps behind the (1 - u) weights; passing both back as
    `frozen` pins them.
    """
    simple: torch.Tensor
    uncertainty: torch.Tensor
    layerwise: torch.Tensor
    total: torch.Tensor
    per_sample: torch.Tensor
    targets: list
    confidences: list

    def as_floats(self):
        return {
            'loss_simple': float(self.simple),
            'loss_uncertainty': float(self.uncertainty),
            'loss_layerwise': float(self.layerwise),
            'loss_total': float(self.total),
        }


def joint_objective(model, x_t, t, eps, weights=None, layerwise='ual',
                    frozen=None):
    """ Runs one full-depth pass of an EarlyExitDenoiser and evaluates every
    loss term on it.

    :param layerwise: 'ual', 'plain' or 'none'.
    :param frozen: optional (targets, confidences) to use instead of the
        ones computed from this pass.
    """
    if layerwise not in LAYERWISE_MODES:
        raise ConfigError("unknown layer-wise loss %r" % (layerwise,))
    depth = model.depth
    patch_size = model.config.patch_size
    eps_hat, trace, records = model.collect(x_t, t)
    intermediate = trace.preds[:-1]

    simple = loss_simple(eps_hat, eps)
    if model.backbone.final_layer is not None:
        # g_N is not the output projection; supervise it directly.
        simple = simple + loss_simple(trace.preds[-1], eps)

    if frozen is None:
        targets = [
            pseudo_uncertainty(pred, eps, patch_size)
            for pred in intermediate]
        confidences = [record.u_map.detach() for record in records]
    else:
        targets, confidences = frozen

    uncertainty = loss_uncertainty(records, targets)
    if layerwise == 'ual':
        layer_term = loss_ual(
            intermediate, eps, confidences, depth, patch_size)
    elif layerwise == 'plain':
        layer_term = loss_layerwise_plain(intermediate, eps, depth)
    else:
        layer_term = torch.zeros((), dtype=eps_hat.dtype)
    total = loss_joint(simple, uncertainty, layer_term, weights)

    with torch.no_grad():
        per_sample = ((eps_hat - eps) ** 2).reshape(
            eps.shape[0], -1).mean(dim=1)
    return LossComponents(
        simple=simple, uncertainty=uncertainty, layerwise=layer_term,
        total=total, per_sample=per_sample, targets=targets,
        confidences=confidences)
