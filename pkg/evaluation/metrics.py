""" Efficiency accounting and sample-quality scores.

Cost model, in multiply-accumulates, for d = hidden_dim, r = mlp_ratio,
P = data tokens and L = P + 1 tokens per layer (the time token included):

    per layer   attention   4 d^2 L + 2 d L^2
                MLP         2 r d^2 L
                UEM head    P (d + d)
                skip mix    2 d^2 L on each layer fed by a long skip,
                            charged as its average over the N layers
    once        patch embed P * patch_dim * d
                time MLP    8 d^2
                output head P * d * patch_dim

A call that stops at layer i costs the fixed part plus i per-layer costs.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import linalg

from earlyexit_lab.errors import EmptyInput, ShapeMismatch

KERNEL_CHUNK = 1024


@dataclass
class EfficiencyReport:
    avg_layers: float
    depth: int
    layers_ratio_reduction: float
    flops_full: float = None
    flops_actual: float = None

    @property
    def reduction_percent(self):
        """ Reported the way the efficiency tables print it: -47.7 for a
        47.7% saving.
        """
        return -100.0 * self.layers_ratio_reduction or 0.0

    def as_dict(self):
        data = asdict(self)
        data['reduction_percent'] = self.reduction_percent
        return data


def layer_costs(config):
    d = config.hidden_dim
    tokens = config.num_tokens
    length = tokens + 1
    skip_layers = len(config.skip_pairs)
    per_layer = {
        'attention': 4 * d * d * length + 2 * d * length * length,
        'mlp': 2 * config.mlp_ratio * d * d * length,
        'uem': tokens * 2 * d,
        'skip': 2.0 * d * d * length * skip_layers / config.depth,
    }
    fixed = {
        'patch_embed': tokens * config.patch_dim * d,
        'time_embed': 8 * d * d,
        'output_head': tokens * d * config.patch_dim,
    }
    return per_layer, fixed


def flops_estimate(config, avg_layers):
    """ (flops_full, flops_actual) for a model that runs avg_layers layers
    per call on average.
    """
    per_layer, fixed = layer_costs(config)
    layer = float(sum(per_layer.values()))
    once = float(sum(fixed.values()))
    return once + config.depth * layer, once + float(avg_layers) * layer


def layer_usage_report(layers_used, depth, config=None):
    """ Mean exit depth over every recorded (sample, step) and the implied
    layer saving. layers_used may be a SampleRun or a tensor of depths.
    """
    layers_used = getattr(layers_used, 'layers_used', layers_used)
    layers_used = torch.as_tensor(layers_used)
    if layers_used.numel() == 0:
        raise EmptyInput("no exit depths recorded")
    avg = float(layers_used.double().mean())
    report = EfficiencyReport(
        avg_layers=avg, depth=int(depth),
        layers_ratio_reduction=1.0 - avg / depth)
    if config is not None:
        report.flops_full, report.flops_actual = flops_estimate(config, avg)
    return report


def _as_points(values):
    values = torch.as_tensor(values).detach().to(torch.float64)
    return values.reshape(values.shape[0], -1)


def _kernel_sum(x, y, bandwidths):
    """ Sum over all pairs of a Gaussian-kernel mixture, row block by row
    block.
    """
    total = torch.zeros((), dtype=torch.float64)
    for start in range(0, x.shape[0], KERNEL_CHUNK):
        block = x[start:start + KERNEL_CHUNK]
        distances = torch.cdist(
            block, y, compute_mode='donot_use_mm_for_euclid_dist') ** 2
        for h in bandwidths:
            total = total + torch.exp(-distances / (2.0 * h * h)).sum()
    return total


def mmd_quality(samples, reference, bandwidths, unbiased=True):
    """ Squared maximum mean discrepancy under sum_h exp(-|x - y|^2 / 2h^2).

    The unbiased estimate drops the diagonal of the within-set terms and
    can dip below zero. Swapping the two sets gives exactly the same value.
    """
    x, y = _as_points(samples), _as_points(reference)
    if x.dim() != 2 or y.dim() != 2 or x.shape[1] != y.shape[1]:
        raise ShapeMismatch(
            "point sets have different dimensions: %s vs %s" % (
                tuple(x.shape[1:]), tuple(y.shape[1:])))
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise EmptyInput("need at least 2 points per set, got %s and %s" % (
            m, n))
    bandwidths = [float(h) for h in bandwidths]
    if not bandwidths:
        raise EmptyInput("no kernel bandwidths given")

    kxx = _kernel_sum(x, x, bandwidths)
    kyy = _kernel_sum(y, y, bandwidths)
    cross = (_kernel_sum(x, y, bandwidths) + _kernel_sum(y, x, bandwidths))
    cross = cross / (2.0 * m * n)
    if unbiased:
        diagonal = len(bandwidths)
        within = ((kxx - diagonal * m) / (m * (m - 1)) +
                  (kyy - diagonal * n) / (n * (n - 1)))
    else:
        within = kxx / (m * m) + kyy / (n * n)
    return float(within - 2.0 * cross)


def frechet_pixel_distance(samples, reference):
    """ Frechet distance between Gaussian fits of the raw values:
    |mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^1/2).
    """
    a = _as_points(samples).numpy()
    b = _as_points(reference).numpy()
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(
            "point sets have different dimensions: %s vs %s" % (
                a.shape[1], b.shape[1]))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise EmptyInput("need at least 2 points per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root = linalg.sqrtm(cov_a.dot(cov_b))
    if np.iscomplexobj(root):
        root = root.real
    value = (np.sum((mu_a - mu_b) ** 2) +
             np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(root))
    return float(max(value, 0.0))


def noise_floor(reference, bandwidths):
    """ MMD between the two halves of a reference set: what a perfect model
    would score at this sample size.
    """
    reference = _as_points(reference)
    middle = reference.shape[0] // 2
    return mmd_quality(reference[:middle], reference[middle:], bandwidths)


def quality_scores(samples, reference, bandwidths):
    return {
        'mmd': mmd_quality(samples, reference, bandwidths),
        'mmd_noise_floor': noise_floor(reference, bandwidths),
        'frechet': frechet_pixel_distance(samples, reference),
    }
