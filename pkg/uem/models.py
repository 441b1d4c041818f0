""" Uncertainty estimation heads and the denoiser that carries them.

Each intermediate layer i < N gets a linear head reading
[data token, timestep embedding] and squashing it through a sigmoid into a
per-token uncertainty in (0, 1).
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from backbone.models import Backbone, BackboneConfig, timestep_embedding
from earlyexit_lab.errors import ConfigError, ShapeMismatch

AGGREGATIONS = ('mean', 'max')


@dataclass
class UncertaintyRecord:
    u_map: torch.Tensor
    u_scalar: torch.Tensor
    layer_index: int
    t: torch.Tensor


def aggregate(u_map, aggregation='mean'):
    if aggregation == 'mean':
        return u_map.mean(dim=-1)
    if aggregation == 'max':
        return u_map.amax(dim=-1)
    raise ConfigError("unknown aggregation %r" % (aggregation,))


def estimate_uncertainty(tokens, t_emb, head, layer_index=None, t=None,
                         aggregation='mean'):
    """ u = sigmoid(w^T [token, t_emb] + b) for every data token.

    :param tokens: (B, tokens, hidden_dim) data-token states of one layer.
    :param t_emb: (B, emb_dim) timestep embeddings.
    :param head: an nn.Linear(hidden_dim + emb_dim, 1).
    """
    expected = head.in_features
    if tokens.shape[-1] + t_emb.shape[-1] != expected:
        raise ShapeMismatch(
            "head expects %s inputs, got %s + %s" % (
                expected, tokens.shape[-1], t_emb.shape[-1]))
    if t_emb.shape[0] != tokens.shape[0]:
        raise ShapeMismatch("embedding batch does not match token batch")
    t_emb = t_emb[:, None, :].expand(-1, tokens.shape[1], -1)
    logits = head(torch.cat([tokens, t_emb], dim=-1)).squeeze(-1)
    # Keep the open interval even where float32 sigmoid rounds to 0 or 1.
    tiny = torch.finfo(logits.dtype).tiny
    top = 1.0 - torch.finfo(logits.dtype).eps
    u_map = torch.sigmoid(logits).clamp(min=tiny, max=top)
    return UncertaintyRecord(
        u_map=u_map,
        u_scalar=aggregate(u_map, aggregation).clamp(min=tiny, max=top),
        layer_index=layer_index if layer_index is not None else 0,
        t=t,
    )


class UncertaintyHeads(nn.Module):
    """ One unshared head per intermediate layer, or a single head reused
    everywhere when share_params is set.
    """
    def __init__(self, depth, hidden_dim, emb_dim=None, share_params=False):
        super().__init__()
        self.depth = depth
        self.emb_dim = emb_dim or hidden_dim
        self.share_params = share_params
        count = 1 if share_params else depth - 1
        self.heads = nn.ModuleList([
            nn.Linear(hidden_dim + self.emb_dim, 1) for _ in range(count)])
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def head(self, layer):
        if not 1 <= layer < self.depth:
            raise ConfigError(
                "no uncertainty head for layer %s (depth %s)" % (
                    layer, self.depth))
        return self.heads[0 if self.share_params else layer - 1]


class EarlyExitDenoiser(nn.Module):
    """ Backbone plus its uncertainty heads; the unit that is trained,
    checkpointed and sampled from.
    """
    def __init__(self, config, share_params=False, aggregation='mean'):
        super().__init__()
        if aggregation not in AGGREGATIONS:
            raise ConfigError("unknown aggregation %r" % (aggregation,))
        self.config = config
        self.aggregation = aggregation
        self.backbone = Backbone(config)
        self.uem = UncertaintyHeads(
            config.depth, config.hidden_dim, share_params=share_params)

    @classmethod
    def from_run_config(cls, run_config, input_shape):
        model = run_config['model']
        config = BackboneConfig(
            depth=model['depth'],
            hidden_dim=model['hidden_dim'],
            num_heads=model['num_heads'],
            patch_size=model['patch_size'],
            input_shape=tuple(input_shape),
            share_final_head=model['share_final_head'],
            mlp_ratio=model['mlp_ratio'],
        )
        return cls(
            config,
            share_params=run_config['uem']['share_params'],
            aggregation=run_config['uem']['aggregation'])

    @property
    def depth(self):
        return self.config.depth

    def time_features(self, t):
        """ The UEM's timestep input: the raw sinusoidal embedding.
        """
        dtype = self.backbone.pos_embed.dtype
        return timestep_embedding(t, self.uem.emb_dim, dtype=dtype)

    def layer_uncertainty(self, layer, hidden, t, aggregation=None):
        return estimate_uncertainty(
            self.backbone.data_tokens(hidden),
            self.time_features(t),
            self.uem.head(layer),
            layer_index=layer,
            t=t,
            aggregation=aggregation or self.aggregation,
        )

    def collect(self, x_t, t):
        """ Full-depth pass plus the uncertainty of every intermediate
        layer. Returns (eps_hat, trace, records).
        """
        eps_hat, trace = self.backbone.forward_collect(x_t, t)
        records = [
            self.layer_uncertainty(layer, hidden, trace.t)
            for layer, hidden in enumerate(trace.hidden[:-1], start=1)]
        return eps_hat, trace, records

    def forward(self, x_t, t):
        return self.backbone(x_t, t)
