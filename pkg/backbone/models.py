""" Transformer denoiser with long skip connections and an output head g_i
after every layer, so a forward pass can stop at any depth.

Tokens are laid out as [time token, data tokens...]. Image inputs are cut
into patches; vector inputs (toy 2-D data) are a single data token.
"""
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
from einops import rearrange

from earlyexit_lab.errors import ConfigError, ShapeMismatch


def default_skip_pairs(depth):
    """ Pairs layer i with layer depth + 1 - i for i < ceil(depth / 2).
    """
    return tuple(
        (i, depth + 1 - i) for i in range(1, int(math.ceil(depth / 2.0))))


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 13
    hidden_dim: int = 64
    num_heads: int = 4
    patch_size: int = 1
    input_shape: tuple = (2,)
    skip_pairs: tuple = None
    share_final_head: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'input_shape', tuple(self.input_shape))
        if self.skip_pairs is None:
            object.__setattr__(
                self, 'skip_pairs', default_skip_pairs(self.depth))
        else:
            object.__setattr__(self, 'skip_pairs', tuple(
                tuple(pair) for pair in self.skip_pairs))
        self.validate()

    def validate(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2, got %s" % self.depth)
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                "hidden_dim %s is not divisible by num_heads %s" % (
                    self.hidden_dim, self.num_heads))
        if self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even")
        if len(self.input_shape) not in (1, 3):
            raise ConfigError(
                "input_shape must be (D,) or (C, H, W), got %s" % (
                    self.input_shape,))
        if self.is_image:
            _, height, width = self.input_shape
            if height % self.patch_size or width % self.patch_size:
                raise ConfigError(
                    "image %sx%s is not divisible by patch size %s" % (
                        height, width, self.patch_size))
        deep_seen = set()
        for shallow, deep in self.skip_pairs:
            if not (1 <= shallow < deep <= self.depth):
                raise ConfigError(
                    "bad skip pair (%s, %s) for depth %s" % (
                        shallow, deep, self.depth))
            if deep in deep_seen:
                raise ConfigError("layer %s has two skip inputs" % deep)
            deep_seen.add(deep)

    @property
    def is_image(self):
        return len(self.input_shape) == 3

    @property
    def token_grid(self):
        """ (rows, cols) of the data-token grid; vector mode is 1x1.
        """
        if not self.is_image:
            return (1, 1)
        _, height, width = self.input_shape
        return (height // self.patch_size, width // self.patch_size)

    @property
    def num_tokens(self):
        rows, cols = self.token_grid
        return rows * cols

    @property
    def patch_dim(self):
        if not self.is_image:
            return self.input_shape[0]
        return self.input_shape[0] * self.patch_size ** 2

    def to_dict(self):
        data = asdict(self)
        data['input_shape'] = list(self.input_shape)
        data['skip_pairs'] = [list(pair) for pair in self.skip_pairs]
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class LayerTrace:
    """ What one forward pass saw, layer by layer.

    `hidden[i - 1]` and `preds[i - 1]` hold layer i's token states and head
    prediction for the rows still running at layer i; `rows[i - 1]` gives
    their positions in the input batch. With keep_trace off only
    `exit_layer` is filled.
    """
    t: torch.Tensor
    exit_layer: torch.Tensor
    hidden: list = field(default_factory=list)
    preds: list = field(default_factory=list)
    rows: list = field(default_factory=list)


def patchify(image, patch_size):
    """ (B, C, H, W) -> (B, tokens, C * p * p); (B, D) -> (B, 1, D).
    """
    if image.dim() == 2:
        return rearrange(image, 'b d -> b 1 d')
    if image.dim() != 4:
        raise ShapeMismatch(
            "expected (B, D) or (B, C, H, W), got %s" % (tuple(image.shape),))
    height, width = image.shape[-2:]
    if height % patch_size or width % patch_size:
        raise ShapeMismatch(
            "image %sx%s is not divisible by patch size %s" % (
                height, width, patch_size))
    return rearrange(
        image, 'b c (h p1) (w p2) -> b (h w) (p1 p2 c)',
        p1=patch_size, p2=patch_size)


def unpatchify(tokens, config):
    if not config.is_image:
        return rearrange(tokens, 'b 1 d -> b d')
    rows, cols = config.token_grid
    return rearrange(
        tokens, 'b (h w) (p1 p2 c) -> b c (h p1) (w p2)',
        h=rows, w=cols, p1=config.patch_size, p2=config.patch_size,
        c=config.input_shape[0])


def timestep_embedding(t, dim, max_period=10000, dtype=torch.float32):
    """ Sinusoidal embedding with sin/cos interleaved:
    out[2k] = sin(t f_k), out[2k + 1] = cos(t f_k), f_k geometrically spaced
    from 1 down to 1 / max_period.

    :param t: an int or a 1-D tensor of timesteps, one per batch element.
    :return: an (N, dim) tensor.
    """
    if dim % 2:
        raise ConfigError("embedding dim must be even, got %s" % dim)
    steps = torch.as_tensor(t).reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) *
        torch.arange(half, dtype=torch.float64) / half)
    args = steps[:, None] * freqs[None]
    embedding = torch.stack([torch.sin(args), torch.cos(args)], dim=-1)
    return embedding.reshape(steps.numel(), dim).to(dtype)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    """ Pre-norm transformer block. Deep layers that receive a long skip
    first mix [x, skip] back to width with a linear layer.
    """
    def __init__(self, dim, num_heads, mlp_ratio, skip=False):
        super().__init__()
        self.skip_linear = nn.Linear(2 * dim, dim) if skip else None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x, skip=None):
        if self.skip_linear is not None:
            x = self.skip_linear(torch.cat([x, skip], dim=-1))
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class OutputHead(nn.Module):
    """ g_i: layer norm and a linear map from a data token to its patch.
    """
    def __init__(self, dim, patch_dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.linear = nn.Linear(dim, patch_dim)

    def forward(self, tokens):
        return self.linear(self.norm(tokens))


class Backbone(nn.Module):

    def __init__(self, config):
        super().__init__()
        self.config = config
        dim = config.hidden_dim
        self.skip_from = dict(
            (deep, shallow) for shallow, deep in config.skip_pairs)
        self.skip_sources = set(shallow for shallow, _ in config.skip_pairs)

        self.patch_embed = nn.Linear(config.patch_dim, dim)
        self.time_embed = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.SiLU(),
            nn.Linear(4 * dim, dim),
        )
        self.pos_embed = nn.Parameter(
            torch.zeros(1, 1 + config.num_tokens, dim))
        self.blocks = nn.ModuleList([
            Block(dim, config.num_heads, config.mlp_ratio,
                  skip=i in self.skip_from)
            for i in range(1, config.depth + 1)])
        self.heads = nn.ModuleList([
            OutputHead(dim, config.patch_dim)
            for _ in range(config.depth)])
        if config.share_final_head:
            self.final_layer = None
        else:
            self.final_layer = OutputHead(dim, config.patch_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def depth(self):
        return self.config.depth

    def _check_input(self, x_t):
        expected = tuple(self.config.input_shape)
        if tuple(x_t.shape[1:]) != expected:
            raise ShapeMismatch("expected input (B, %s), got %s" % (
                ", ".join(str(s) for s in expected), tuple(x_t.shape)))

    def _timesteps(self, t, batch):
        steps = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if steps.numel() == 1:
            steps = steps.expand(batch)
        if steps.numel() != batch:
            raise ShapeMismatch(
                "got %s timesteps for a batch of %s" % (steps.numel(), batch))
        return steps

    def embed(self, x_t, t):
        dim = self.config.hidden_dim
        tokens = self.patch_embed(patchify(x_t, self.config.patch_size))
        t_emb = timestep_embedding(t, dim, dtype=tokens.dtype)
        time_token = self.time_embed(t_emb).unsqueeze(1)
        return torch.cat([time_token, tokens], dim=1) + self.pos_embed

    def data_tokens(self, hidden):
        return hidden[:, 1:]

    def head_output(self, layer, hidden):
        """ g_layer(L_layer) in data space.
        """
        tokens = self.heads[layer - 1](self.data_tokens(hidden))
        return unpatchify(tokens, self.config)

    def final_output(self, hidden):
        if self.final_layer is None:
            return self.head_output(self.depth, hidden)
        return unpatchify(
            self.final_layer(self.data_tokens(hidden)), self.config)

    def forward_incremental(self, x_t, t, stop_fn=None, keep_trace=True):
        """ Runs the layers in order. After each layer i < N, rows for which
        stop_fn(i, hidden, t) is true leave with eps_hat = g_i(L_i); the
        remaining rows continue. Rows that never stop get the full-depth
        output.

        stop_fn receives the hidden states and timesteps of the rows still
        running and returns a bool (or a bool tensor, one per row).
        """
        self._check_input(x_t)
        batch = x_t.shape[0]
        steps = self._timesteps(t, batch)
        rows = torch.arange(batch)
        eps_hat = torch.empty_like(x_t)
        exit_layer = torch.full((batch,), self.depth, dtype=torch.long)
        trace = LayerTrace(t=steps, exit_layer=exit_layer)

        hidden = self.embed(x_t, steps)
        skips = {}
        exited = False
        for layer, block in enumerate(self.blocks, start=1):
            skip = skips.get(self.skip_from.get(layer))
            hidden = block(hidden, skip)
            if layer in self.skip_sources:
                skips[layer] = hidden

            pred = None
            if keep_trace:
                pred = self.head_output(layer, hidden)
                trace.hidden.append(hidden)
                trace.preds.append(pred)
                trace.rows.append(rows)
            if layer == self.depth or stop_fn is None:
                continue

            stop = torch.as_tensor(
                stop_fn(layer, hidden, steps[rows]), dtype=torch.bool)
            stop = stop.expand(rows.numel()) if stop.dim() == 0 else stop
            if not bool(stop.any()):
                continue
            if pred is None:
                eps_hat[rows[stop]] = self.head_output(layer, hidden[stop])
            else:
                eps_hat[rows[stop]] = pred[stop]
            exit_layer[rows[stop]] = layer
            exited = True
            keep = ~stop
            rows = rows[keep]
            if rows.numel() == 0:
                return eps_hat, trace
            hidden = hidden[keep]
            skips = dict((k, v[keep]) for k, v in skips.items())

        if keep_trace and self.final_layer is None:
            final = trace.preds[-1]
        else:
            final = self.final_output(hidden)
        if not exited:
            return final, trace
        eps_hat[rows] = final
        return eps_hat, trace

    def forward_collect(self, x_t, t):
        """ Full-depth pass recording every layer.
        """
        return self.forward_incremental(x_t, t, stop_fn=None, keep_trace=True)

    def forward(self, x_t, t):
        eps_hat, _ = self.forward_incremental(x_t, t, keep_trace=False)
        return eps_hat
