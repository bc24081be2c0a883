"""
Reprogrammed regression model

patchify -> patch embedding -> cross-attention reprogramming onto learned
prototypes -> [statistics prefix | patch tokens] -> frozen transformer
backbone -> flatten (prefix dropped, first d_ff features kept) -> per-channel
shape/mean heads -> shared-weight aggregation with zero-mean shape correction.

Every input channel runs through the encoder and backbone independently; only
the aggregation step mixes channels. Outputs stay in physical units (um); the
input normalization is never inverted.
"""

import hashlib
import math
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import PROMPT_DIM, ConditionedInput
from .errors import (
    ChannelCountMismatch, CheckpointError, ConfigError, SeriesTooShort, ShapeMismatch,
)
from .logger import get_logger
from .wafer_data import N_POINTS

logger = get_logger('model')

DTYPE = torch.float64
CHECKPOINT_FORMAT = 'etch-profiler-checkpoint'
CHECKPOINT_VERSION = 2

PROMPT_TEMPLATE = (
    "Dataset description: Semiconductor silicon etch process monitoring data. "
    "The dataset contains {n_c} sensor measurements sampled over {n_t} timesteps during a wafer "
    "fabrication etch process. Sensors include plasma parameters (RF power, gas flow, pressure, "
    "temperature) and optical emission spectroscopy (OES) intensities at various wavelengths. "
    "The task is to predict the spatial etch depth uniformity distribution across 89 measurement "
    "points on the wafer surface.\n"
    "Task instruction: Predict the spatial etch profile at 89 wafer positions given {n_c} process "
    "sensor channels of {n_t} timesteps"
)


@dataclass
class ModelConfig:
    l_p: int = 16
    s: int = 8
    d_m: int = 32
    k_heads: int = 4
    n_proto: int = 64
    d_backbone: int = 64
    d_ff: int = 32
    n_prefix: int = 4
    backbone_layers: int = 2
    backbone_heads: int = 4
    backbone_ff_mult: int = 2
    head_init_scale: float = 0.1
    backbone_weights: Optional[str] = None
    seed: int = 0

    @property
    def d(self) -> int:
        """Per-head reprogramming dimension, floor(d_m / k_heads)."""
        return self.d_m // self.k_heads

    def n_patches(self, n_t: int) -> int:
        return (n_t - self.l_p) // self.s + 2

    def d_f(self, n_t: int) -> int:
        return self.n_patches(n_t) * self.d_ff

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.l_p < 1:
            return False, "model.l_p must be >= 1"
        if not 1 <= self.s <= self.l_p:
            return False, "model.s must satisfy 1 <= s <= l_p"
        if self.k_heads < 1:
            return False, "model.k_heads must be >= 1"
        if self.d < 1:
            return False, "model.d_m must be >= model.k_heads"
        if self.n_proto < 1:
            return False, "model.n_proto must be >= 1"
        if self.d_ff < 1 or self.d_ff > self.d_backbone:
            return False, "model.d_ff must satisfy 1 <= d_ff <= d_backbone"
        if self.n_prefix < 0:
            return False, "model.n_prefix must be >= 0"
        if self.backbone_layers < 0:
            return False, "model.backbone_layers must be >= 0"
        if self.backbone_heads < 1 or self.d_backbone % self.backbone_heads:
            return False, "model.backbone_heads must divide model.d_backbone"
        if self.backbone_ff_mult < 1:
            return False, "model.backbone_ff_mult must be >= 1"
        return True, None


@dataclass
class Prediction:
    """One wafer's prediction in um: zero-mean shape, scalar mean, depth = shape + mean."""

    shape: np.ndarray
    mean: float
    depth: np.ndarray
    per_channel_shape: Optional[np.ndarray] = None
    per_channel_mean: Optional[np.ndarray] = None


@dataclass
class PredictionBatch:
    shape: torch.Tensor                          # (B, 89)
    mean: torch.Tensor                           # (B,)
    per_channel_shape: Optional[torch.Tensor] = None   # (B, N_c, 89)
    per_channel_mean: Optional[torch.Tensor] = None    # (B, N_c)

    @property
    def depth(self) -> torch.Tensor:
        return self.shape + self.mean.unsqueeze(-1)

    def to_predictions(self) -> List[Prediction]:
        shape = self.shape.detach().cpu().numpy()
        mean = self.mean.detach().cpu().numpy()
        pcs = self.per_channel_shape.detach().cpu().numpy() if self.per_channel_shape is not None else None
        pcm = self.per_channel_mean.detach().cpu().numpy() if self.per_channel_mean is not None else None
        return [
            Prediction(shape=shape[b], mean=float(mean[b]), depth=shape[b] + mean[b],
                       per_channel_shape=None if pcs is None else pcs[b],
                       per_channel_mean=None if pcm is None else pcm[b])
            for b in range(shape.shape[0])
        ]


def _uniform_(tensor: torch.Tensor, bound: float, gen: torch.Generator):
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)


def _init_linear(layer: nn.Linear, gen: torch.Generator, scale: float = 1.0):
    bound = scale / math.sqrt(layer.in_features)
    _uniform_(layer.weight, bound, gen)
    if layer.bias is not None:
        _uniform_(layer.bias, bound, gen)


def _linear(d_in: int, d_out: int, gen: torch.Generator, scale: float = 1.0,
            bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=DTYPE)
    _init_linear(layer, gen, scale)
    return layer


def patchify(series, l_p: int, s: int) -> torch.Tensor:
    """
    Split the last axis into N_p = floor((N_T - L_p) / S) + 2 patches of length
    L_p starting at 0, S, 2S, ... The end is padded by replicating the final
    sample S times so the trailing boundary patch exists.

    Returns:
        Tensor of shape (..., N_p, L_p)
    """
    series = torch.as_tensor(series, dtype=DTYPE)
    if l_p < 1 or not 1 <= s <= l_p:
        raise ShapeMismatch(f"invalid patch geometry l_p={l_p}, s={s}")
    n_t = series.shape[-1]
    if n_t < l_p:
        raise SeriesTooShort(f"series of length {n_t} is shorter than patch length {l_p}")
    pad = series[..., -1:].expand(*series.shape[:-1], s)
    return torch.cat([series, pad], dim=-1).unfold(-1, l_p, s)


def flatten_features(out: torch.Tensor, n_prefix: int, d_ff: int) -> torch.Tensor:
    """Drop the prefix rows, keep the first d_ff columns, flatten row-major."""
    if d_ff > out.shape[-1] or n_prefix > out.shape[-2]:
        raise ShapeMismatch(f"cannot keep {d_ff} of {out.shape[-1]} features after {n_prefix} prefix rows")
    kept = out[..., n_prefix:, :d_ff]
    return kept.reshape(*kept.shape[:-2], -1)


class MultiHeadAttention(nn.Module):
    """Non-causal multi-head self-attention."""

    def __init__(self, d_model: int, n_heads: int, gen: torch.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = _linear(d_model, d_model, gen)
        self.key = _linear(d_model, d_model, gen)
        self.value = _linear(d_model, d_model, gen)
        self.out = _linear(d_model, d_model, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d_model = x.shape
        q = self.query(x).view(*lead, n, self.n_heads, self.d_head).transpose(-3, -2)
        k = self.key(x).view(*lead, n, self.n_heads, self.d_head).transpose(-3, -2)
        v = self.value(x).view(*lead, n, self.n_heads, self.d_head).transpose(-3, -2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        context = torch.softmax(scores, dim=-1) @ v
        return self.out(context.transpose(-3, -2).reshape(*lead, n, d_model))


class BackboneBlock(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then h + ff(ln(h))."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, gen: torch.Generator):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = MultiHeadAttention(d_model, n_heads, gen)
        self.ln_ff = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ff_in = _linear(d_model, ff_mult * d_model, gen)
        self.ff_out = _linear(ff_mult * d_model, d_model, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x + self.attn(self.ln_attn(x))
        return h + self.ff_out(F.gelu(self.ff_in(self.ln_ff(h))))


class FrozenBackbone(nn.Module):
    """
    Compact transformer standing in for a pretrained language model. Weights
    are seeded (or loaded from a file) and never receive gradients.
    """

    def __init__(self, d_model: int, n_layers: int, n_heads: int, ff_mult: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList(
            [BackboneBlock(d_model, n_heads, ff_mult, gen) for _ in range(n_layers)]
        )
        self.requires_grad_(False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def load_weights(self, path: str):
        if not os.path.isfile(path):
            raise CheckpointError(f"backbone weights not found: {path}")
        state = torch.load(path, map_location='cpu', weights_only=True)
        try:
            self.load_state_dict(state)
        except RuntimeError as e:
            raise CheckpointError(f"backbone weights do not match the configuration: {e}")
        self.requires_grad_(False)


class PatchReprogramming(nn.Module):
    """
    Multi-head cross-attention from patch embeddings (queries) onto learned
    prototypes (keys/values), heads concatenated and mapped to the backbone
    width.
    """

    def __init__(self, d_m: int, k_heads: int, d_backbone: int, n_proto: int, gen: torch.Generator):
        super().__init__()
        self.k_heads = k_heads
        self.d = d_m // k_heads
        inner = self.d * k_heads
        self.prototypes = nn.Parameter(torch.randn(n_proto, d_backbone, generator=gen, dtype=DTYPE))
        self.query = _linear(d_m, inner, gen)
        # softmax is invariant to a per-query shift, so a key bias would be inert
        self.key = _linear(d_backbone, inner, gen, bias=False)
        self.value = _linear(d_backbone, inner, gen)
        self.out = _linear(inner, d_backbone, gen)

    def forward(self, patch_emb: torch.Tensor, return_attention: bool = False):
        *lead, n_p, _ = patch_emb.shape
        n_proto = self.prototypes.shape[0]
        q = self.query(patch_emb).view(*lead, n_p, self.k_heads, self.d)
        k = self.key(self.prototypes).view(n_proto, self.k_heads, self.d)
        v = self.value(self.prototypes).view(n_proto, self.k_heads, self.d)

        scores = torch.einsum('...lhe,she->...hls', q, k) / math.sqrt(self.d)
        attention = torch.softmax(scores, dim=-1)
        context = torch.einsum('...hls,she->...lhe', attention, v)
        out = self.out(context.reshape(*lead, n_p, self.k_heads * self.d))
        return (out, attention) if return_attention else out


class ReprogrammedRegressor(nn.Module):
    """Trainable reprogramming/projection modules around a frozen backbone."""

    def __init__(self, config: ModelConfig, n_channels: int, n_t: int, mean_prior: float = 0.0,
                 n_points: int = N_POINTS):
        super().__init__()
        ok, msg = config.validate()
        if not ok:
            raise ConfigError(msg, field=msg.split()[0])
        if n_t < config.l_p:
            raise SeriesTooShort(f"input length {n_t} is shorter than patch length {config.l_p}")

        self.config = config
        self.n_channels = n_channels
        self.n_t = n_t
        self.n_points = n_points
        self.mean_prior = float(mean_prior)
        self.n_patches = config.n_patches(n_t)
        self.d_f = config.d_f(n_t)

        self.backbone = FrozenBackbone(config.d_backbone, config.backbone_layers,
                                       config.backbone_heads, config.backbone_ff_mult, config.seed)
        if config.backbone_weights:
            self.backbone.load_weights(config.backbone_weights)

        gen = torch.Generator().manual_seed(config.seed + 1)
        self.patch_embedding = _linear(config.l_p, config.d_m, gen)
        self.reprogramming = PatchReprogramming(config.d_m, config.k_heads, config.d_backbone,
                                                config.n_proto, gen)
        self.prefix_map = (_linear(PROMPT_DIM, config.n_prefix * config.d_backbone, gen)
                           if config.n_prefix > 0 else None)

        bound = config.head_init_scale / math.sqrt(self.d_f)
        self.shape_weight = nn.Parameter(torch.empty(n_channels, n_points, self.d_f, dtype=DTYPE))
        self.shape_bias = nn.Parameter(torch.zeros(n_channels, n_points, dtype=DTYPE))
        self.mean_weight = nn.Parameter(torch.empty(n_channels, self.d_f, dtype=DTYPE))
        self.mean_bias = nn.Parameter(torch.full((n_channels,), self.mean_prior, dtype=DTYPE))
        _uniform_(self.shape_weight, bound, gen)
        _uniform_(self.mean_weight, bound, gen)

        self.w_shape = nn.Parameter(torch.full((n_channels,), 1.0 / n_channels, dtype=DTYPE))
        self.w_mean = nn.Parameter(torch.full((n_channels,), 1.0 / n_channels, dtype=DTYPE))

    # -- parameter views ---------------------------------------------------

    def named_trainable(self) -> List[Tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith('backbone.')]

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for _, p in self.named_trainable()]

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    # -- pipeline stages ---------------------------------------------------

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.config.l_p:
            raise ShapeMismatch(f"patch length {patches.shape[-1]} != l_p {self.config.l_p}")
        return self.patch_embedding(patches)

    def reprogram(self, patch_emb: torch.Tensor, return_attention: bool = False):
        if patch_emb.shape[-1] != self.config.d_m:
            raise ShapeMismatch(f"embedding width {patch_emb.shape[-1]} != d_m {self.config.d_m}")
        return self.reprogramming(patch_emb, return_attention=return_attention)

    def build_prefix(self, prompt: torch.Tensor) -> torch.Tensor:
        """Map (..., PROMPT_DIM) statistics to (..., P, D) prefix embeddings."""
        lead = prompt.shape[:-1]
        if self.prefix_map is None:
            return prompt.new_zeros(*lead, 0, self.config.d_backbone)
        return self.prefix_map(prompt).view(*lead, self.config.n_prefix, self.config.d_backbone)

    def backbone_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.backbone(tokens)

    def encode(self, x: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """Channel rows (..., N_T) plus their statistics -> flattened (..., d_f) features."""
        tokens = self.reprogram(self.embed_patches(patchify(x, self.config.l_p, self.config.s)))
        out = self.backbone_forward(torch.cat([self.build_prefix(prompt), tokens], dim=-2))
        return flatten_features(out, self.config.n_prefix, self.config.d_ff)

    def project_heads(self, flat: torch.Tensor, channel: Optional[int] = None):
        """
        Per-channel affine shape (89) and mean (1) heads.

        With channel=None, flat is (..., N_c, d_f) and every channel uses its
        own head; otherwise flat is (..., d_f) for that single channel.
        """
        if flat.shape[-1] != self.d_f:
            raise ShapeMismatch(f"feature width {flat.shape[-1]} != d_f {self.d_f}")
        if channel is not None:
            if not 0 <= channel < self.n_channels:
                raise ShapeMismatch(f"channel {channel} out of range")
            shape = flat @ self.shape_weight[channel].T + self.shape_bias[channel]
            mean = flat @ self.mean_weight[channel] + self.mean_bias[channel]
            return shape, mean
        if flat.shape[-2] != self.n_channels:
            raise ChannelCountMismatch(f"{flat.shape[-2]} channels, model has {self.n_channels}")
        shape = torch.einsum('...cf,cjf->...cj', flat, self.shape_weight) + self.shape_bias
        mean = torch.einsum('...cf,cf->...c', flat, self.mean_weight) + self.mean_bias
        return shape, mean

    def aggregate(self, per_channel_shape: torch.Tensor, per_channel_mean: torch.Tensor,
                  keep_per_channel: bool = False) -> PredictionBatch:
        if per_channel_shape.shape[-2] != self.n_channels or per_channel_mean.shape[-1] != self.n_channels:
            raise ChannelCountMismatch(
                f"{per_channel_shape.shape[-2]} channel outputs, model has {self.n_channels}"
            )
        raw = torch.einsum('...cj,c->...j', per_channel_shape, self.w_shape)
        shape = raw - raw.mean(dim=-1, keepdim=True)
        mean = torch.einsum('...c,c->...', per_channel_mean, self.w_mean)
        return PredictionBatch(
            shape=shape, mean=mean,
            per_channel_shape=per_channel_shape if keep_per_channel else None,
            per_channel_mean=per_channel_mean if keep_per_channel else None,
        )

    def forward(self, x: torch.Tensor, prompt: torch.Tensor,
                keep_per_channel: bool = False) -> PredictionBatch:
        """
        Args:
            x: (B, N_c, N_T) normalized signals
            prompt: (B, N_c, PROMPT_DIM) channel statistics
        """
        if x.shape[-2] != self.n_channels:
            raise ChannelCountMismatch(f"input has {x.shape[-2]} channels, model has {self.n_channels}")
        if x.shape[-1] != self.n_t:
            raise ShapeMismatch(f"input length {x.shape[-1]} != {self.n_t}")
        flat = self.encode(x, prompt)
        per_shape, per_mean = self.project_heads(flat)
        return self.aggregate(per_shape, per_mean, keep_per_channel)


def init_model(config: ModelConfig, n_channels: int, n_t: int,
               mean_prior: float = 0.0) -> ReprogrammedRegressor:
    """Seeded initialization; identical arguments give identical parameters."""
    return ReprogrammedRegressor(config, n_channels, n_t, mean_prior=mean_prior)


def stack_inputs(inputs: Sequence[ConditionedInput]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batch conditioned inputs into (B, N_c, N_T) signals and (B, N_c, PROMPT_DIM) statistics."""
    x = torch.as_tensor(np.stack([c.matrix for c in inputs]), dtype=DTYPE)
    prompt = torch.as_tensor(np.stack([c.stats.prompt_matrix() for c in inputs]), dtype=DTYPE)
    return x, prompt


def predict(model: ReprogrammedRegressor, inputs: Sequence[ConditionedInput],
            batch_size: int = 16, keep_per_channel: bool = False) -> List[Prediction]:
    predictions: List[Prediction] = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            x, prompt = stack_inputs(inputs[start:start + batch_size])
            predictions.extend(model(x, prompt, keep_per_channel=keep_per_channel).to_predictions())
    return predictions


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(model: ReprogrammedRegressor, path: str):
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'model_config': asdict(model.config),
        'n_channels': model.n_channels,
        'n_t': model.n_t,
        'mean_prior': model.mean_prior,
        'state_dict': model.state_dict(),
        'backbone_checksum': model.backbone.checksum(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str) -> ReprogrammedRegressor:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an etch-profiler checkpoint")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")

    config = ModelConfig(**{**payload['model_config'], 'backbone_weights': None})
    model = ReprogrammedRegressor(config, payload['n_channels'], payload['n_t'],
                                  mean_prior=payload['mean_prior'])
    model.load_state_dict(payload['state_dict'])
    model.backbone.requires_grad_(False)
    if model.backbone.checksum() != payload['backbone_checksum']:
        raise CheckpointError(f"{path}: backbone checksum mismatch")
    return model
