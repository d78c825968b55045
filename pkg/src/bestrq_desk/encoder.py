"""Small conformer encoder with a 4x convolutional front-end and N prediction heads."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from .seeding import STREAM_ENCODER, derive_seed

_LG = logging.getLogger(__name__)

SUBSAMPLE_FACTOR = 4


class EncoderConfigError(ValueError):
    pass


class EncoderInputError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    conv_kernel: int = 15
    ffn_expansion: int = 4
    subsample_factor: int = SUBSAMPLE_FACTOR
    n_outputs: int = 1
    vocab: int = 8192
    input_dim: int = 80
    dropout: float = 0.1
    max_relative_position: int = 64

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "conv_kernel", "ffn_expansion", "n_outputs", "vocab",
                     "input_dim", "max_relative_position"):
            if int(getattr(self, name)) < 1:
                raise EncoderConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise EncoderConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise EncoderConfigError("conv_kernel must be odd")
        if self.subsample_factor != SUBSAMPLE_FACTOR:
            raise EncoderConfigError(f"subsample_factor is fixed at {SUBSAMPLE_FACTOR}")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "conv_kernel": self.conv_kernel,
            "ffn_expansion": self.ffn_expansion,
            "subsample_factor": self.subsample_factor,
            "n_outputs": self.n_outputs,
            "vocab": self.vocab,
            "input_dim": self.input_dim,
            "dropout": self.dropout,
            "max_relative_position": self.max_relative_position,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "EncoderConfig":
        return EncoderConfig(**d)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ConvSubsampling(nn.Module):
    """Two kernel-2, stride-2 convolutions: output step t sees exactly input frames 4t..4t+3."""

    def __init__(self, in_dim: int, d_model: int):
        super().__init__()
        self.conv1 = nn.Conv1d(in_dim, d_model, kernel_size=2, stride=2)
        self.conv2 = nn.Conv1d(d_model, d_model, kernel_size=2, stride=2)
        self.act = nn.SiLU()

    def forward(self, x: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """
        Args:
            x (Tensor): Shape ``[batch, frame, feature]``.
            lengths (Tensor): Valid frames per sample, shape ``[batch]``.
        Returns:
            Tensor: Shape ``[batch, frame // 4, d_model]``.
            Tensor: Valid output steps per sample.
        """
        h = x.transpose(1, 2)
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        return h.transpose(1, 2), torch.div(lengths, SUBSAMPLE_FACTOR, rounding_mode="floor")


class FeedForwardModule(nn.Module):
    def __init__(self, d_model: int, expansion: int, dropout: float):
        super().__init__()
        self.sequential = nn.Sequential(
            nn.LayerNorm(d_model),
            nn.Linear(d_model, d_model * expansion),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(d_model * expansion, d_model),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.sequential(x)


class RelPositionSelfAttention(nn.Module):
    """Multi-head self-attention with a learned per-head bias on clipped relative distance."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, max_relative_position: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.max_rel = max_relative_position
        self.layer_norm = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.rel_bias = nn.Parameter(torch.zeros(n_heads, 2 * max_relative_position + 1))
        self.attn_dropout = nn.Dropout(dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        batch, steps, d_model = x.shape
        q, k, v = self.qkv(self.layer_norm(x)).chunk(3, dim=-1)
        q, k, v = (t.view(batch, steps, self.n_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        pos = torch.arange(steps, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_rel, self.max_rel) + self.max_rel
        scores = scores + self.rel_bias[:, rel].unsqueeze(0)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))

        attn = self.attn_dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(batch, steps, d_model)
        return self.dropout(self.out_proj(ctx))


class ConvolutionModule(nn.Module):
    """Pointwise-GLU, depthwise conv, layer norm, SiLU, pointwise.

    Layer norm replaces batch norm so results never depend on batch composition.
    """

    def __init__(self, d_model: int, kernel_size: int, dropout: float):
        super().__init__()
        self.layer_norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Conv1d(d_model, 2 * d_model, kernel_size=1)
        self.glu = nn.GLU(dim=1)
        self.depthwise = nn.Conv1d(
            d_model, d_model, kernel_size=kernel_size, padding=kernel_size // 2, groups=d_model
        )
        self.depth_norm = nn.LayerNorm(d_model)
        self.act = nn.SiLU()
        self.pointwise_out = nn.Conv1d(d_model, d_model, kernel_size=1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        h = self.glu(self.pointwise_in(self.layer_norm(x).transpose(1, 2)))
        # Padded steps enter the depthwise conv as zeros, like the sequence edge.
        h = self.depthwise(h.masked_fill(pad_mask[:, None, :], 0.0))
        h = self.act(self.depth_norm(h.transpose(1, 2))).transpose(1, 2)
        return self.dropout(self.pointwise_out(h).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ffn1 = FeedForwardModule(cfg.d_model, cfg.ffn_expansion, cfg.dropout)
        self.self_attn = RelPositionSelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout, cfg.max_relative_position)
        self.conv = ConvolutionModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.ffn2 = FeedForwardModule(cfg.d_model, cfg.ffn_expansion, cfg.dropout)
        self.final_layer_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x: Tensor, pad_mask: Tensor) -> Tensor:
        x = x + 0.5 * self.ffn1(x)
        x = x + self.self_attn(x, pad_mask)
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ffn2(x)
        return self.final_layer_norm(x)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampling = ConvSubsampling(cfg.input_dim, cfg.d_model)
        self.input_dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.n_layers))
        self.heads = nn.ModuleList(nn.Linear(cfg.d_model, cfg.vocab) for _ in range(cfg.n_outputs))
        # Bumped on every parameter update; forward results remember the version they saw.
        self.version = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def bump_version(self) -> None:
        self.version += 1

    def forward(self, features: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """
        Args:
            features (Tensor): Shape ``[batch, frame, input_dim]``.
            lengths (Tensor): Shape ``[batch]``.
        Returns:
            Tensor: Logits, shape ``[n_outputs, batch, frame // 4, vocab]``.
            Tensor: Valid output steps per sample.
        """
        x, out_lengths = self.subsampling(features, lengths)
        steps = x.shape[1]
        pad_mask = torch.arange(steps, device=x.device)[None, :] >= out_lengths[:, None]
        x = self.input_dropout(x)
        for layer in self.layers:
            x = layer(x, pad_mask)
        logits = torch.stack([head(x) for head in self.heads])
        return logits, out_lengths


def count_parameters(encoder: Encoder) -> int:
    return sum(p.numel() for p in encoder.parameters() if p.requires_grad)


def build_encoder(cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> Encoder:
    """Seeded construction; the global torch RNG is left untouched."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, STREAM_ENCODER) % (2**63))
        encoder = Encoder(cfg)
    encoder = encoder.to(dtype)
    _LG.debug("Built encoder: %d layers, d_model=%d, %d parameters", cfg.n_layers, cfg.d_model,
              count_parameters(encoder))
    return encoder


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    out_lengths: Tensor
    version: int
    consumed: bool = False

    @property
    def valid(self) -> Tensor:
        """``[batch, T']`` mask of non-padded output steps."""
        steps = self.probs.shape[2]
        return torch.arange(steps)[None, :] < self.out_lengths[:, None]


def forward(encoder: Encoder, masked_features: Any, lengths: Any | None = None) -> ForwardResult:
    """Run the encoder; ``probs`` has shape ``[N, batch, T', V]`` with rows summing to 1."""
    x = masked_features if isinstance(masked_features, Tensor) else torch.as_tensor(np.asarray(masked_features))
    x = x.to(encoder.dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[2] != encoder.cfg.input_dim:
        raise EncoderInputError(f"expected [batch, frame, {encoder.cfg.input_dim}] features, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise EncoderInputError("non-finite values in encoder input")

    batch, frames = x.shape[0], x.shape[1]
    if lengths is None:
        lens = torch.full((batch,), frames, dtype=torch.long)
    else:
        lens = torch.as_tensor(np.asarray(lengths) if not isinstance(lengths, Tensor) else lengths).long()
    if lens.shape != (batch,):
        raise EncoderInputError(f"lengths must have shape ({batch},), got {tuple(lens.shape)}")
    if (lens > frames).any():
        raise EncoderInputError(f"length {int(lens.max())} exceeds the padded frame count {frames}")
    if (lens < SUBSAMPLE_FACTOR).any():
        raise EncoderInputError(f"every utterance needs at least {SUBSAMPLE_FACTOR} frames")

    logits, out_lengths = encoder(x, lens)
    return ForwardResult(logits, torch.softmax(logits, dim=-1), out_lengths, encoder.version)


def backward(encoder: Encoder, result: ForwardResult, upstream: Tensor) -> dict[str, Tensor]:
    """Exact reverse-mode gradients for every trainable parameter.

    ``upstream`` is either a scalar loss built from ``result`` or a gradient with the
    shape of ``result.probs``. A result can be consumed once, and only while the
    encoder has not been updated since it was produced.
    """
    if result.consumed:
        raise StaleCacheError("forward result was already consumed by a backward pass")
    if result.version != encoder.version:
        raise StaleCacheError(
            f"forward result is from parameter version {result.version}, encoder is at {encoder.version}"
        )
    named = [(name, p) for name, p in encoder.named_parameters() if p.requires_grad]
    if upstream.dim() == 0:
        outputs, grad_outputs = upstream, None
    else:
        if upstream.shape != result.probs.shape:
            raise EncoderInputError(
                f"upstream gradient shape {tuple(upstream.shape)} != probs shape {tuple(result.probs.shape)}"
            )
        outputs, grad_outputs = result.probs, upstream.to(result.probs.dtype)
    grads = torch.autograd.grad(outputs, [p for _, p in named], grad_outputs=grad_outputs, allow_unused=True)
    result.consumed = True
    return {
        name: (g if g is not None else torch.zeros_like(p)).detach()
        for (name, p), g in zip(named, grads)
    }
