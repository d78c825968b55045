"""Masked multi-codebook cross-entropy, KL regularizer and their weighted combination.

Shapes: predictions and similarity distributions are ``(N, *P, V)``, targets are
``(N, *P)`` and the target-level mask is ``(*P)``, where ``P`` is any position
layout (``T'`` for one utterance, ``B x T'`` for a batch). Per-codebook terms are
means over masked positions; positions outside the mask never contribute.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

from .clustering import CodebookWeights


class LossShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    w_ce: float = 1.0
    w_kl: float = 0.1
    epsilon: float = 1e-10
    cluster_weighting: bool = False
    w_primary: float = 2.0
    w_secondary: float = 0.8

    def validate(self) -> None:
        if self.w_ce < 0 or self.w_kl < 0:
            raise ValueError("loss weights must be >= 0")
        if self.w_ce == 0 and self.w_kl == 0:
            raise ValueError("w_ce and w_kl cannot both be zero")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class LossReport:
    ce_per_codebook: list[float]
    kl_per_codebook: list[float]
    applied_weights: list[float]
    total: float
    masked_positions: int
    kl_skipped: bool = False
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def empty_mask(self) -> bool:
        return self.masked_positions == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "ce_per_codebook": self.ce_per_codebook,
            "kl_per_codebook": self.kl_per_codebook,
            "applied_weights": self.applied_weights,
            "total": self.total,
            "masked_positions": self.masked_positions,
            "empty_mask": self.empty_mask,
        }


def _as_tensor(x: Any, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_shapes(probs: torch.Tensor, masked: torch.Tensor, other: torch.Tensor | None, name: str) -> None:
    if probs.dim() < 2:
        raise LossShapeError(f"predictions must be (N, *P, V), got {tuple(probs.shape)}")
    if tuple(masked.shape) != tuple(probs.shape[1:-1]):
        raise LossShapeError(f"mask shape {tuple(masked.shape)} does not match positions {tuple(probs.shape[1:-1])}")
    if other is not None and tuple(other.shape) != tuple(probs.shape[: other.dim()]):
        raise LossShapeError(f"{name} shape {tuple(other.shape)} does not match predictions {tuple(probs.shape)}")


def _masked_mean(values: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Per-codebook mean over masked positions; zero when nothing is masked."""
    flat = values.reshape(values.shape[0], -1)
    m = masked.reshape(-1).to(flat.dtype)
    # Unmasked terms are finite, so multiplying by zero removes them exactly.
    return (flat * m).sum(dim=1) / m.sum().clamp_min(1.0)


def ce_terms(probs: torch.Tensor, targets: torch.Tensor, epsilon: float) -> torch.Tensor:
    picked = probs.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(epsilon))


def kl_terms(probs: torch.Tensor, sim_dists: torch.Tensor, epsilon: float) -> torch.Tensor:
    return (probs * (torch.log(probs + epsilon) - torch.log(sim_dists + epsilon))).sum(dim=-1)


def ce_loss(probs: Any, targets: Any, masked: Any, epsilon: float = 1e-10) -> torch.Tensor:
    """Per-codebook mean of -log(max(p[target], epsilon)) over masked positions, shape (N,)."""
    probs = _as_tensor(probs)
    targets = _as_tensor(targets).long()
    masked = _as_tensor(masked).bool()
    _check_shapes(probs, masked, targets, "targets")
    if targets.numel() and (targets.min() < 0 or targets.max() >= probs.shape[-1]):
        raise LossShapeError(f"target index outside [0, {probs.shape[-1]})")
    return _masked_mean(ce_terms(probs, targets, epsilon), masked)


def kl_loss(probs: Any, sim_dists: Any, masked: Any, epsilon: float = 1e-10) -> torch.Tensor:
    """Per-codebook mean over masked positions of KL(p || d), shape (N,)."""
    probs = _as_tensor(probs)
    sim_dists = _as_tensor(sim_dists, probs.dtype)
    masked = _as_tensor(masked).bool()
    _check_shapes(probs, masked, sim_dists, "similarity distributions")
    return _masked_mean(kl_terms(probs, sim_dists, epsilon), masked)


def _weights_tensor(weights: CodebookWeights | Sequence[float] | None, n: int, like: torch.Tensor) -> torch.Tensor:
    if weights is None:
        return like.new_ones(n)
    values = weights.weights if isinstance(weights, CodebookWeights) else tuple(weights)
    if len(values) != n:
        raise LossShapeError(f"got {len(values)} codebook weights for {n} codebooks")
    return torch.as_tensor(values, dtype=like.dtype, device=like.device)


def combined_loss(
    probs: Any,
    targets: Any,
    sim_dists: Any | None,
    masked: Any,
    cfg: LossConfig | None = None,
    weights: CodebookWeights | Sequence[float] | None = None,
) -> LossReport:
    """w_ce * mean_n(w_n * CE_n) + w_kl * mean_n(w_n * KL_n).

    With w_kl == 0 the KL term is not evaluated at all, which is exactly the
    single-objective cross-entropy setup. ``objective`` keeps the autograd graph.
    """
    cfg = cfg or LossConfig()
    cfg.validate()
    probs = _as_tensor(probs)
    masked_t = _as_tensor(masked).bool()
    n = probs.shape[0]
    w = _weights_tensor(weights, n, probs)

    ce = ce_loss(probs, targets, masked_t, cfg.epsilon)
    objective = cfg.w_ce * (w * ce).mean()

    kl_skipped = cfg.w_kl == 0
    if kl_skipped:
        kl = probs.new_zeros(n)
    else:
        if sim_dists is None:
            raise LossShapeError("similarity distributions are required when w_kl > 0")
        kl = kl_loss(probs, sim_dists, masked_t, cfg.epsilon)
        objective = objective + cfg.w_kl * (w * kl).mean()

    return LossReport(
        ce_per_codebook=[float(v) for v in ce.detach().cpu().tolist()],
        kl_per_codebook=[float(v) for v in kl.detach().cpu().tolist()],
        applied_weights=[float(v) for v in w.detach().cpu().tolist()],
        total=float(objective.detach().item()),
        masked_positions=int(masked_t.sum().item()),
        kl_skipped=kl_skipped,
        objective=objective,
    )


def masked_accuracy(probs: Any, targets: Any, masked: Any) -> list[float]:
    """Per-codebook fraction of masked positions whose argmax equals the target."""
    probs = _as_tensor(probs)
    targets = _as_tensor(targets).long()
    masked_t = _as_tensor(masked).bool()
    _check_shapes(probs, masked_t, targets, "targets")
    hits = (probs.argmax(dim=-1) == targets).to(torch.float64)
    return [float(v) for v in _masked_mean(hits, masked_t).tolist()]
