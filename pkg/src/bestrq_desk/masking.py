from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .features import FeatureSequence
from .seeding import STREAM_MASK, STREAM_NOISE, make_rng

NOISE_STD = 0.1


class MaskError(ValueError):
    pass


class TargetMaskMode(str, Enum):
    ANY = "any"
    ALL = "all"


@dataclass(frozen=True)
class MaskSpec:
    masked_frames: np.ndarray  # sorted, unique frame indices
    n_frames: int
    seed: int
    p_start: float = 0.15
    span: int = 4

    def __post_init__(self) -> None:
        idx = np.asarray(self.masked_frames, dtype=np.int64).reshape(-1)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.n_frames):
            raise MaskError("masked frames must be strictly increasing and inside [0, T)")
        idx.setflags(write=False)
        object.__setattr__(self, "masked_frames", idx)

    @property
    def fraction(self) -> float:
        return self.masked_frames.size / self.n_frames

    def frame_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_frames, dtype=bool)
        mask[self.masked_frames] = True
        return mask


def sample_mask(n_frames: int, p_start: float = 0.15, span: int = 4, seed: int = 0) -> MaskSpec:
    """Every frame independently starts a span with probability p_start; spans may overlap."""
    if n_frames < 1:
        raise MaskError("T must be >= 1")
    if not (0.0 <= p_start <= 1.0):
        raise MaskError("p_start must be in [0, 1]")
    if span < 1:
        raise MaskError("span must be >= 1")
    rng = make_rng(seed, STREAM_MASK)
    starts = rng.random(n_frames) < p_start
    covered = np.convolve(starts.astype(np.int64), np.ones(span, dtype=np.int64))[:n_frames] > 0
    return MaskSpec(np.flatnonzero(covered), n_frames, int(seed), float(p_start), int(span))


def apply_mask(seq: FeatureSequence, mask: MaskSpec, noise_seed: int, noise_std: float = NOISE_STD) -> FeatureSequence:
    """Replace masked frames with fresh N(0, noise_std^2) draws; other frames are untouched."""
    idx = mask.masked_frames
    if idx.size and idx[-1] >= seq.num_frames:
        raise MaskError(f"mask index {int(idx[-1])} out of range for T={seq.num_frames}")
    data = np.array(seq.data, copy=True)
    if idx.size:
        rng = make_rng(noise_seed, STREAM_NOISE)
        data[idx] = rng.normal(0.0, noise_std, size=(idx.size, seq.dim))
    return FeatureSequence(data, seq.feature_kind, seq.frame_rate_hz)


def project_mask(
    mask: MaskSpec, stack_factor: int, mode: TargetMaskMode | str = TargetMaskMode.ANY
) -> np.ndarray:
    """Target-level mask: a stack counts as masked if any (or all) of its frames are masked."""
    mode = TargetMaskMode(mode)
    n_stacks = mask.n_frames // stack_factor
    frames = mask.frame_mask()[: n_stacks * stack_factor].reshape(n_stacks, stack_factor)
    if mode is TargetMaskMode.ANY:
        return frames.any(axis=1)
    return frames.all(axis=1)


def expected_mask_fraction(p_start: float, span: int) -> float:
    """Asymptotic masked fraction: a frame is covered unless none of the span starts before it fire."""
    return 1.0 - (1.0 - p_start) ** span
