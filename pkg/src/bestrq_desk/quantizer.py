"""Fixed random-projection quantizer bank.

N independent (projection, codebook) pairs map stacked, globally normalized
log-mel frames to discrete targets by cosine similarity. The bank is never
trained: checkpoints store only the seed and shape, and the matrices are
regenerated bit-identically on load.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import softmax

from .features import FeatureKind, FeatureSequence
from .seeding import STREAM_QUANTIZER, make_rng

STUDIED_SIZES = (4096, 8192, 10240)
STUDIED_DIMS = (16, 32, 64)
STUDIED_CODEBOOK_COUNTS = (1, 2, 4, 6, 8, 10)

_NORM_FLOOR = 1e-12


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerShape:
    n_codebooks: int = 1
    codebook_size: int = 8192
    codebook_dim: int = 16
    stack_factor: int = 4
    input_dim: int = 80

    def validate(self) -> None:
        for name in ("n_codebooks", "codebook_size", "codebook_dim", "stack_factor", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise QuantizerError(f"{name} must be >= 1")

    @property
    def stacked_dim(self) -> int:
        return self.stack_factor * self.input_dim

    def to_dict(self) -> dict[str, int]:
        return {
            "n_codebooks": self.n_codebooks,
            "codebook_size": self.codebook_size,
            "codebook_dim": self.codebook_dim,
            "stack_factor": self.stack_factor,
            "input_dim": self.input_dim,
        }


@dataclass(frozen=True)
class QuantizerBank:
    shape: QuantizerShape
    seed: int
    projections: tuple[np.ndarray, ...]
    codebooks: tuple[np.ndarray, ...]

    @property
    def n_codebooks(self) -> int:
        return self.shape.n_codebooks

    @property
    def codebook_size(self) -> int:
        return self.shape.codebook_size

    @property
    def codebook_dim(self) -> int:
        return self.shape.codebook_dim

    @property
    def stack_factor(self) -> int:
        return self.shape.stack_factor

    @property
    def input_dim(self) -> int:
        return self.shape.input_dim

    def checksum(self) -> str:
        h = hashlib.sha256()
        for mat in (*self.projections, *self.codebooks):
            h.update(np.ascontiguousarray(mat).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {"seed": int(self.seed), **self.shape.to_dict()}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "QuantizerBank":
        return init_bank(
            seed=int(d["seed"]),
            n_codebooks=int(d["n_codebooks"]),
            codebook_size=int(d["codebook_size"]),
            codebook_dim=int(d["codebook_dim"]),
            stack_factor=int(d["stack_factor"]),
            input_dim=int(d["input_dim"]),
        )


@dataclass(frozen=True)
class TargetSequence:
    indices: np.ndarray  # (N, T') int64

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise QuantizerError(f"target indices must be N x T', got shape {idx.shape}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def length(self) -> int:
        return int(self.indices.shape[1])

    def check_range(self, codebook_size: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= codebook_size):
            raise QuantizerError(f"target index outside [0, {codebook_size})")


def _frozen(mat: np.ndarray) -> np.ndarray:
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    mat.setflags(write=False)
    return mat


def init_bank(
    seed: int,
    n_codebooks: int = 1,
    codebook_size: int = 8192,
    codebook_dim: int = 16,
    stack_factor: int = 4,
    input_dim: int = 80,
) -> QuantizerBank:
    """Draw N (projection, codebook) pairs from independent seed-derived substreams.

    Projections are Xavier-uniform; codebooks are standard normal with unit-norm rows.
    Each substream mixes in the full shape, so banks of different shapes share no draws.
    """
    shape = QuantizerShape(n_codebooks, codebook_size, codebook_dim, stack_factor, input_dim)
    shape.validate()
    if seed < 0 or seed >= 2**64:
        raise QuantizerError("seed must be a 64-bit unsigned integer")

    fan_in, fan_out = shape.stacked_dim, codebook_dim
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    projections: list[np.ndarray] = []
    codebooks: list[np.ndarray] = []
    for n in range(n_codebooks):
        rng = make_rng(
            seed, STREAM_QUANTIZER, n_codebooks, codebook_size, codebook_dim, stack_factor, input_dim, n
        )
        projections.append(_frozen(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        book = rng.standard_normal(size=(codebook_size, codebook_dim))
        book /= np.linalg.norm(book, axis=1, keepdims=True)
        codebooks.append(_frozen(book))
    return QuantizerBank(shape, int(seed), tuple(projections), tuple(codebooks))


def stack_frames(data: np.ndarray, stack_factor: int) -> np.ndarray:
    """Group consecutive non-overlapping stacks of frames; the trailing remainder is dropped."""
    n_stacks = data.shape[0] // stack_factor
    if n_stacks < 1:
        raise QuantizerError(f"need at least {stack_factor} frames to form one stack, got {data.shape[0]}")
    return data[: n_stacks * stack_factor].reshape(n_stacks, stack_factor * data.shape[1])


def project(bank: QuantizerBank, seq: FeatureSequence | np.ndarray) -> np.ndarray:
    """Stacked frames through every projection, shape (N, T', d)."""
    data = seq.data if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if isinstance(seq, FeatureSequence) and seq.feature_kind is not FeatureKind.LOG_MEL:
        raise QuantizerError(f"quantizer expects log_mel features, got {seq.feature_kind.value}")
    if data.ndim != 2 or data.shape[1] != bank.input_dim:
        raise QuantizerError(f"expected T x {bank.input_dim} features, got shape {data.shape}")
    stacked = stack_frames(data, bank.stack_factor)
    return np.stack([stacked @ a for a in bank.projections])


def cosine_similarities(bank: QuantizerBank, projected: np.ndarray) -> np.ndarray:
    """Cosine similarity of every projected vector to every codebook row, shape (N, T', V)."""
    projected = np.asarray(projected, dtype=np.float64)
    if projected.ndim != 3 or projected.shape[0] != bank.n_codebooks or projected.shape[2] != bank.codebook_dim:
        raise QuantizerError(
            f"expected projected shape (N={bank.n_codebooks}, T', d={bank.codebook_dim}), got {projected.shape}"
        )
    norms = np.maximum(np.linalg.norm(projected, axis=2, keepdims=True), _NORM_FLOOR)
    unit = projected / norms
    return np.stack([unit[n] @ bank.codebooks[n].T for n in range(bank.n_codebooks)])


def nearest_codes(bank: QuantizerBank, projected: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest index.
    return np.argmax(cosine_similarities(bank, projected), axis=2)


def quantize(bank: QuantizerBank, seq: FeatureSequence | np.ndarray) -> tuple[TargetSequence, np.ndarray]:
    projected = project(bank, seq)
    return TargetSequence(nearest_codes(bank, projected)), projected


def similarity_distribution(bank: QuantizerBank, projected: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over cosine similarities / temperature, shape (N, T', V)."""
    if not (temperature > 0):
        raise QuantizerError("temperature must be > 0")
    return softmax(cosine_similarities(bank, projected) / temperature, axis=2)
