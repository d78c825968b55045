"""Seed derivation shared by every random stream in the pipeline.

All randomness flows from explicit integer seeds. Independent streams are
separated by mixing a stream tag (and any indices) into the seed, so changing
one stream never perturbs another.
"""
from __future__ import annotations

import numpy as np

_U64 = 0xFFFF_FFFF_FFFF_FFFF

# Stream tags
STREAM_SYNTH = 11
STREAM_QUANTIZER = 23
STREAM_MASK = 31
STREAM_NOISE = 37
STREAM_KMEANS = 41
STREAM_ENCODER = 53
STREAM_DROPOUT = 59
STREAM_BATCHES = 61
STREAM_SPLIT = 67
STREAM_VAL_MASK = 71


def _entropy(parts: tuple[int, ...]) -> list[int]:
    if not parts:
        raise ValueError("At least one seed part is required")
    return [int(p) & _U64 for p in parts]


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a single 64-bit seed."""
    ss = np.random.SeedSequence(_entropy(parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_entropy(parts)))
