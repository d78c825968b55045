from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from bestrq_desk.audio import CorpusRecipe, Waveform, synth_corpus, write_corpus
from bestrq_desk.config import RunConfig, resolve_config

TOY_OVERRIDES = (
    "quantizer.n_codebooks=2",
    "quantizer.codebook_size=64",
    "quantizer.codebook_dim=16",
    "encoder.n_layers=1",
    "encoder.d_model=32",
    "encoder.n_heads=2",
    "encoder.conv_kernel=7",
    "encoder.dropout=0.1",
    "loss.w_kl=0.1",
    "train.steps=4",
    "train.batch_utterances=3",
    "train.warmup_steps=10",
    "train.validate_every=2",
    "train.val_fraction=0.25",
    "train.log_every=1",
    "train.seed=7",
)


def toy_config(*extra: str, preset: str | None = None) -> RunConfig:
    return resolve_config(preset=preset, overrides=TOY_OVERRIDES + tuple(extra))


@pytest.fixture
def toy_cfg() -> RunConfig:
    return toy_config()


def write_toy_corpus(out_dir: Path, n: int = 8, seed: int = 3, duration_s: float = 0.5, **kwargs) -> Path:
    corpus = synth_corpus(CorpusRecipe(n_utterances=n, seed=seed, duration_s=duration_s, **kwargs))
    return write_corpus(corpus, out_dir)


@pytest.fixture
def toy_manifest(tmp_path: Path) -> Path:
    return write_toy_corpus(tmp_path / "corpus")


def sine(freq: float, n: int = 16000, sr: int = 16000, amp: float = 0.5, id: str = "sine") -> Waveform:
    t = np.arange(n) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr, id)
