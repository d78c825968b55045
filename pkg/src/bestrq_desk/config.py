"""Run configuration: per-concern dataclasses, named presets and layered overrides.

Resolution order: defaults, then a preset, then a config file, then
``section.key=value`` overrides, then dedicated CLI flags. Config files are read
with ``yaml.safe_load``, so JSON documents load unchanged.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import yaml

from .clustering import codebook_weights
from .encoder import EncoderConfig
from .features import FrameConfig
from .losses import LossConfig
from .masking import NOISE_STD, TargetMaskMode
from .quantizer import QuantizerShape

DTYPES = ("float32", "float64")

# Encoder fields that mirror the quantizer/frame sections.
_DERIVED_ENCODER_KEYS = ("n_outputs", "vocab", "input_dim", "subsample_factor")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    n_codebooks: int = 1
    codebook_size: int = 8192
    codebook_dim: int = 16
    stack_factor: int = 4
    temperature: float = 1.0
    seed: int | None = None  # None: use the run seed

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_codebooks": self.n_codebooks,
            "codebook_size": self.codebook_size,
            "codebook_dim": self.codebook_dim,
            "stack_factor": self.stack_factor,
            "temperature": self.temperature,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MaskConfig:
    p_start: float = 0.15
    span: int = 4
    noise_std: float = NOISE_STD
    target_mode: str = TargetMaskMode.ANY.value

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_start": self.p_start,
            "span": self.span,
            "noise_std": self.noise_std,
            "target_mode": self.target_mode,
        }


@dataclass(frozen=True)
class TrainConfig:
    batch_utterances: int = 8
    steps: int = 1000
    lr_peak: float = 1e-3
    warmup_steps: int = 1000
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_clip_norm: float = 5.0
    seed: int = 0
    validate_every: int = 100
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    log_every: int = 10
    record_wall_time: bool = False
    dtype: str = "float32"
    workers: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_utterances": self.batch_utterances,
            "steps": self.steps,
            "lr_peak": self.lr_peak,
            "warmup_steps": self.warmup_steps,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "grad_clip_norm": self.grad_clip_norm,
            "seed": self.seed,
            "validate_every": self.validate_every,
            "val_fraction": self.val_fraction,
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
            "record_wall_time": self.record_wall_time,
            "dtype": self.dtype,
            "workers": self.workers,
        }


def _loss_to_dict(cfg: LossConfig) -> dict[str, Any]:
    return {
        "w_ce": cfg.w_ce,
        "w_kl": cfg.w_kl,
        "epsilon": cfg.epsilon,
        "cluster_weighting": cfg.cluster_weighting,
        "w_primary": cfg.w_primary,
        "w_secondary": cfg.w_secondary,
    }


@dataclass(frozen=True)
class RunConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def quantizer_seed(self) -> int:
        return self.train.seed if self.quantizer.seed is None else int(self.quantizer.seed)

    def quantizer_shape(self) -> QuantizerShape:
        q = self.quantizer
        return QuantizerShape(q.n_codebooks, q.codebook_size, q.codebook_dim, q.stack_factor, self.frame.n_mels)

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame": self.frame.to_dict(),
            "quantizer": self.quantizer.to_dict(),
            "mask": self.mask.to_dict(),
            "encoder": self.encoder.to_dict(),
            "loss": _loss_to_dict(self.loss),
            "train": self.train.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "RunConfig":
        cfg = _build(d)
        validate_config(cfg)
        return cfg

    def validate(self) -> None:
        validate_config(self)


_SECTIONS: dict[str, type] = {
    "frame": FrameConfig,
    "quantizer": QuantizerConfig,
    "mask": MaskConfig,
    "encoder": EncoderConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict[str, Any]] = {
    "baseline": {
        "quantizer": {"n_codebooks": 1, "codebook_size": 8192, "codebook_dim": 16},
        "loss": {"w_ce": 1.0, "w_kl": 0.0, "cluster_weighting": False},
    },
    "proposed": {
        "quantizer": {"n_codebooks": 6, "codebook_size": 8192, "codebook_dim": 16},
        "loss": {"w_ce": 1.0, "w_kl": 0.1, "cluster_weighting": True},
    },
    "best-single": {
        "quantizer": {"n_codebooks": 1, "codebook_size": 10240, "codebook_dim": 32},
        "loss": {"w_ce": 1.0, "w_kl": 0.0, "cluster_weighting": False},
    },
    "multi-codebook": {
        "quantizer": {"n_codebooks": 6, "codebook_size": 8192, "codebook_dim": 16},
        "loss": {"w_ce": 1.0, "w_kl": 0.0, "cluster_weighting": False},
    },
    "ce-kl": {
        "quantizer": {"n_codebooks": 1, "codebook_size": 8192, "codebook_dim": 16},
        "loss": {"w_ce": 1.0, "w_kl": 0.1, "cluster_weighting": False},
    },
    "kl-only": {
        "quantizer": {"n_codebooks": 1, "codebook_size": 8192, "codebook_dim": 16},
        "loss": {"w_ce": 0.0, "w_kl": 1.0, "cluster_weighting": False},
    },
}


def default_config_dict() -> dict[str, Any]:
    """Defaults as a nested dict; derived encoder keys are left out so they follow the quantizer."""
    d = RunConfig().to_dict()
    for key in _DERIVED_ENCODER_KEYS:
        d["encoder"].pop(key)
    return d


def merge_config(base: dict[str, Any], overlay: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for section, values in overlay.items():
        if isinstance(values, dict) and isinstance(out.get(section), dict):
            out[section].update(copy.deepcopy(values))
        else:
            out[section] = copy.deepcopy(values)
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: not valid JSON/YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: config must be a mapping of sections")
    return data


def parse_override(item: str) -> dict[str, Any]:
    """``section.key=value`` with the value parsed as a YAML scalar."""
    key, sep, raw = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    return {section: {name: yaml.safe_load(raw) if raw.strip() else None}}


def resolve_config(
    preset: str | None = None,
    config_path: str | Path | None = None,
    overrides: Iterable[str] = (),
    flags: dict[str, dict[str, Any]] | None = None,
) -> RunConfig:
    d = default_config_dict()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        d = merge_config(d, PRESETS[preset])
    if config_path is not None:
        d = merge_config(d, load_config_file(config_path))
    for item in overrides:
        d = merge_config(d, parse_override(item))
    if flags:
        d = merge_config(d, {s: {k: v for k, v in vals.items() if v is not None} for s, vals in flags.items()})
    return RunConfig.from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# Building and validation
# ---------------------------------------------------------------------------


def _section_kwargs(name: str, values: Any) -> dict[str, Any]:
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in fields(_SECTIONS[name])}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    return dict(values)


def _build(d: dict[str, Any]) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kw = {name: _section_kwargs(name, d.get(name, {})) for name in _SECTIONS}

    frame = FrameConfig(**kw["frame"])
    quantizer = QuantizerConfig(**kw["quantizer"])
    derived = {
        "n_outputs": quantizer.n_codebooks,
        "vocab": quantizer.codebook_size,
        "input_dim": frame.n_mels,
        "subsample_factor": quantizer.stack_factor,
    }
    enc_kw = kw["encoder"]
    for key, value in derived.items():
        if key in enc_kw and enc_kw[key] != value:
            raise ConfigError(f"encoder.{key}={enc_kw[key]} disagrees with the quantizer/frame value {value}")
        enc_kw[key] = value
    train_kw = kw["train"]
    if "adam_betas" in train_kw:
        betas = train_kw["adam_betas"]
        if not isinstance(betas, (list, tuple)) or len(betas) != 2:
            raise ConfigError("train.adam_betas must be a pair")
        train_kw["adam_betas"] = (float(betas[0]), float(betas[1]))
    try:
        return RunConfig(
            frame=frame,
            quantizer=quantizer,
            mask=MaskConfig(**kw["mask"]),
            encoder=EncoderConfig(**enc_kw),
            loss=LossConfig(**kw["loss"]),
            train=TrainConfig(**train_kw),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e


def validate_config(cfg: RunConfig) -> None:
    try:
        cfg.frame.validate()
        cfg.quantizer_shape().validate()
        cfg.encoder.validate()
        cfg.loss.validate()
        if cfg.loss.cluster_weighting:
            codebook_weights(0, cfg.quantizer.n_codebooks, cfg.loss.w_primary, cfg.loss.w_secondary)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e

    q, m, t = cfg.quantizer, cfg.mask, cfg.train
    if not q.temperature > 0:
        raise ConfigError("quantizer.temperature must be > 0")
    if q.stack_factor != cfg.encoder.subsample_factor:
        raise ConfigError(
            f"quantizer.stack_factor={q.stack_factor} must equal the encoder subsampling {cfg.encoder.subsample_factor}"
        )
    if not 0.0 <= m.p_start <= 1.0:
        raise ConfigError("mask.p_start must be in [0, 1]")
    if m.span < 1:
        raise ConfigError("mask.span must be >= 1")
    if not m.noise_std > 0:
        raise ConfigError("mask.noise_std must be > 0")
    if m.target_mode not in {mode.value for mode in TargetMaskMode}:
        raise ConfigError(f"mask.target_mode must be 'any' or 'all', got {m.target_mode!r}")

    if t.steps < 1:
        raise ConfigError("train.steps must be >= 1")
    if t.warmup_steps < 1:
        raise ConfigError("train.warmup_steps must be >= 1")
    if not t.lr_peak > 0:
        raise ConfigError("train.lr_peak must be > 0")
    if t.batch_utterances < 1:
        raise ConfigError("train.batch_utterances must be >= 1")
    if not all(0.0 <= b < 1.0 for b in t.adam_betas) or not t.adam_eps > 0:
        raise ConfigError("train.adam_betas must lie in [0, 1) and adam_eps must be > 0")
    if not t.grad_clip_norm > 0:
        raise ConfigError("train.grad_clip_norm must be > 0")
    if not 0.0 <= t.val_fraction < 1.0:
        raise ConfigError("train.val_fraction must be in [0, 1)")
    if t.validate_every < 0 or t.checkpoint_every < 0 or t.log_every < 1 or t.workers < 1:
        raise ConfigError("train.validate_every/checkpoint_every must be >= 0, log_every/workers >= 1")
    if t.dtype not in DTYPES:
        raise ConfigError(f"train.dtype must be one of {DTYPES}")
