"""``BRQ1`` checkpoint container.

Layout: the magic bytes ``BRQ1``; a little-endian u64 length and a JSON metadata
block (run config, step, quantizer seed/shape, normalization stats, cluster
model); a u64 length and a JSON tensor index of ``{name, dtype, shape, offset}``
entries; then raw little-endian float32 tensor data. Offsets are relative to
the start of the data section.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .clustering import ClusterModel
from .encoder import Encoder, EncoderConfig, build_encoder
from .features import NormStats

log = logging.getLogger(__name__)

MAGIC = b"BRQ1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = "<f4"

_ADAM_KEYS = ("exp_avg", "exp_avg_sq", "step")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    encoder_config: EncoderConfig
    parameters: dict[str, np.ndarray]
    step: int
    norm_stats: NormStats
    quantizer: dict[str, Any]  # seed + shape; matrices are regenerated
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    cluster_model: ClusterModel | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def metadata(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "step": int(self.step),
            "config": self.config,
            "encoder_config": self.encoder_config.to_dict(),
            "quantizer": self.quantizer,
            "norm_stats": self.norm_stats.to_dict(),
            "cluster_model": self.cluster_model.to_dict() if self.cluster_model is not None else None,
            "extra": self.extra,
        }


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().to(torch.float32).numpy()


def encoder_parameters(encoder: Encoder) -> dict[str, np.ndarray]:
    return {name: _to_numpy(t) for name, t in encoder.state_dict().items()}


def optimizer_tensors(encoder: Encoder, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Adam moments keyed by parameter name, so the table survives module reordering."""
    names = [name for name, p in encoder.named_parameters() if p.requires_grad]
    params = [p for name, p in encoder.named_parameters() if p.requires_grad]
    out: dict[str, np.ndarray] = {}
    for name, p in zip(names, params):
        state = optimizer.state.get(p, {})
        for key in _ADAM_KEYS:
            if key in state:
                value = state[key]
                value = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
                out[f"adam.{name}.{key}"] = _to_numpy(value)
    return out


def load_optimizer_tensors(encoder: Encoder, optimizer: torch.optim.Optimizer, table: dict[str, np.ndarray]) -> None:
    named = [(name, p) for name, p in encoder.named_parameters() if p.requires_grad]
    state: dict[int, dict[str, torch.Tensor]] = {}
    for idx, (name, p) in enumerate(named):
        entry = {}
        for key in _ADAM_KEYS:
            arr = table.get(f"adam.{name}.{key}")
            if arr is None:
                continue
            t = torch.from_numpy(np.array(arr))
            entry[key] = t.to(torch.float32) if key == "step" else t.to(p.dtype)
        if entry:
            if set(entry) != set(_ADAM_KEYS):
                raise CheckpointError(f"incomplete optimizer state for {name}")
            state[idx] = entry
    sd = optimizer.state_dict()
    optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tensors = {**ckpt.parameters, **ckpt.optimizer_state}

    index: list[dict[str, Any]] = []
    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        index.append({"name": name, "dtype": "float32", "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(data)
        offset += len(data)

    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    idx = json.dumps(index).encode("utf-8")
    tmp = p.with_suffix(p.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(meta)))
        f.write(meta)
        f.write(_LEN.pack(len(idx)))
        f.write(idx)
        for blob in blobs:
            f.write(blob)
    tmp.replace(p)
    log.debug("Wrote checkpoint %s (step %d, %d tensors)", p, ckpt.step, len(index))
    return p


def _read_block(buf: bytes, pos: int, what: str) -> tuple[Any, int]:
    if pos + _LEN.size > len(buf):
        raise CheckpointError(f"truncated checkpoint: missing {what} length")
    (n,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} block is incomplete")
    try:
        return json.loads(buf[pos : pos + n].decode("utf-8")), pos + n
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt {what} block: {e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    buf = p.read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{p}: not a BRQ1 checkpoint")
    meta, pos = _read_block(buf, len(MAGIC), "metadata")
    index, pos = _read_block(buf, pos, "tensor index")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{p}: unsupported format version {meta.get('format_version')!r}")

    data = memoryview(buf)[pos:]
    tensors: dict[str, np.ndarray] = {}
    for entry in index:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        end = start + 4 * count
        if end > len(data):
            raise CheckpointError(f"{p}: tensor {entry['name']!r} runs past the end of the file")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype=_DTYPE).reshape(shape).astype(np.float32)

    cluster = meta.get("cluster_model")
    return Checkpoint(
        config=meta["config"],
        encoder_config=EncoderConfig.from_dict(meta["encoder_config"]),
        parameters={k: v for k, v in tensors.items() if not k.startswith("adam.")},
        optimizer_state={k: v for k, v in tensors.items() if k.startswith("adam.")},
        step=int(meta["step"]),
        norm_stats=NormStats.from_dict(meta["norm_stats"]),
        quantizer=meta["quantizer"],
        cluster_model=ClusterModel.from_dict(cluster) if cluster is not None else None,
        extra=meta.get("extra", {}),
    )


def encoder_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> Encoder:
    encoder = build_encoder(ckpt.encoder_config, seed=0, dtype=dtype)
    expected = set(encoder.state_dict())
    missing = expected - set(ckpt.parameters)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(sorted(missing))}")
    state = {name: torch.from_numpy(np.array(ckpt.parameters[name])).to(dtype) for name in expected}
    encoder.load_state_dict(state)
    encoder.version = int(ckpt.step)
    return encoder
