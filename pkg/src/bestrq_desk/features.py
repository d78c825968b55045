"""Acoustic features: log-mel model inputs and the utterance-level clustering descriptors.

Every extractor shares the same framing, so for a signal of ``n`` samples all of
them return ``T = 1 + (n - frame_len) // hop`` frames.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .audio import Waveform

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

T = TypeVar("T")
R = TypeVar("R")


class FeatureError(ValueError):
    pass


class FeatureKind(str, Enum):
    LOG_MEL = "log_mel"
    MFCC = "mfcc"
    CONTRAST = "contrast"
    ROLLOFF = "rolloff"
    ZCR = "zcr"


@dataclass(frozen=True)
class FrameConfig:
    frame_len_samples: int = 400
    hop_samples: int = 160
    n_fft: int = 512
    n_mels: int = 80
    window: str = "hann"

    def validate(self) -> None:
        if self.hop_samples < 1:
            raise FeatureError("hop_samples must be >= 1")
        if self.frame_len_samples < 2:
            raise FeatureError("frame_len_samples must be >= 2")
        if not (self.hop_samples <= self.frame_len_samples <= self.n_fft):
            raise FeatureError("expected hop_samples <= frame_len_samples <= n_fft")
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "frame_len_samples": self.frame_len_samples,
            "hop_samples": self.hop_samples,
            "n_fft": self.n_fft,
            "n_mels": self.n_mels,
            "window": self.window,
        }


_FIXED_DIMS = {FeatureKind.ROLLOFF: 1, FeatureKind.ZCR: 1}


@dataclass(frozen=True)
class FeatureSequence:
    data: np.ndarray
    feature_kind: FeatureKind
    frame_rate_hz: float

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        kind = FeatureKind(self.feature_kind)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise FeatureError(f"{kind.value}: expected a non-empty T x D matrix, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FeatureError(f"{kind.value}: non-finite feature values")
        expected = _FIXED_DIMS.get(kind)
        if expected is not None and data.shape[1] != expected:
            raise FeatureError(f"{kind.value}: expected D={expected}, got {data.shape[1]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "feature_kind", kind)

    @property
    def num_frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class UtteranceSummary:
    vector: np.ndarray
    id: str

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise FeatureError(f"summary {self.id!r} has non-finite entries")
        object.__setattr__(self, "vector", vec)


# ---------------------------------------------------------------------------
# Framing and spectra
# ---------------------------------------------------------------------------


def num_frames(n_samples: int, cfg: FrameConfig) -> int:
    return 1 + (n_samples - cfg.frame_len_samples) // cfg.hop_samples


def frame_signal(samples: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    cfg.validate()
    x = np.asarray(samples, dtype=np.float64)
    if x.size < cfg.frame_len_samples:
        raise FeatureError(
            f"signal of {x.size} samples is shorter than one frame ({cfg.frame_len_samples})"
        )
    return sliding_window_view(x, cfg.frame_len_samples)[:: cfg.hop_samples]


@lru_cache(maxsize=16)
def _window(name: str, length: int) -> np.ndarray:
    w = get_window(name, length, fftbins=True).astype(np.float64)
    w.setflags(write=False)
    return w


def fft_frequencies(sample_rate: int, n_fft: int) -> np.ndarray:
    return scipy.fft.rfftfreq(n_fft, d=1.0 / sample_rate)


def magnitude_spectrum(wave: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Windowed, zero-padded magnitude spectrum, shape (T, n_fft // 2 + 1)."""
    frames = frame_signal(wave.samples, cfg) * _window(cfg.window, cfg.frame_len_samples)
    return np.abs(scipy.fft.rfft(frames, n=cfg.n_fft, axis=1))


def hz_to_mel(freq: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def _mel_points(sample_rate: int, n_mels: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), n_mels + 2))


def mel_center_frequencies(sample_rate: int, n_mels: int) -> np.ndarray:
    return _mel_points(sample_rate, n_mels)[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters from 0 Hz to Nyquist, shape (n_mels, n_fft // 2 + 1)."""
    hz = _mel_points(sample_rate, n_mels)
    bins = fft_frequencies(sample_rate, n_fft)
    lower = (bins[None, :] - hz[:-2, None]) / (hz[1:-1] - hz[:-2])[:, None]
    upper = (hz[2:, None] - bins[None, :]) / (hz[2:] - hz[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------


def log_mel_from_magnitude(mag: np.ndarray, sample_rate: int, cfg: FrameConfig) -> np.ndarray:
    energies = mag @ mel_filterbank(sample_rate, cfg.n_fft, cfg.n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def log_mel(wave: Waveform, cfg: FrameConfig | None = None) -> FeatureSequence:
    cfg = cfg or FrameConfig()
    mag = magnitude_spectrum(wave, cfg)
    return FeatureSequence(
        log_mel_from_magnitude(mag, wave.sample_rate_hz, cfg),
        FeatureKind.LOG_MEL,
        wave.sample_rate_hz / cfg.hop_samples,
    )


def mfcc_from_log_mel(log_mel_data: np.ndarray, n_coeffs: int = 13) -> np.ndarray:
    if n_coeffs > log_mel_data.shape[1]:
        raise FeatureError(f"n_coeffs={n_coeffs} exceeds n_mels={log_mel_data.shape[1]}")
    if n_coeffs < 1:
        raise FeatureError("n_coeffs must be >= 1")
    return scipy.fft.dct(log_mel_data, type=2, norm="ortho", axis=1)[:, :n_coeffs]


def mfcc(wave: Waveform, cfg: FrameConfig | None = None, n_coeffs: int = 13) -> FeatureSequence:
    cfg = cfg or FrameConfig()
    if n_coeffs > cfg.n_mels:
        raise FeatureError(f"n_coeffs={n_coeffs} exceeds n_mels={cfg.n_mels}")
    lm = log_mel(wave, cfg)
    return FeatureSequence(mfcc_from_log_mel(lm.data, n_coeffs), FeatureKind.MFCC, lm.frame_rate_hz)


def contrast_from_magnitude(
    mag: np.ndarray,
    sample_rate: int,
    n_fft: int,
    n_bands: int = 6,
    quantile: float = 0.02,
    fmin: float = 200.0,
) -> np.ndarray:
    """Per-band log peak/valley difference over a sub-band plus n_bands octaves above fmin."""
    if n_bands < 1:
        raise FeatureError("n_bands must be >= 1")
    if not (0.0 < quantile < 1.0):
        raise FeatureError("quantile must be in (0, 1)")
    edges = np.zeros(n_bands + 2)
    edges[1:] = fmin * (2.0 ** np.arange(n_bands + 1))
    if np.any(edges[:-1] >= sample_rate / 2.0):
        raise FeatureError("Frequency band exceeds Nyquist. Reduce fmin or n_bands.")

    freqs = fft_frequencies(sample_rate, n_fft)
    out = np.empty((mag.shape[0], n_bands + 1))
    for k in range(n_bands + 1):
        if k == n_bands:
            sel = freqs >= edges[k]
        else:
            sel = (freqs >= edges[k]) & (freqs < edges[k + 1])
        band = np.sort(mag[:, sel], axis=1)
        if band.shape[1] == 0:
            raise FeatureError(f"band {k} contains no FFT bins; increase n_fft")
        q = max(1, int(np.rint(quantile * band.shape[1])))
        valley = band[:, :q].mean(axis=1)
        peak = band[:, -q:].mean(axis=1)
        out[:, k] = np.log(np.maximum(peak, LOG_FLOOR)) - np.log(np.maximum(valley, LOG_FLOOR))
    return out


def spectral_contrast(
    wave: Waveform,
    cfg: FrameConfig | None = None,
    n_bands: int = 6,
    quantile: float = 0.02,
) -> FeatureSequence:
    cfg = cfg or FrameConfig()
    mag = magnitude_spectrum(wave, cfg)
    data = contrast_from_magnitude(mag, wave.sample_rate_hz, cfg.n_fft, n_bands, quantile)
    return FeatureSequence(data, FeatureKind.CONTRAST, wave.sample_rate_hz / cfg.hop_samples)


def rolloff_from_magnitude(mag: np.ndarray, sample_rate: int, n_fft: int, pct: float = 0.85) -> np.ndarray:
    """Lowest bin frequency holding pct of the frame's magnitude; all-zero frames give 0 Hz."""
    if not (0.0 < pct < 1.0):
        raise FeatureError("roll-off percentage must be in (0, 1)")
    freqs = fft_frequencies(sample_rate, n_fft)
    cumulative = np.cumsum(mag, axis=1)
    total = cumulative[:, -1]
    reached = cumulative >= pct * total[:, None]
    out = freqs[np.argmax(reached, axis=1)]
    return np.where(total > 0.0, out, 0.0)[:, None]


def spectral_rolloff(wave: Waveform, cfg: FrameConfig | None = None, pct: float = 0.85) -> FeatureSequence:
    cfg = cfg or FrameConfig()
    if not (0.0 < pct < 1.0):
        raise FeatureError("roll-off percentage must be in (0, 1)")
    mag = magnitude_spectrum(wave, cfg)
    data = rolloff_from_magnitude(mag, wave.sample_rate_hz, cfg.n_fft, pct)
    return FeatureSequence(data, FeatureKind.ROLLOFF, wave.sample_rate_hz / cfg.hop_samples)


def zero_crossing_rate(wave: Waveform, cfg: FrameConfig | None = None) -> FeatureSequence:
    cfg = cfg or FrameConfig()
    frames = frame_signal(wave.samples, cfg)
    negative = np.signbit(frames)
    crossings = np.count_nonzero(negative[:, 1:] != negative[:, :-1], axis=1)
    rate = crossings / (cfg.frame_len_samples - 1)
    return FeatureSequence(rate[:, None], FeatureKind.ZCR, wave.sample_rate_hz / cfg.hop_samples)


SUMMARY_BLOCKS = (FeatureKind.MFCC, FeatureKind.CONTRAST, FeatureKind.ROLLOFF, FeatureKind.ZCR)


def descriptor_sequences(
    wave: Waveform,
    cfg: FrameConfig | None = None,
    n_mfcc: int = 13,
    n_bands: int = 6,
    quantile: float = 0.02,
    rolloff_pct: float = 0.85,
) -> dict[FeatureKind, FeatureSequence]:
    """The four clustering descriptors, sharing one magnitude spectrum."""
    cfg = cfg or FrameConfig()
    if n_mfcc > cfg.n_mels:
        raise FeatureError(f"n_coeffs={n_mfcc} exceeds n_mels={cfg.n_mels}")
    rate = wave.sample_rate_hz / cfg.hop_samples
    mag = magnitude_spectrum(wave, cfg)
    sr = wave.sample_rate_hz
    lm = log_mel_from_magnitude(mag, sr, cfg)
    return {
        FeatureKind.MFCC: FeatureSequence(mfcc_from_log_mel(lm, n_mfcc), FeatureKind.MFCC, rate),
        FeatureKind.CONTRAST: FeatureSequence(
            contrast_from_magnitude(mag, sr, cfg.n_fft, n_bands, quantile), FeatureKind.CONTRAST, rate
        ),
        FeatureKind.ROLLOFF: FeatureSequence(
            rolloff_from_magnitude(mag, sr, cfg.n_fft, rolloff_pct), FeatureKind.ROLLOFF, rate
        ),
        FeatureKind.ZCR: zero_crossing_rate(wave, cfg),
    }


def utterance_summary(wave: Waveform, cfg: FrameConfig | None = None, **kwargs: Any) -> UtteranceSummary:
    """Temporal means of [MFCC, contrast, roll-off, ZCR], concatenated in that order."""
    seqs = descriptor_sequences(wave, cfg, **kwargs)
    vector = np.concatenate([seqs[kind].data.mean(axis=0) for kind in SUMMARY_BLOCKS])
    return UtteranceSummary(vector, wave.id)


def compute_feature(kind: FeatureKind | str, wave: Waveform, cfg: FrameConfig | None = None) -> FeatureSequence:
    kind = FeatureKind(kind)
    if kind is FeatureKind.LOG_MEL:
        return log_mel(wave, cfg)
    if kind is FeatureKind.MFCC:
        return mfcc(wave, cfg)
    if kind is FeatureKind.CONTRAST:
        return spectral_contrast(wave, cfg)
    if kind is FeatureKind.ROLLOFF:
        return spectral_rolloff(wave, cfg)
    return zero_crossing_rate(wave, cfg)


def extract_many(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Order-preserving map over utterances; results do not depend on ``workers``."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Global normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    count: int = 0

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise FeatureError("mean and std must have the same dimensionality")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "count": int(self.count)}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "NormStats":
        return NormStats(np.asarray(d["mean"]), np.asarray(d["std"]), int(d.get("count", 0)))


def compute_norm_stats(seqs: Iterable[FeatureSequence]) -> NormStats:
    """Two-pass per-dimension mean/std over every frame of the corpus."""
    blocks = [s.data for s in seqs]
    if not blocks:
        raise FeatureError("cannot compute normalization statistics of an empty corpus")
    dims = {b.shape[1] for b in blocks}
    if len(dims) != 1:
        raise FeatureError(f"inconsistent feature dimensionality across corpus: {sorted(dims)}")
    stacked = np.concatenate(blocks, axis=0)
    mean = stacked.mean(axis=0)
    std = np.sqrt(np.mean((stacked - mean) ** 2, axis=0))
    return NormStats(mean, std, int(stacked.shape[0]))


def normalize_global(seq: FeatureSequence, stats: NormStats | None = None) -> FeatureSequence:
    """Standardize per dimension; dimensions whose std is under the floor become zeros."""
    if stats is None:
        stats = compute_norm_stats([seq])
    if stats.dim != seq.dim:
        raise FeatureError(f"normalization stats have D={stats.dim}, features have D={seq.dim}")
    live = stats.std > STD_FLOOR
    scale = np.where(live, stats.std, 1.0)
    data = np.where(live, (seq.data - stats.mean) / scale, 0.0)
    return FeatureSequence(data, seq.feature_kind, seq.frame_rate_hz)


# ---------------------------------------------------------------------------
# Feature dumps
# ---------------------------------------------------------------------------


def write_feature_dump(items: Iterable[tuple[str, FeatureSequence]], path: str | Path) -> Path:
    """One block per utterance: a JSON header line, then row-major little-endian float32 rows."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        for utt_id, seq in items:
            header = {
                "id": utt_id,
                "kind": seq.feature_kind.value,
                "T": seq.num_frames,
                "D": seq.dim,
                "frame_rate": seq.frame_rate_hz,
            }
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())
    return p


def read_feature_dump(path: str | Path) -> list[tuple[str, FeatureSequence]]:
    out: list[tuple[str, FeatureSequence]] = []
    with Path(path).open("rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                break
            try:
                header = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise FeatureError(f"corrupt feature dump header in {path}: {e}") from e
            n_rows, n_cols = int(header["T"]), int(header["D"])
            payload = fh.read(4 * n_rows * n_cols)
            if len(payload) != 4 * n_rows * n_cols:
                raise FeatureError(f"truncated feature block for {header['id']!r} in {path}")
            data = np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols)
            out.append(
                (str(header["id"]), FeatureSequence(data, FeatureKind(header["kind"]), float(header["frame_rate"])))
            )
    return out
