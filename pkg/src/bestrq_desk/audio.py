"""Mono PCM audio, corpus manifests and deterministic synthetic corpora.

Only RIFF/WAVE 16-bit mono PCM is accepted. Synthetic corpora stand in for a
real speech dataset at desk scale; the repeating tone-pattern family is the
learnability fixture used by the training tests.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import soundfile as sf

from .seeding import STREAM_SYNTH, make_rng

log = logging.getLogger(__name__)

PCM16_SCALE = 32768.0
SIGNAL_FAMILIES = ("tone", "harmonic", "noise", "pattern")

_PATTERN_TAG = 7


class WavFormatError(ValueError):
    """Base class for files that are not 16-bit mono PCM WAV."""


class WavHeaderError(WavFormatError):
    pass


class WavEncodingError(WavFormatError):
    pass


class WavChannelError(WavFormatError):
    pass


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CorpusRecipeError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000
    id: str = "utt"

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("Waveform samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"Waveform {self.id!r} contains non-finite samples")
        if np.any(np.abs(samples) > 1.0):
            raise ValueError(f"Waveform {self.id!r} has amplitudes outside [-1, 1]")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample_rate_hz must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    duration_s: float
    cluster: int | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("Manifest entry id must be non-empty")
        if not (self.duration_s > 0):
            raise ValueError(f"Manifest entry {self.id!r}: duration_s must be > 0")
        if self.cluster is not None and int(self.cluster) < 0:
            raise ValueError(f"Manifest entry {self.id!r}: cluster must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "path": self.path,
            "duration_s": float(self.duration_s),
            "cluster": None if self.cluster is None else int(self.cluster),
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ManifestEntry":
        cluster = d.get("cluster")
        return ManifestEntry(
            id=str(d["id"]),
            path=str(d["path"]),
            duration_s=float(d["duration_s"]),
            cluster=None if cluster is None else int(cluster),
        )

    def with_cluster(self, cluster: int | None) -> "ManifestEntry":
        return ManifestEntry(self.id, self.path, self.duration_s, cluster)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path: str | Path) -> Waveform:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"WAV file not found: {p}")

    with p.open("rb") as fh:
        head = fh.read(12)
    if len(head) < 12:
        raise WavHeaderError(f"{p}: truncated RIFF header ({len(head)} bytes)")
    if head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise WavHeaderError(f"{p}: not a RIFF/WAVE container")

    try:
        info = sf.info(str(p))
    except RuntimeError as e:
        raise WavHeaderError(f"{p}: unreadable WAV header: {e}") from e

    if info.subtype != "PCM_16":
        raise WavEncodingError(f"{p}: expected 16-bit integer PCM, found {info.subtype}")
    if info.channels != 1:
        raise WavChannelError(f"{p}: expected mono audio, found {info.channels} channels")

    data, sample_rate = sf.read(str(p), dtype="int16", always_2d=False)
    if data.size == 0:
        raise WavHeaderError(f"{p}: no audio frames in data chunk")
    return Waveform(
        samples=data.astype(np.float64) / PCM16_SCALE,
        sample_rate_hz=int(sample_rate),
        id=p.stem,
    )


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def write_wav(wave: Waveform, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(p), to_pcm16(wave.samples), wave.sample_rate_hz, subtype="PCM_16", format="WAV")
    return p


# ---------------------------------------------------------------------------
# Manifests (JSON Lines)
# ---------------------------------------------------------------------------


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    p = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ManifestError(f"malformed JSON ({e.msg})", line=lineno) from e
        if not isinstance(data, dict):
            raise ManifestError("expected a JSON object", line=lineno)
        try:
            entry = ManifestEntry.from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"invalid entry: {e}", line=lineno) from e
        if entry.id in seen:
            raise ManifestError(f"duplicate id {entry.id!r}", line=lineno)
        seen.add(entry.id)
        entries.append(entry)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> Path:
    p = Path(path)
    items = list(entries)
    ids = [e.id for e in items]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate ids in manifest entries")
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(e.to_dict(), ensure_ascii=False) for e in items]
    p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return p


def resolve_audio_path(entry: ManifestEntry, manifest_path: str | Path) -> Path:
    """Relative entry paths are resolved against the manifest's directory."""
    audio = Path(entry.path)
    if audio.is_absolute():
        return audio
    return Path(manifest_path).parent / audio


def load_corpus(manifest_path: str | Path) -> list[tuple[ManifestEntry, Waveform]]:
    out: list[tuple[ManifestEntry, Waveform]] = []
    for entry in read_manifest(manifest_path):
        wave = load_wav(resolve_audio_path(entry, manifest_path))
        out.append((entry, Waveform(wave.samples, wave.sample_rate_hz, entry.id)))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusRecipe:
    n_utterances: int
    seed: int
    duration_s: float = 2.0
    families: tuple[str, ...] = SIGNAL_FAMILIES
    sample_rate_hz: int = 16000
    noise_floor: float = 1e-3
    tone_hz: float | None = None
    pattern_tones: int = 4
    pattern_segment_samples: int = 1280

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise CorpusRecipeError("n_utterances must be >= 1")
        if not (self.duration_s > 0):
            raise CorpusRecipeError("duration_s must be > 0")
        if self.sample_rate_hz <= 0:
            raise CorpusRecipeError("sample_rate_hz must be positive")
        if not self.families:
            raise CorpusRecipeError("at least one signal family is required")
        unknown = [f for f in self.families if f not in SIGNAL_FAMILIES]
        if unknown:
            raise CorpusRecipeError(
                f"unknown signal family {unknown[0]!r}; expected one of {', '.join(SIGNAL_FAMILIES)}"
            )
        if self.seed < 0 or self.seed >= 2**64:
            raise CorpusRecipeError("seed must be a 64-bit unsigned integer")
        if self.pattern_tones < 1 or self.pattern_segment_samples < 1:
            raise CorpusRecipeError("pattern_tones and pattern_segment_samples must be >= 1")


@dataclass
class SynthCorpus:
    waves: list[Waveform]
    entries: list[ManifestEntry] = field(default_factory=list)


def _tone(rng: np.random.Generator, t: np.ndarray, freq: float | None) -> np.ndarray:
    f = float(freq) if freq is not None else rng.uniform(100.0, 4000.0)
    amp = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0.0, 2 * math.pi)
    return amp * np.sin(2 * math.pi * f * t + phase)


def _harmonic(rng: np.random.Generator, t: np.ndarray, sr: int) -> np.ndarray:
    f0 = rng.uniform(80.0, 400.0)
    n_harm = int(rng.integers(3, 9))
    out = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        if h * f0 >= sr / 2:
            break
        out += np.sin(2 * math.pi * h * f0 * t + rng.uniform(0.0, 2 * math.pi)) / h
    peak = np.max(np.abs(out))
    return rng.uniform(0.3, 0.8) * out / peak


def _band_noise(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    low = rng.uniform(100.0, 3000.0)
    high = min(low + rng.uniform(200.0, 3000.0), sr / 2 - 1.0)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spectrum[(freqs < low) | (freqs > high)] = 0.0
    out = np.fft.irfft(spectrum, n=n)
    peak = np.max(np.abs(out))
    if peak == 0.0:
        return out
    return rng.uniform(0.3, 0.8) * out / peak


def _pattern(rng: np.random.Generator, n: int, sr: int, tones: np.ndarray, seg: int, hop_unit: int) -> np.ndarray:
    # Phase resets at each segment so every period is sample-identical.
    period = seg * tones.size
    offset = int(rng.integers(0, max(1, period // hop_unit))) * hop_unit
    pos = np.arange(n) + offset
    idx = (pos // seg) % tones.size
    local = (pos % seg) / sr
    return 0.6 * np.sin(2 * math.pi * tones[idx] * local)


def synth_corpus(recipe: CorpusRecipe) -> SynthCorpus:
    """Generate a corpus that is a pure function of the recipe."""
    recipe.validate()
    sr = recipe.sample_rate_hz
    n = int(round(recipe.duration_s * sr))
    if n < 1:
        raise CorpusRecipeError("duration_s is shorter than one sample")
    t = np.arange(n) / sr

    pattern_rng = make_rng(recipe.seed, STREAM_SYNTH, _PATTERN_TAG)
    tones = np.sort(pattern_rng.uniform(200.0, 3000.0, size=recipe.pattern_tones))
    # Pattern offsets move in whole 4-frame stacks (4 x 10 ms hop at 16 kHz).
    hop_unit = max(1, int(round(0.04 * sr)))

    corpus = SynthCorpus(waves=[])
    for i in range(recipe.n_utterances):
        family = recipe.families[i % len(recipe.families)]
        rng = make_rng(recipe.seed, STREAM_SYNTH, i)
        if family == "tone":
            signal = _tone(rng, t, recipe.tone_hz)
        elif family == "harmonic":
            signal = _harmonic(rng, t, sr)
        elif family == "noise":
            signal = _band_noise(rng, n, sr)
        else:
            signal = _pattern(rng, n, sr, tones, recipe.pattern_segment_samples, hop_unit)
        if recipe.noise_floor > 0:
            signal = signal + rng.normal(0.0, recipe.noise_floor, size=n)
        utt_id = f"utt{i:05d}"
        wave = Waveform(np.clip(signal, -1.0, 1.0), sr, utt_id)
        corpus.waves.append(wave)
        corpus.entries.append(ManifestEntry(utt_id, f"{utt_id}.wav", wave.duration_s))
    log.debug("Synthesized %d utterances (seed=%d)", recipe.n_utterances, recipe.seed)
    return corpus


def write_corpus(corpus: SynthCorpus, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for wave, entry in zip(corpus.waves, corpus.entries):
        write_wav(wave, out / entry.path)
    return write_manifest(corpus.entries, out / manifest_name)
