"""Diagnostics: codebook utilization over token files, mask coverage, run comparison."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .masking import expected_mask_fraction, sample_mask
from .seeding import derive_seed


# ---------------------------------------------------------------------------
# Token files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenRecord:
    id: str
    codebook_size: int
    targets: np.ndarray  # (N, T')

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "codebook_size": self.codebook_size, "targets": self.targets.tolist()}

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "TokenRecord":
        targets = np.asarray(d["targets"], dtype=np.int64)
        if targets.ndim != 2:
            raise ValueError(f"token record {d.get('id')!r}: targets must be N arrays of equal length")
        return TokenRecord(str(d["id"]), int(d["codebook_size"]), targets)


def write_tokens(records: Sequence[TokenRecord], path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(json.dumps(r.to_dict()) + "\n" for r in records), encoding="utf-8")
    return p


def read_tokens(path: str | Path) -> list[TokenRecord]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"token file not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(TokenRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{p}:{lineno}: malformed token record: {e}") from e
    return out


# ---------------------------------------------------------------------------
# Codebook utilization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodebookUsage:
    codebook: int
    tokens: int
    used_codes: int
    utilization: float
    entropy_nats: float
    perplexity: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "codebook": self.codebook,
            "tokens": self.tokens,
            "used_codes": self.used_codes,
            "utilization": self.utilization,
            "entropy_nats": self.entropy_nats,
            "perplexity": self.perplexity,
        }


def entropy_nats(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def codebook_usage(records: Sequence[TokenRecord], codebook_size: int | None = None) -> list[CodebookUsage]:
    """Per-codebook used-code count, utilization, entropy and perplexity."""
    if not records:
        raise ValueError("no token records to summarize")
    sizes = {r.codebook_size for r in records}
    v = codebook_size if codebook_size is not None else max(sizes)
    n_books = {r.targets.shape[0] for r in records}
    if len(n_books) != 1:
        raise ValueError(f"records disagree on the number of codebooks: {sorted(n_books)}")
    n = n_books.pop()
    out = []
    for c in range(n):
        tokens = np.concatenate([r.targets[c] for r in records])
        if tokens.size and (tokens.min() < 0 or tokens.max() >= v):
            raise ValueError(f"codebook {c}: token outside [0, {v})")
        counts = np.bincount(tokens, minlength=v)
        h = entropy_nats(counts)
        used = int(np.count_nonzero(counts))
        out.append(CodebookUsage(c, int(tokens.size), used, used / v, h, math.exp(h)))
    return out


# ---------------------------------------------------------------------------
# Mask coverage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskCoverage:
    p_start: float
    span: int
    n_frames: int
    n_seeds: int
    empirical: float
    expected: float
    std_across_seeds: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_start": self.p_start,
            "span": self.span,
            "n_frames": self.n_frames,
            "n_seeds": self.n_seeds,
            "empirical": self.empirical,
            "expected": self.expected,
            "std_across_seeds": self.std_across_seeds,
        }


def mask_coverage(
    p_start: float = 0.15, span: int = 4, n_frames: int = 10_000, n_seeds: int = 200, seed: int = 0
) -> MaskCoverage:
    """Monte-Carlo masked fraction against the closed form 1 - (1 - p)^span."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    fractions = np.array(
        [sample_mask(n_frames, p_start, span, derive_seed(seed, i)).fraction for i in range(n_seeds)]
    )
    return MaskCoverage(
        p_start, span, n_frames, n_seeds,
        float(fractions.mean()), expected_mask_fraction(p_start, span), float(fractions.std()),
    )


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveSummary:
    label: str
    steps: list[int]
    totals: list[float]
    normalized: list[float]

    def value_at(self, step: int) -> float:
        return self.normalized[self.steps.index(step)]


@dataclass(frozen=True)
class Comparison:
    a: CurveSummary
    b: CurveSummary
    final_step: int
    lower: str  # label of the run with the lower normalized value, or "tie"

    def to_dict(self) -> dict[str, Any]:
        return {
            "final_step": self.final_step,
            "lower": self.lower,
            "runs": {
                c.label: {
                    "steps": c.steps,
                    "total": c.totals,
                    "normalized": c.normalized,
                    "final_normalized": c.value_at(self.final_step),
                }
                for c in (self.a, self.b)
            },
        }


def validation_curve(records: Sequence[dict[str, Any]], label: str) -> CurveSummary:
    """Validation totals divided by the first validation total."""
    val = sorted((int(r["step"]), float(r["total"])) for r in records if r.get("phase") == "val")
    if not val:
        raise ValueError(f"{label}: metrics log has no validation records")
    first = val[0][1]
    if first == 0:
        raise ValueError(f"{label}: first validation total is zero, cannot normalize")
    return CurveSummary(label, [s for s, _ in val], [t for _, t in val], [t / first for _, t in val])


def compare_runs(
    records_a: Sequence[dict[str, Any]],
    records_b: Sequence[dict[str, Any]],
    label_a: str = "a",
    label_b: str = "b",
) -> Comparison:
    a = validation_curve(records_a, label_a)
    b = validation_curve(records_b, label_b)
    common = sorted(set(a.steps) & set(b.steps))
    if not common:
        raise ValueError("the two runs share no validation step")
    final = common[-1]
    va, vb = a.value_at(final), b.value_at(final)
    lower = "tie" if va == vb else (label_a if va < vb else label_b)
    return Comparison(a, b, final, lower)
