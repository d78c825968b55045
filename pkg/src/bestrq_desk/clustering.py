"""Utterance clustering on descriptor summaries and cluster-specific codebook weights.

Summaries are standardized per dimension before k-means because the descriptor
families have incommensurate units (cepstra, log ratios, Hz, rates). The
standardization is stored with the model so assignment reuses it.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .features import STD_FLOOR, NormStats, UtteranceSummary
from .seeding import STREAM_KMEANS, make_rng

log = logging.getLogger(__name__)

# Relative slack for the per-iteration inertia check (floating-point reduction noise).
_INERTIA_SLACK = 1e-9


class ClusteringError(ValueError):
    pass


class WeightRatioError(ClusteringError):
    pass


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, D) in standardized space
    feature_stats: NormStats
    assignments: dict[str, int]
    seed: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.centroids, dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "seed": int(self.seed),
            "feature_stats": {"mean": self.feature_stats.mean.tolist(), "std": self.feature_stats.std.tolist()},
            "centroids": self.centroids.reshape(-1).tolist(),
            "assignments": {k: int(v) for k, v in sorted(self.assignments.items())},
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ClusterModel":
        k = int(d["k"])
        stats = NormStats(np.asarray(d["feature_stats"]["mean"]), np.asarray(d["feature_stats"]["std"]))
        centroids = np.asarray(d["centroids"], dtype=np.float64).reshape(k, stats.dim)
        assignments = {str(key): int(v) for key, v in d.get("assignments", {}).items()}
        bad = [u for u, c in assignments.items() if not 0 <= c < k]
        if bad:
            raise ClusteringError(f"assignment of {bad[0]!r} is outside [0, {k})")
        return ClusterModel(centroids, stats, assignments, int(d["seed"]))


def save_cluster_model(model: ClusterModel, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")
    return p


def load_cluster_model(path: str | Path) -> ClusterModel:
    return ClusterModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _standardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    live = stats.std > STD_FLOOR
    return np.where(live, (x - stats.mean) / np.where(live, stats.std, 1.0), 0.0)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # All remaining points coincide with a chosen centroid.
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_distances(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _summary_matrix(summaries: Sequence[UtteranceSummary]) -> np.ndarray:
    dims = {s.vector.size for s in summaries}
    if len(dims) != 1:
        raise ClusteringError(f"summaries have inconsistent dimensionality: {sorted(dims)}")
    return np.stack([s.vector for s in summaries])


def fit_kmeans(
    summaries: Sequence[UtteranceSummary],
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding on standardized summaries.

    Stops when the largest centroid shift drops below ``tol`` or after ``max_iters``.
    Empty clusters are reseeded with the point farthest from its own centroid.
    """
    if k < 1:
        raise ClusteringError("k must be >= 1")
    if len(summaries) < k:
        raise ClusteringError(f"need at least k={k} summaries, got {len(summaries)}")
    ids = [s.id for s in summaries]
    if len(set(ids)) != len(ids):
        raise ClusteringError("summary ids must be unique")

    raw = _summary_matrix(summaries)
    mean = raw.mean(axis=0)
    stats = NormStats(mean, np.sqrt(np.mean((raw - mean) ** 2, axis=0)), raw.shape[0])
    x = _standardize(raw, stats)

    rng = make_rng(seed, STREAM_KMEANS)
    centroids = _kmeans_pp(x, k, rng)
    history: list[float] = []

    for it in range(max_iters):
        d2 = _sq_distances(x, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(x.shape[0]), labels].sum())
        if history and inertia > history[-1] * (1 + _INERTIA_SLACK) + _INERTIA_SLACK:
            raise AssertionError(f"k-means inertia increased at iteration {it}: {history[-1]} -> {inertia}")
        history.append(inertia)

        new = centroids.copy()
        point_d2 = d2[np.arange(x.shape[0]), labels].copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                new[c] = x[far]
                point_d2[far] = -1.0
                log.debug("k-means: reseeded empty cluster %d with point %d", c, far)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break

    d2 = _sq_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(x.shape[0]), labels].sum()))
    log.info("k-means: k=%d, %d points, %d iterations, inertia %.6g", k, x.shape[0], len(history) - 1, history[-1])
    return ClusterModel(
        centroids=centroids,
        feature_stats=stats,
        assignments={utt: int(c) for utt, c in zip(ids, labels)},
        seed=int(seed),
        inertia_history=history,
    )


def assign(model: ClusterModel, summary: UtteranceSummary | np.ndarray) -> int:
    """Nearest centroid in standardized space; ties go to the lowest index."""
    vec = summary.vector if isinstance(summary, UtteranceSummary) else np.asarray(summary, dtype=np.float64)
    if vec.shape != (model.dim,):
        raise ClusteringError(f"summary has dimension {vec.shape}, model expects {model.dim}")
    z = _standardize(vec[None, :], model.feature_stats)
    return int(np.argmin(_sq_distances(z, model.centroids)[0]))


def inertia(model: ClusterModel, summaries: Sequence[UtteranceSummary]) -> float:
    x = _standardize(_summary_matrix(summaries), model.feature_stats)
    return float(_sq_distances(x, model.centroids).min(axis=1).sum())


# ---------------------------------------------------------------------------
# Codebook weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodebookWeights:
    weights: tuple[float, ...]
    primary: int | None = None

    @property
    def n_codebooks(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def codebook_weights(cluster: int, n_codebooks: int, w_p: float = 2.0, w_s: float = 0.8) -> CodebookWeights:
    """Primary weight for the utterance's cluster, secondary elsewhere, rescaled to sum to N."""
    if n_codebooks < 1:
        raise ClusteringError("n_codebooks must be >= 1")
    if not 0 <= cluster < n_codebooks:
        raise ClusteringError(f"cluster {cluster} outside [0, {n_codebooks})")
    if not w_s > 0:
        raise WeightRatioError("secondary weight w_s must be > 0")
    if w_p < 2 * w_s:
        raise WeightRatioError(f"primary weight must be at least twice the secondary ({w_p} < 2 * {w_s})")
    raw = np.full(n_codebooks, float(w_s))
    raw[cluster] = float(w_p)
    scaled = raw * (n_codebooks / raw.sum())
    return CodebookWeights(tuple(float(w) for w in scaled), int(cluster))


def uniform_weights(n_codebooks: int) -> CodebookWeights:
    return CodebookWeights(tuple(1.0 for _ in range(n_codebooks)), None)
