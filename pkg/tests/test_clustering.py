from __future__ import annotations

import numpy as np
import pytest

from bestrq_desk.clustering import (
    ClusteringError,
    ClusterModel,
    WeightRatioError,
    assign,
    codebook_weights,
    fit_kmeans,
    inertia,
    load_cluster_model,
    save_cluster_model,
    uniform_weights,
)
from bestrq_desk.features import UtteranceSummary


def _summaries(x: np.ndarray) -> list[UtteranceSummary]:
    return [UtteranceSummary(row, f"u{i:03d}") for i, row in enumerate(x)]


def _blobs(seed: int = 0, per: int = 60) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0, 0.0], [20.0, 0.0, 5.0], [0.0, 25.0, -10.0]])
    x = np.concatenate([c + rng.normal(size=(per, 3)) for c in centers])
    return x, np.repeat(np.arange(3), per)


def test_single_cluster_is_the_mean():
    x, _ = _blobs()
    model = fit_kmeans(_summaries(x), k=1, seed=0)
    # Summaries are standardized, so the overall mean is the origin.
    assert np.allclose(model.centroids[0], 0.0, atol=1e-9)
    assert set(model.assignments.values()) == {0}


def test_one_cluster_per_point_has_zero_inertia():
    rng = np.random.default_rng(1)
    summaries = _summaries(rng.normal(size=(7, 4)))
    model = fit_kmeans(summaries, k=7, seed=3)
    assert model.inertia_history[-1] == pytest.approx(0.0, abs=1e-12)
    assert inertia(model, summaries) == pytest.approx(0.0, abs=1e-12)
    assert sorted(model.assignments.values()) == list(range(7))


def test_recovers_separated_blobs():
    x, truth = _blobs(seed=2)
    model = fit_kmeans(_summaries(x), k=3, seed=5)
    labels = np.array([model.assignments[f"u{i:03d}"] for i in range(x.shape[0])])
    # Best agreement over label permutations via majority mapping.
    agree = sum(np.bincount(labels[truth == t], minlength=3).max() for t in range(3))
    assert agree / x.shape[0] >= 0.99


def test_inertia_never_increases():
    rng = np.random.default_rng(4)
    model = fit_kmeans(_summaries(rng.normal(size=(120, 5))), k=6, seed=1)
    h = model.inertia_history
    assert len(h) >= 2
    assert all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(h, h[1:]))


def test_fit_is_deterministic():
    x, _ = _blobs(seed=6)
    a = fit_kmeans(_summaries(x), k=4, seed=9)
    b = fit_kmeans(_summaries(x), k=4, seed=9)
    assert a.checksum() == b.checksum()
    assert a.assignments == b.assignments


def test_assign_matches_nearest_centroid_oracle():
    x, _ = _blobs(seed=7)
    model = fit_kmeans(_summaries(x), k=3, seed=2)
    rng = np.random.default_rng(8)
    for _ in range(50):
        v = rng.normal(scale=15.0, size=3)
        z = (v - model.feature_stats.mean) / model.feature_stats.std
        expected = int(np.argmin([np.sum((z - c) ** 2) for c in model.centroids]))
        assert assign(model, v) == expected
        assert assign(model, UtteranceSummary(v, "query")) == expected


def test_stored_assignments_match_assign():
    x, _ = _blobs(seed=10)
    summaries = _summaries(x)
    model = fit_kmeans(summaries, k=3, seed=0)
    for s in summaries:
        assert model.assignments[s.id] == assign(model, s)


def test_constant_dimension_is_ignored():
    x, _ = _blobs(seed=11)
    x = np.concatenate([x, np.full((x.shape[0], 1), 42.0)], axis=1)
    model = fit_kmeans(_summaries(x), k=3, seed=0)
    assert np.all(np.isfinite(model.centroids))
    assert np.allclose(model.centroids[:, -1], 0.0)


def test_bad_clustering_inputs():
    rng = np.random.default_rng(0)
    summaries = _summaries(rng.normal(size=(3, 2)))
    with pytest.raises(ClusteringError):
        fit_kmeans(summaries, k=0)
    with pytest.raises(ClusteringError):
        fit_kmeans(summaries, k=4)
    with pytest.raises(ClusteringError):
        fit_kmeans(summaries + [UtteranceSummary(np.zeros(3), "odd")], k=2)
    model = fit_kmeans(summaries, k=2)
    with pytest.raises(ClusteringError):
        assign(model, np.zeros(5))


def test_model_save_load(tmp_path):
    x, _ = _blobs(seed=12)
    model = fit_kmeans(_summaries(x), k=3, seed=4)
    back = load_cluster_model(save_cluster_model(model, tmp_path / "clusters.json"))
    assert back.k == 3
    assert back.assignments == model.assignments
    assert np.allclose(back.centroids, model.centroids)
    query = np.array([3.0, 7.0, -2.0])
    assert assign(back, query) == assign(model, query)


def test_out_of_range_assignment_rejected():
    d = {
        "k": 2,
        "seed": 0,
        "feature_stats": {"mean": [0.0], "std": [1.0]},
        "centroids": [0.0, 1.0],
        "assignments": {"a": 2},
    }
    with pytest.raises(ClusteringError):
        ClusterModel.from_dict(d)


# ---------------------------------------------------------------------------
# Codebook weights
# ---------------------------------------------------------------------------


def test_single_codebook_weight_is_one():
    assert codebook_weights(0, 1).weights == (1.0,)


def test_six_codebooks_keep_raw_weights():
    w = codebook_weights(2, 6)
    assert w.weights == pytest.approx((0.8, 0.8, 2.0, 0.8, 0.8, 0.8))
    assert sum(w.weights) == pytest.approx(6.0)
    assert w.primary == 2


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_weights_sum_to_n(n):
    for c in range(n):
        w = codebook_weights(c, n)
        assert sum(w.weights) == pytest.approx(n)
        assert int(np.argmax(w.weights)) == c


def test_ratio_boundary():
    codebook_weights(0, 4, w_p=1.6, w_s=0.8)
    with pytest.raises(WeightRatioError):
        codebook_weights(0, 4, w_p=1.52, w_s=0.8)
    with pytest.raises(WeightRatioError):
        codebook_weights(0, 4, w_p=1.0, w_s=0.0)


def test_weights_scale_invariant():
    assert codebook_weights(1, 6, 4.0, 1.6).weights == pytest.approx(codebook_weights(1, 6, 2.0, 0.8).weights)


def test_cluster_out_of_range():
    with pytest.raises(ClusteringError):
        codebook_weights(6, 6)


def test_uniform_weights():
    assert uniform_weights(3).weights == (1.0, 1.0, 1.0)
    assert uniform_weights(3).primary is None
