from __future__ import annotations

import math

import numpy as np
import pytest

from bestrq_desk.masking import expected_mask_fraction
from bestrq_desk.stats import (
    TokenRecord,
    codebook_usage,
    compare_runs,
    entropy_nats,
    mask_coverage,
    read_tokens,
    validation_curve,
    write_tokens,
)


def _val(step: int, total: float) -> dict:
    return {"phase": "val", "step": step, "total": total}


def _train(step: int, total: float) -> dict:
    return {"phase": "train", "step": step, "total": total}


def test_entropy_edges():
    assert entropy_nats(np.zeros(5)) == 0.0
    assert entropy_nats(np.array([0, 7, 0])) == 0.0
    assert entropy_nats(np.ones(16)) == pytest.approx(math.log(16))


def test_uniform_tokens_reach_full_entropy():
    recs = [
        TokenRecord("a", 8, np.array([[0, 1, 2, 3], [7, 7, 7, 7]])),
        TokenRecord("b", 8, np.array([[4, 5, 6, 7], [7, 7, 7, 7]])),
    ]
    usage = codebook_usage(recs)
    assert usage[0].entropy_nats == pytest.approx(math.log(8))
    assert usage[0].perplexity == pytest.approx(8.0)
    assert usage[0].utilization == 1.0
    assert usage[1].used_codes == 1 and usage[1].entropy_nats == 0.0
    assert usage[1].tokens == 8


def test_usage_errors():
    with pytest.raises(ValueError):
        codebook_usage([])
    with pytest.raises(ValueError):
        codebook_usage([TokenRecord("a", 4, np.array([[5]]))])
    with pytest.raises(ValueError):
        codebook_usage([TokenRecord("a", 4, np.array([[1]])), TokenRecord("b", 4, np.array([[1], [2]]))])


def test_token_file_reads_back(tmp_path):
    recs = [TokenRecord("u1", 64, np.array([[1, 2, 3], [4, 5, 6]]))]
    back = read_tokens(write_tokens(recs, tmp_path / "t.jsonl"))
    assert back[0].id == "u1" and back[0].codebook_size == 64
    assert np.array_equal(back[0].targets, recs[0].targets)


def test_malformed_token_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"id": "a", "codebook_size": 4, "targets": [[1]]}\n{"id": "b"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        read_tokens(p)
    with pytest.raises(FileNotFoundError):
        read_tokens(tmp_path / "missing.jsonl")


def test_mask_coverage_report():
    rep = mask_coverage(0.15, 4, 10_000, 20, seed=3)
    assert rep.expected == pytest.approx(expected_mask_fraction(0.15, 4))
    assert abs(rep.empirical - rep.expected) <= 0.01
    assert rep.std_across_seeds > 0
    assert rep.to_dict()["n_seeds"] == 20


def test_validation_curve_normalizes_by_first_value():
    curve = validation_curve([_train(0, 9.0), _val(4, 2.0), _val(0, 8.0)], "x")
    assert curve.steps == [0, 4]
    assert curve.normalized == [1.0, 0.25]
    with pytest.raises(ValueError):
        validation_curve([_train(0, 1.0)], "x")
    with pytest.raises(ValueError):
        validation_curve([_val(0, 0.0)], "x")


def test_compare_picks_lower_normalized_run():
    a = [_val(0, 10.0), _val(2, 7.0), _val(4, 5.0)]
    b = [_val(0, 4.0), _val(2, 3.5), _val(4, 3.0), _val(6, 1.0)]
    cmp = compare_runs(a, b, "baseline", "proposed")
    assert cmp.final_step == 4
    assert cmp.lower == "baseline"
    d = cmp.to_dict()
    assert d["runs"]["proposed"]["final_normalized"] == pytest.approx(0.75)
    assert compare_runs(a, a).lower == "tie"


def test_compare_needs_a_common_step():
    with pytest.raises(ValueError):
        compare_runs([_val(0, 1.0)], [_val(1, 1.0)])
