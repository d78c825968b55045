from __future__ import annotations

import numpy as np
import pytest
import torch

from bestrq_desk.encoder import (
    ConformerBlock,
    EncoderConfig,
    EncoderConfigError,
    EncoderInputError,
    StaleCacheError,
    backward,
    build_encoder,
    count_parameters,
    forward,
)
from bestrq_desk.losses import LossConfig, combined_loss

SMALL = EncoderConfig(n_layers=1, d_model=32, n_heads=2, conv_kernel=7, n_outputs=2, vocab=16, dropout=0.0)
GRAD_TOY = EncoderConfig(
    n_layers=1,
    d_model=16,
    n_heads=2,
    conv_kernel=3,
    ffn_expansion=2,
    n_outputs=2,
    vocab=8,
    input_dim=8,
    dropout=0.0,
    max_relative_position=4,
)


def _feats(b: int, t: int, d: int = 80, seed: int = 0, scale: float = 1.0) -> torch.Tensor:
    return torch.as_tensor(np.random.default_rng(seed).normal(scale=scale, size=(b, t, d)))


def _eval_encoder(cfg: EncoderConfig = SMALL, seed: int = 1, dtype=torch.float64):
    enc = build_encoder(cfg, seed, dtype)
    enc.eval()
    return enc


def test_build_is_deterministic_and_leaves_global_rng():
    before = torch.get_rng_state()
    a = build_encoder(SMALL, 3).state_dict()
    b = build_encoder(SMALL, 3).state_dict()
    c = build_encoder(SMALL, 4).state_dict()
    assert torch.equal(torch.get_rng_state(), before)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_parameter_count_composition():
    one = count_parameters(build_encoder(SMALL, 0))
    two = count_parameters(build_encoder(EncoderConfig(**{**SMALL.to_dict(), "n_layers": 2}), 0))
    block = sum(p.numel() for p in ConformerBlock(SMALL).parameters())
    assert two - one == block
    more_heads = count_parameters(build_encoder(EncoderConfig(**{**SMALL.to_dict(), "n_outputs": 3}), 0))
    assert more_heads - one == SMALL.d_model * SMALL.vocab + SMALL.vocab


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_model=30, n_heads=4), dict(conv_kernel=8), dict(subsample_factor=2), dict(dropout=1.0), dict(vocab=0)],
)
def test_invalid_config(kwargs):
    with pytest.raises(EncoderConfigError):
        EncoderConfig(**kwargs).validate()


@pytest.mark.parametrize("t", [4, 7, 16, 33, 64])
def test_output_length_is_quarter(t):
    res = forward(_eval_encoder(), _feats(1, t))
    assert res.probs.shape == (2, 1, t // 4, 16)
    assert res.out_lengths.tolist() == [t // 4]


def test_two_dimensional_input_is_one_utterance():
    res = forward(_eval_encoder(), _feats(1, 16)[0])
    assert res.probs.shape == (2, 1, 4, 16)


def test_probability_rows_sum_to_one_under_large_inputs():
    enc = _eval_encoder(dtype=torch.float32)
    for seed, scale in enumerate((1e-3, 1.0, 10.0, 1e3)):
        res = forward(enc, _feats(2, 24, seed=seed, scale=scale))
        assert torch.isfinite(res.probs).all()
        assert torch.all((res.probs.sum(dim=-1) - 1.0).abs() < 1e-5)


def test_duplicated_rows_give_identical_outputs():
    x = _feats(1, 20).repeat(3, 1, 1)
    probs = forward(_eval_encoder(), x).probs
    assert torch.allclose(probs[:, 0], probs[:, 1], atol=1e-12)
    assert torch.allclose(probs[:, 0], probs[:, 2], atol=1e-12)


def test_duplicating_the_batch_keeps_the_mean_loss():
    enc = _eval_encoder()
    x = _feats(3, 24, seed=5)
    res = forward(enc, x)
    n, b, t, v = res.probs.shape
    rng = np.random.default_rng(6)
    targets = torch.as_tensor(rng.integers(0, v, size=(n, b, t)))
    sims = torch.softmax(torch.as_tensor(rng.normal(size=(n, b, t, v))), dim=-1)
    masked = torch.as_tensor(rng.random((b, t)) < 0.5)
    masked[0, 0] = True
    cfg = LossConfig(w_ce=1.0, w_kl=0.1)

    single = combined_loss(res.probs, targets, sims, masked, cfg)
    doubled = combined_loss(
        forward(enc, torch.cat([x, x])).probs,
        torch.cat([targets, targets], dim=1),
        torch.cat([sims, sims], dim=1),
        torch.cat([masked, masked]),
        cfg,
    )
    assert doubled.masked_positions == 2 * single.masked_positions
    assert abs(doubled.total - single.total) <= 1e-6


def test_batch_permutation_equivariance():
    enc = _eval_encoder()
    x = _feats(4, 24, seed=2)
    perm = torch.tensor([2, 0, 3, 1])
    base = forward(enc, x).probs
    moved = forward(enc, x[perm]).probs
    assert torch.allclose(moved, base[:, perm], atol=1e-10)


def test_padding_does_not_leak():
    enc = _eval_encoder()
    short = _feats(1, 20, seed=3)
    padded = torch.cat([short, _feats(1, 12, seed=4, scale=50.0)], dim=1)
    batch = torch.cat([padded, _feats(1, 32, seed=5)])
    alone = forward(enc, short).probs
    together = forward(enc, batch, lengths=[20, 32])
    assert together.out_lengths.tolist() == [5, 8]
    assert together.valid.tolist()[0] == [True] * 5 + [False] * 3
    assert torch.allclose(together.probs[:, 0, :5], alone[:, 0], atol=1e-10)


def test_input_errors():
    enc = _eval_encoder()
    with pytest.raises(EncoderInputError):
        forward(enc, _feats(1, 16, d=40))
    bad = _feats(1, 16)
    bad[0, 3, 7] = float("nan")
    with pytest.raises(EncoderInputError):
        forward(enc, bad)
    with pytest.raises(EncoderInputError):
        forward(enc, _feats(2, 16), lengths=[16, 17])
    with pytest.raises(EncoderInputError):
        forward(enc, _feats(2, 16), lengths=[16, 3])


def test_zero_upstream_gives_zero_gradients():
    enc = _eval_encoder()
    res = forward(enc, _feats(1, 16))
    grads = backward(enc, res, torch.zeros_like(res.probs))
    assert set(grads) == {n for n, _ in enc.named_parameters()}
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_upstream_shape_checked():
    enc = _eval_encoder()
    res = forward(enc, _feats(1, 16))
    with pytest.raises(EncoderInputError):
        backward(enc, res, torch.zeros(3))


def test_stale_results_are_refused():
    enc = _eval_encoder()
    res = forward(enc, _feats(1, 16))
    enc.bump_version()
    with pytest.raises(StaleCacheError):
        backward(enc, res, res.probs.sum())

    fresh = forward(enc, _feats(1, 16))
    backward(enc, fresh, fresh.probs[0, 0, 0, 0])
    with pytest.raises(StaleCacheError):
        backward(enc, fresh, fresh.probs[0, 0, 0, 0])


# ---------------------------------------------------------------------------
# End-to-end gradient check
# ---------------------------------------------------------------------------


def _grad_problem(seed: int = 0):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(1, 32, GRAD_TOY.input_dim)))
    steps = 8
    targets = rng.integers(0, GRAD_TOY.vocab, size=(GRAD_TOY.n_outputs, 1, steps))
    sims = rng.dirichlet(np.ones(GRAD_TOY.vocab), size=(GRAD_TOY.n_outputs, 1, steps))
    masked = np.zeros((1, steps), dtype=bool)
    masked[0, [1, 2, 5, 6]] = True
    return x, targets, sims, masked


def test_parameter_gradients_match_finite_differences():
    enc = _eval_encoder(GRAD_TOY, seed=5)
    x, targets, sims, masked = _grad_problem()
    cfg = LossConfig(w_ce=1.0, w_kl=0.1)

    def loss() -> torch.Tensor:
        return combined_loss(forward(enc, x).probs, targets, sims, masked, cfg).objective

    res = forward(enc, x)
    analytic = backward(enc, res, combined_loss(res.probs, targets, sims, masked, cfg).objective)

    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for name, p in enc.named_parameters():
            flat = p.view(-1)
            g = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = g[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-3))
    assert worst < 1e-4
