from __future__ import annotations

import numpy as np
import pytest

from bestrq_desk.audio import Waveform
from bestrq_desk.features import (
    LOG_FLOOR,
    FeatureError,
    FeatureKind,
    FeatureSequence,
    FrameConfig,
    NormStats,
    compute_feature,
    compute_norm_stats,
    contrast_from_magnitude,
    log_mel,
    mel_center_frequencies,
    mfcc,
    mfcc_from_log_mel,
    normalize_global,
    read_feature_dump,
    rolloff_from_magnitude,
    spectral_contrast,
    spectral_rolloff,
    utterance_summary,
    write_feature_dump,
    zero_crossing_rate,
)

from conftest import sine

CFG = FrameConfig()


def _htk_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _naive_log_mel(x: np.ndarray, sr: int = 16000) -> np.ndarray:
    """Direct DFT, hand-built Hann window and triangular filters."""
    n_frames = 1 + (x.size - 400) // 160
    n = np.arange(400)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / 400)
    k = np.arange(257)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / 512)
    frames = np.stack([x[i * 160 : i * 160 + 400] * window for i in range(n_frames)])
    mag = np.abs(frames @ basis.T)

    mels = np.linspace(0.0, _htk_mel(sr / 2), 82)
    hz = 700.0 * (10 ** (mels / 2595.0) - 1.0)
    freqs = k * sr / 512
    fb = np.zeros((80, 257))
    for m in range(80):
        lo, c, hi = hz[m], hz[m + 1], hz[m + 2]
        for j, f in enumerate(freqs):
            if lo <= f <= c:
                fb[m, j] = (f - lo) / (c - lo)
            elif c < f <= hi:
                fb[m, j] = (hi - f) / (hi - c)
    return np.log(np.maximum(mag @ fb.T, 1e-10))


def test_frame_count():
    assert log_mel(sine(440.0, n=16000)).num_frames == 98


def test_silence_hits_floor():
    seq = log_mel(Waveform(np.zeros(16000)))
    assert seq.data.shape == (98, 80)
    assert np.all(seq.data == np.log(LOG_FLOOR))


def test_log_mel_matches_naive_oracle():
    w = sine(1000.0, n=4000)
    ours = log_mel(w).data
    ref = _naive_log_mel(w.samples)
    assert np.allclose(ours, ref, atol=1e-8)


def test_one_khz_tone_peaks_near_one_khz_filter():
    energy = log_mel(sine(1000.0)).data.mean(axis=0)
    centers = mel_center_frequencies(16000, 80)
    nearest = int(np.argmin(np.abs(centers - 1000.0)))
    # 1 kHz sits almost midway between two centers; the oracle test above pins the exact values.
    assert abs(int(np.argmax(energy)) - nearest) <= 1


def test_argmax_bin_moves_with_tone_frequency():
    peaks = [int(np.argmax(log_mel(sine(f, n=4000)).data.mean(axis=0))) for f in np.arange(250.0, 7001.0, 250.0)]
    assert all(b >= a for a, b in zip(peaks, peaks[1:]))


@pytest.mark.parametrize("n", [400, 401, 559, 560, 4321])
def test_shape_law_for_every_extractor(n):
    rng = np.random.default_rng(n)
    w = Waveform(rng.uniform(-0.5, 0.5, n))
    expected = 1 + (n - 400) // 160
    for kind in FeatureKind:
        assert compute_feature(kind, w).num_frames == expected


def test_short_signal_rejected():
    with pytest.raises(FeatureError):
        log_mel(Waveform(np.zeros(399)))


def test_outputs_finite_for_zero_and_denormal_input():
    for x in (np.zeros(2000), np.full(2000, 5e-324), np.tile([5e-324, -5e-324], 1000)):
        w = Waveform(x)
        for kind in FeatureKind:
            assert np.all(np.isfinite(compute_feature(kind, w).data))


def test_frame_config_validation():
    with pytest.raises(FeatureError):
        FrameConfig(frame_len_samples=600, n_fft=512).validate()
    with pytest.raises(FeatureError):
        FrameConfig(hop_samples=500).validate()


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _seq(data):
    return FeatureSequence(np.asarray(data, dtype=np.float64), FeatureKind.LOG_MEL, 100.0)


def test_constant_dimension_becomes_zero():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(50, 3))
    data[:, 1] = 4.2
    out = normalize_global(_seq(data))
    assert np.all(out.data[:, 1] == 0.0)


def test_standardized_corpus_is_fixed_point():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(200, 4))
    data = (data - data.mean(axis=0)) / data.std(axis=0)
    assert np.allclose(normalize_global(_seq(data)).data, data, atol=1e-6)


def test_corpus_statistics_after_normalization():
    rng = np.random.default_rng(2)
    seqs = [_seq(rng.normal(3.0, 5.0, size=(int(rng.integers(10, 60)), 6))) for _ in range(7)]
    stats = compute_norm_stats(seqs)
    normed = np.concatenate([normalize_global(s, stats).data for s in seqs])
    assert np.all(np.abs(normed.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(normed.std(axis=0) - 1.0) < 1e-4)


def test_normalization_is_idempotent():
    rng = np.random.default_rng(3)
    once = normalize_global(_seq(rng.normal(-2.0, 0.3, size=(80, 5))))
    twice = normalize_global(once)
    assert np.max(np.abs(twice.data - once.data)) <= 1e-5


def test_stats_dimension_mismatch():
    stats = NormStats(np.zeros(3), np.ones(3))
    with pytest.raises(FeatureError):
        normalize_global(_seq(np.zeros((4, 5))), stats)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def test_mfcc_of_constant_frame():
    out = mfcc_from_log_mel(np.full((2, 80), -3.0), 13)
    assert abs(out[0, 0]) > 0
    assert np.allclose(out[:, 1:], 0.0, atol=1e-12)


def test_mfcc_matches_naive_dct():
    rng = np.random.default_rng(4)
    frame = rng.normal(size=(1, 80))
    n = 80
    idx = np.arange(n)
    ref = np.array(
        [
            (np.sqrt(1 / n) if k == 0 else np.sqrt(2 / n)) * np.sum(frame[0] * np.cos(np.pi * k * (2 * idx + 1) / (2 * n)))
            for k in range(13)
        ]
    )
    assert np.allclose(mfcc_from_log_mel(frame, 13)[0], ref, atol=1e-8)


def test_mfcc_dims():
    assert mfcc(sine(300.0, n=4000)).dim == 13
    with pytest.raises(FeatureError):
        mfcc(sine(300.0, n=4000), n_coeffs=81)


def test_contrast_flat_spectrum_is_zero():
    out = contrast_from_magnitude(np.ones((3, 257)), 16000, 512)
    assert out.shape == (3, 7)
    assert np.allclose(out, 0.0)


def test_contrast_single_peak_band_wins():
    mag = np.ones((1, 257))
    freqs = np.arange(257) * 16000 / 512
    band3 = np.flatnonzero((freqs >= 800) & (freqs < 1600))[5]
    mag[0, band3] = 100.0
    out = contrast_from_magnitude(mag, 16000, 512)[0]
    assert np.argmax(out) == 3
    assert all(out[3] > out[b] for b in range(7) if b != 3)


def test_contrast_dims_and_nyquist_guard():
    assert spectral_contrast(sine(500.0, n=4000)).dim == 7
    with pytest.raises(FeatureError):
        spectral_contrast(sine(500.0, n=4000), n_bands=7)


def test_rolloff_of_tone():
    bin_hz = 16000 / 512
    r = spectral_rolloff(sine(2000.0, n=8000)).data[:, 0]
    assert np.all(np.abs(r - 2000.0) <= bin_hz + 1e-9)


def test_rolloff_of_flat_spectrum():
    r = rolloff_from_magnitude(np.ones((1, 257)), 16000, 512, 0.85)[0, 0]
    assert abs(r - 0.85 * 8000) <= 16000 / 512


def test_rolloff_zero_frame_is_zero_hz():
    assert rolloff_from_magnitude(np.zeros((2, 257)), 16000, 512)[:, 0].tolist() == [0.0, 0.0]


def test_rolloff_pct_range():
    with pytest.raises(FeatureError):
        spectral_rolloff(sine(500.0, n=4000), pct=1.0)


def test_zcr_limits():
    assert np.all(zero_crossing_rate(Waveform(np.full(1000, 0.3))).data == 0.0)
    alternating = Waveform(np.tile([1.0, -1.0], 500))
    assert np.all(zero_crossing_rate(alternating).data == 1.0)


def test_zcr_of_sine():
    zcr = zero_crossing_rate(sine(1000.0, n=8000, amp=0.9)).data.mean()
    assert zcr == pytest.approx(2 * 1000.0 / 16000, rel=0.05)


def test_summary_blocks_are_column_means():
    w = sine(700.0, n=8000)
    s = utterance_summary(w)
    assert s.vector.shape == (22,)
    blocks = [mfcc(w), spectral_contrast(w), spectral_rolloff(w), zero_crossing_rate(w)]
    expected = np.concatenate([b.data.mean(axis=0) for b in blocks])
    assert np.allclose(s.vector, expected, atol=1e-8)


def test_summary_of_time_constant_signal():
    w = Waveform(np.full(4000, 0.25))
    s = utterance_summary(w)
    first = np.concatenate(
        [mfcc(w).data[0], spectral_contrast(w).data[0], spectral_rolloff(w).data[0], zero_crossing_rate(w).data[0]]
    )
    assert np.allclose(s.vector, first, atol=1e-8)


def test_feature_dump_reads_back(tmp_path):
    a = log_mel(sine(440.0, n=4000, id="a"))
    b = mfcc(sine(880.0, n=2000, id="b"))
    p = write_feature_dump([("a", a), ("b", b)], tmp_path / "f.bin")
    back = read_feature_dump(p)
    assert [i for i, _ in back] == ["a", "b"]
    assert back[1][1].feature_kind is FeatureKind.MFCC
    assert np.allclose(back[0][1].data, a.data.astype(np.float32))
