from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urgentkit.audio_io import Waveform
from urgentkit.errors import LengthMismatch, RateMismatch, ShapeMismatch, ZeroReference, ZeroVector
from urgentkit.metrics import (METRICS, FusionLossTerms, MultiScaleMelConfig, cosine_embedding_loss,
                               evaluate_metric, feature_matching_loss, fusion_loss,
                               log_spectral_distance, mel_cepstral_distortion,
                               multiscale_mel_distance, sdr, si_sdr, si_sdr_loss, stage_loss)

from corpus import speechlike

RATE = 16000


def W(x):
    return Waveform(np.asarray(x, dtype=np.float64), RATE)


def orthogonal_noise(ref: np.ndarray, seed: int) -> np.ndarray:
    n = np.random.default_rng(seed).standard_normal(len(ref))
    return n - np.dot(n, ref) / np.dot(ref, ref) * ref


@pytest.fixture(scope="module")
def ref():
    return np.random.default_rng(0).standard_normal(16000)


def test_si_sdr_scaled_copy_is_capped(ref):
    assert si_sdr(W(ref), W(0.5 * ref)) == 100.0
    assert evaluate_metric("si_sdr", W(ref), W(0.5 * ref)).capped


def test_si_sdr_orthogonal_closed_form(ref):
    n = orthogonal_noise(ref, 1)
    n *= np.sqrt(np.dot(ref, ref) / 100 / np.dot(n, n))
    assert si_sdr(W(ref), W(ref + n)) == pytest.approx(20.0, abs=0.01)
    assert si_sdr_loss(W(ref), W(ref + n)) == pytest.approx(-20.0, abs=0.01)


def test_si_sdr_orthogonal_estimate_negative(ref):
    e = orthogonal_noise(ref, 2) + 1e-3 * ref
    assert si_sdr(W(ref), W(e)) < 0


@pytest.mark.parametrize("g", [0.1, 1.0, 10.0, 3.7])
def test_si_sdr_scale_invariance(ref, g):
    e = ref + 0.3 * np.random.default_rng(3).standard_normal(len(ref))
    assert si_sdr(W(ref), W(g * e)) == pytest.approx(si_sdr(W(ref), W(e)), abs=1e-9)


def test_si_sdr_monotone_in_noise(ref):
    n = orthogonal_noise(ref, 4)
    vals = [si_sdr(W(ref), W(ref + s * n)) for s in np.linspace(0.05, 2.0, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_sdr_examples(ref):
    assert sdr(W(ref), W(ref)) == 100.0
    assert sdr(W(ref), W(np.zeros_like(ref))) == pytest.approx(0.0, abs=1e-9)
    assert sdr(W(ref), W(1.1 * ref)) == pytest.approx(20.0, abs=0.01)
    half = sdr(W(ref), W(0.5 * ref))
    assert np.isfinite(half) and half < 100.0


def test_sdr_errors(ref):
    with pytest.raises(ZeroReference):
        si_sdr(W(np.zeros(10)), W(np.ones(10)))
    with pytest.raises(LengthMismatch):
        sdr(W(ref), W(ref[:-1]))
    with pytest.raises(RateMismatch):
        sdr(W(ref), Waveform(ref, 8000))


def _hand_mel_distance(r, e, n_fft, hop, n_mels, floor):
    """Independent single-scale pipeline: explicit framing, DFT sums and triangle loops."""
    def mags(x):
        pad = n_fft // 2
        xp = np.pad(x, pad, mode="reflect")
        win = [0.5 - 0.5 * np.cos(2 * np.pi * i / n_fft) for i in range(n_fft)]
        out = []
        for start in range(0, len(xp) - n_fft + 1, hop):
            frame = [xp[start + i] * win[i] for i in range(n_fft)]
            row = []
            for k in range(n_fft // 2 + 1):
                acc = sum(frame[i] * np.exp(-2j * np.pi * k * i / n_fft) for i in range(n_fft))
                row.append(abs(acc))
            out.append(row)
        return np.array(out)

    def mel(f):
        return 2595 * np.log10(1 + f / 700)

    def imel(m):
        return 700 * (10 ** (m / 2595) - 1)

    top = mel(RATE / 2)
    edges = [imel(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * RATE / n_fft
            if lo < f <= c:
                fb[m, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, k] = (hi - f) / (hi - c)
    mr, me = mags(r) @ fb.T, mags(e) @ fb.T
    return np.mean(np.abs(mr - me)) + np.mean(np.abs(np.log(mr + floor) - np.log(me + floor)))


def test_mel_distance_vs_hand_oracle():
    rng = np.random.default_rng(5)
    r, e = rng.standard_normal(40), rng.standard_normal(40)
    cfg = MultiScaleMelConfig(scales=((64, 16, 8),))
    got = multiscale_mel_distance(W(r), W(e), cfg)
    want = _hand_mel_distance(r, e, 64, 16, 8, 1e-5)
    assert got == pytest.approx(want, abs=1e-9)


def test_mel_distance_basic(ref):
    e = ref + 0.1 * np.random.default_rng(6).standard_normal(len(ref))
    assert multiscale_mel_distance(W(ref), W(ref)) == 0.0
    d = multiscale_mel_distance(W(ref), W(e))
    assert d > 0
    assert d == pytest.approx(multiscale_mel_distance(W(e), W(ref)), abs=1e-12)


def test_lsd_examples(ref):
    assert log_spectral_distance(W(ref), W(ref)) == 0.0
    assert log_spectral_distance(W(ref), W(2 * ref)) == pytest.approx(10 * np.log10(4), abs=1e-3)
    e = ref + np.random.default_rng(7).standard_normal(len(ref))
    assert log_spectral_distance(W(ref), W(e)) == pytest.approx(log_spectral_distance(W(e), W(ref)))


def test_mcd_examples():
    rng = np.random.default_rng(8)
    # a noise floor keeps every mel band far above the 1e-10 log floor, where gain invariance is exact
    r = speechlike(1.0, RATE, 1).samples + 1e-3 * rng.standard_normal(RATE)
    noisy = r + 0.05 * rng.standard_normal(len(r))
    tiny = r + 1e-4 * rng.standard_normal(len(r))
    assert mel_cepstral_distortion(W(r), W(r)) == 0.0
    assert mel_cepstral_distortion(W(r), W(noisy)) > mel_cepstral_distortion(W(r), W(tiny))
    g = 3.0
    base = mel_cepstral_distortion(W(r), W(noisy))
    assert mel_cepstral_distortion(W(g * r), W(g * noisy)) == pytest.approx(base, abs=1e-6)
    assert mel_cepstral_distortion(W(noisy), W(r)) == pytest.approx(base, abs=1e-12)


def test_cosine_embedding_loss():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_embedding_loss(a, a) == pytest.approx(0.0, abs=1e-15)
    assert cosine_embedding_loss(a, -a) == pytest.approx(2.0)
    assert cosine_embedding_loss([1, 0], [0, 1]) == 1.0
    with pytest.raises(ZeroVector):
        cosine_embedding_loss([0, 0], [1, 0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_cosine_range(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    assert 0.0 <= cosine_embedding_loss(a, b) <= 2.0


def test_feature_matching():
    rng = np.random.default_rng(9)
    fa = [rng.standard_normal((3, 4)), rng.standard_normal((5,))]
    fb = [rng.standard_normal((3, 4)), rng.standard_normal((5,))]
    assert feature_matching_loss(fa, fa) == 0.0
    assert feature_matching_loss([np.ones(7)], [np.ones(7) - 2.5]) == pytest.approx(2.5)
    brute = 0.0
    for x, y in zip(fa, fb):
        flat_x, flat_y = x.ravel(), y.ravel()
        brute += sum(abs(flat_x[i] - flat_y[i]) for i in range(len(flat_x))) / len(flat_x)
    assert feature_matching_loss(fa, fb) == pytest.approx(brute / 2, abs=1e-9)
    assert feature_matching_loss(fa, fb) == pytest.approx(feature_matching_loss(fb, fa))
    with pytest.raises(ShapeMismatch):
        feature_matching_loss(fa, fb[:1])
    with pytest.raises(ShapeMismatch):
        feature_matching_loss([np.ones(3)], [np.ones(4)])


def test_losses_compose(ref):
    e = ref + 0.2 * np.random.default_rng(10).standard_normal(len(ref))
    total = stage_loss(W(ref), W(e))
    assert total == pytest.approx(multiscale_mel_distance(W(ref), W(e)) - si_sdr(W(ref), W(e)))
    terms = FusionLossTerms(speaker_embedder=lambda w: np.array([w.samples.std(), 1.0]),
                            phoneme_features=lambda w: [w.samples[:100]])
    out = fusion_loss(W(ref), W(e), terms)
    assert set(out) == {"mel", "si_sdr", "spk", "phoneme", "total"}
    assert out["total"] == pytest.approx(out["mel"] + out["si_sdr"] + out["spk"] + out["phoneme"])


def test_metric_registry():
    r = W(np.random.default_rng(11).standard_normal(8000))
    for name in METRICS:
        mv = evaluate_metric(name, r, r)
        assert np.isfinite(mv.value)
        assert mv.direction in ("higher_better", "lower_better")
