from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from urgentkit.audio_io import Waveform
from urgentkit.dsp import DEFAULT_STFT, stft
from urgentkit.enhancers import SpectralSubtractionStage, WienerStage
from urgentkit.errors import InvalidNoiseWindow
from urgentkit.metrics import si_sdr

from corpus import speechlike

RATE = 16000


def oracle_instance(snr_db: float, seed: int):
    """Pinned mixture: harmonic speech-like signal plus white noise at a global SNR."""
    s = speechlike(4.0, RATE, seed)
    n = np.random.default_rng(seed + 1000).standard_normal(len(s))
    n *= np.sqrt(np.mean(s.samples ** 2) / np.mean(n ** 2) / 10 ** (snr_db / 10))
    return s, Waveform(n, RATE), Waveform(s.samples + n, RATE)


def improvement(stage, s, x):
    return si_sdr(s, stage(x)) - si_sdr(s, x)


def test_spectral_subtraction_zero_noise_identity():
    x = speechlike(1.0, RATE, 1)
    out = SpectralSubtractionStage(np.zeros(DEFAULT_STFT.n_bins))(x)
    assert np.max(np.abs(out.samples - x.samples)) <= 1e-6


def test_spectral_subtraction_improves():
    s, n, x = oracle_instance(5.0, 7)
    assert improvement(SpectralSubtractionStage(n), s, x) > 0.0


def test_wiener_zero_psd_and_floor():
    x = speechlike(1.0, RATE, 2)
    out = WienerStage(np.zeros(DEFAULT_STFT.n_bins))(x)
    assert np.max(np.abs(out.samples - x.samples)) <= 1e-6
    _, n, noisy = oracle_instance(0.0, 3)
    near = WienerStage(n, min_gain=1 - 1e-9)(noisy)
    assert np.max(np.abs(near.samples - noisy.samples)) <= 1e-6


def test_wiener_improves():
    s, n, x = oracle_instance(0.0, 7)
    psd = np.mean(np.abs(stft(n).frames) ** 2, axis=0)
    assert improvement(WienerStage(psd, min_gain=0.05), s, x) > 3.0


def test_noise_window_errors():
    x = speechlike(0.5, RATE, 4)
    with pytest.raises(InvalidNoiseWindow):
        SpectralSubtractionStage(10_000.0)(x)
    with pytest.raises(InvalidNoiseWindow):
        WienerStage(np.ones(7))(x)
    with pytest.raises(InvalidNoiseWindow):
        SpectralSubtractionStage(Waveform(np.ones(100), 8000))(x)
    with pytest.raises(ValueError):
        SpectralSubtractionStage(oversubtraction=0.5)
    with pytest.raises(ValueError):
        WienerStage(min_gain=1.0)


@given(st.integers(1700, 30000), st.integers(0, 100))
@settings(max_examples=15, deadline=None)
def test_stage_contract_length(n, seed):
    x = Waveform(np.random.default_rng(seed).standard_normal(n) * 0.1, RATE)
    for stage in (SpectralSubtractionStage(100.0), WienerStage(100.0)):
        out = stage(x)
        assert len(out) == n and out.sample_rate == RATE
