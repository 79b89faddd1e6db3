"""Reference DSP enhancers used in place of trained stage networks."""
from __future__ import annotations

import numpy as np

from .audio_io import Waveform
from .dsp import DEFAULT_STFT, StftConfig, istft, stft
from .errors import InvalidNoiseWindow
from .pipeline import Stage


def _noise_power(x: Waveform, estimate, cfg: StftConfig) -> np.ndarray:
    """Per-bin noise power from a leading-ms window, a noise waveform, or an array."""
    if isinstance(estimate, Waveform):
        if estimate.sample_rate != x.sample_rate:
            raise InvalidNoiseWindow("noise estimate rate differs from the input rate")
        return np.mean(np.abs(stft(estimate, cfg).frames) ** 2, axis=0)
    if isinstance(estimate, (int, float)):
        n = int(round(estimate * x.sample_rate / 1000.0))
        if estimate <= 0 or n < 1 or n > len(x):
            raise InvalidNoiseWindow(f"leading noise window of {estimate} ms does not fit the input")
        return np.mean(np.abs(stft(x.with_samples(x.samples[:n]), cfg).frames) ** 2, axis=0)
    arr = np.asarray(estimate, dtype=np.float64)
    if arr.shape != (cfg.n_bins,) or np.any(arr < 0):
        raise InvalidNoiseWindow(f"noise PSD must be {cfg.n_bins} non-negative values")
    return arr


class SpectralSubtractionStage(Stage):
    """Magnitude subtraction |S| = max(|X| - beta |N|, floor |X|) with the noisy phase."""

    name = "spectral_subtraction"
    context = "full"

    def __init__(self, noise_estimate=100.0, oversubtraction: float = 1.0, floor: float = 0.05,
                 config: StftConfig = DEFAULT_STFT):
        if oversubtraction < 1:
            raise ValueError("oversubtraction must be >= 1")
        if not 0 <= floor < 1:
            raise ValueError("floor must be in [0, 1)")
        self.noise_estimate = noise_estimate
        self.oversubtraction = oversubtraction
        self.floor = floor
        self.config = config

    def enhance(self, *signals):
        x = signals[0]
        if len(x) == 0:
            return x
        spec = stft(x, self.config)
        noise_mag = np.sqrt(_noise_power(x, self.noise_estimate, self.config))
        mag = np.abs(spec.frames)
        new_mag = np.maximum(mag - self.oversubtraction * noise_mag, self.floor * mag)
        gain = np.divide(new_mag, mag, out=np.ones_like(mag), where=mag > 0)
        return istft(spec.with_frames(spec.frames * gain))


class WienerStage(Stage):
    """Decision-directed Wiener gain G = max(xi / (1 + xi), min_gain)."""

    name = "wiener"
    context = "full"

    def __init__(self, noise_psd_estimate=100.0, min_gain: float = 0.1, smoothing: float = 0.98,
                 config: StftConfig = DEFAULT_STFT):
        if not 0 <= min_gain < 1:
            raise ValueError("min_gain must be in [0, 1)")
        self.noise_psd_estimate = noise_psd_estimate
        self.min_gain = min_gain
        self.smoothing = smoothing
        self.config = config

    def gains(self, x: Waveform) -> tuple[np.ndarray, object]:
        spec = stft(x, self.config)
        noise = _noise_power(x, self.noise_psd_estimate, self.config)
        power = np.abs(spec.frames) ** 2
        gains = np.ones_like(power)
        live = noise > 0
        prev_clean = np.zeros(power.shape[1])
        a = self.smoothing
        for t in range(power.shape[0]):
            post = np.divide(power[t], noise, out=np.zeros_like(noise), where=live)
            prior = a * np.divide(prev_clean, noise, out=np.zeros_like(noise), where=live) \
                + (1 - a) * np.maximum(post - 1.0, 0.0)
            g = np.maximum(prior / (1.0 + prior), self.min_gain)
            g = np.where(live, g, 1.0)
            gains[t] = g
            prev_clean = (g ** 2) * power[t]
        return gains, spec

    def enhance(self, *signals):
        x = signals[0]
        if len(x) == 0:
            return x
        gains, spec = self.gains(x)
        return istft(spec.with_frames(spec.frames * gains))
