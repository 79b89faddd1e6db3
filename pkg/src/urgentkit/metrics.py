"""Losses and intrusive evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .audio_io import Waveform
from .dsp import StftConfig, mel_filterbank, stft, usable_mels
from .errors import LengthMismatch, RateMismatch, ShapeMismatch, ZeroReference, ZeroVector

SDR_EPS = 1e-12
LSD_EPS = 1e-10
MCD_EPS = 1e-10
# perfect reconstruction is reported as this value instead of +inf
DB_CAP = 100.0

LSD_STFT = StftConfig(2048, 512)
MCD_STFT = StftConfig(2048, 512)
MCD_MELS = 80
MCD_COEFFS = 13
MCD_CONST = 10.0 * np.sqrt(2.0) / np.log(10.0)


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    direction: str  # "higher_better" or "lower_better"
    capped: bool = False


def _pair(reference: Waveform, estimate: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if reference.sample_rate != estimate.sample_rate:
        raise RateMismatch(f"{reference.sample_rate} Hz vs {estimate.sample_rate} Hz")
    if len(reference) != len(estimate):
        raise LengthMismatch(f"{len(reference)} vs {len(estimate)} samples")
    if len(reference) < 1:
        raise LengthMismatch("empty signals")
    return reference.samples, estimate.samples


def _ratio_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def si_sdr(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant SDR in dB, clamped to [-100, 100]."""
    r, e = _pair(reference, estimate)
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise ZeroReference("reference is all zeros")
    alpha = float(np.dot(e, r)) / rr
    target = alpha * r
    noise = e - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(noise, noise)) + SDR_EPS)


def si_sdr_loss(reference: Waveform, estimate: Waveform) -> float:
    return -si_sdr(reference, estimate)


def sdr(reference: Waveform, estimate: Waveform) -> float:
    """Plain signal-to-distortion ratio in dB, clamped to [-100, 100]."""
    r, e = _pair(reference, estimate)
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise ZeroReference("reference is all zeros")
    d = e - r
    return _ratio_db(rr, float(np.dot(d, d)) + SDR_EPS)


@dataclass(frozen=True)
class MultiScaleMelConfig:
    scales: tuple[tuple[int, int, int], ...] = (
        (64, 16, 8), (128, 32, 10), (256, 64, 20),
        (512, 128, 40), (1024, 256, 80), (2048, 512, 160),
    )
    log_floor: float = 1e-5
    weight_l1_log: float = 1.0
    weight_l1_lin: float = 1.0

    def __post_init__(self):
        if not self.scales:
            raise ValueError("at least one scale is required")
        for n_fft, hop, n_mels in self.scales:
            if hop > n_fft or n_mels < 1:
                raise ValueError(f"invalid scale {(n_fft, hop, n_mels)}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@lru_cache(maxsize=64)
def _mel_weights(n_mels: int, sample_rate: int, n_fft: int) -> np.ndarray:
    n = usable_mels(n_mels, sample_rate, n_fft)
    return mel_filterbank(n, sample_rate, n_fft).weights


def mel_magnitudes(w: Waveform, n_fft: int, hop: int, n_mels: int) -> np.ndarray:
    """(frames, mels) mel-projected STFT magnitudes; n_mels is capped at usable bins."""
    spec = stft(w, StftConfig(n_fft, hop))
    return np.abs(spec.frames) @ _mel_weights(n_mels, w.sample_rate, n_fft).T


def multiscale_mel_distance(reference: Waveform, estimate: Waveform,
                            cfg: MultiScaleMelConfig | None = None) -> float:
    cfg = cfg or MultiScaleMelConfig()
    _pair(reference, estimate)
    total = 0.0
    for n_fft, hop, n_mels in cfg.scales:
        mr = mel_magnitudes(reference, n_fft, hop, n_mels)
        me = mel_magnitudes(estimate, n_fft, hop, n_mels)
        lin = np.mean(np.abs(mr - me))
        log = np.mean(np.abs(np.log(mr + cfg.log_floor) - np.log(me + cfg.log_floor)))
        total += cfg.weight_l1_lin * lin + cfg.weight_l1_log * log
    return float(total)


def log_spectral_distance(reference: Waveform, estimate: Waveform) -> float:
    _pair(reference, estimate)
    pr = np.abs(stft(reference, LSD_STFT).frames) ** 2
    pe = np.abs(stft(estimate, LSD_STFT).frames) ** 2
    diff = 10.0 * np.log10(pr + LSD_EPS) - 10.0 * np.log10(pe + LSD_EPS)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=1))))


def mfcc(w: Waveform, n_coeffs: int = MCD_COEFFS) -> np.ndarray:
    """Cepstral coefficients c1..c_n (c0 dropped) from an 80-band log-mel spectrogram."""
    power = np.abs(stft(w, MCD_STFT).frames) ** 2
    mel = power @ _mel_weights(MCD_MELS, w.sample_rate, MCD_STFT.fft_size).T
    # natural log of mel amplitude
    log_mel = 0.5 * np.log(mel + MCD_EPS)
    cep = dct(log_mel, type=2, norm="ortho", axis=1)
    return cep[:, 1:n_coeffs + 1]


def mel_cepstral_distortion(reference: Waveform, estimate: Waveform) -> float:
    """Frame-index aligned MCD (no time warping)."""
    _pair(reference, estimate)
    d = mfcc(reference) - mfcc(estimate)
    return float(MCD_CONST * np.mean(np.sqrt(np.sum(d ** 2, axis=1))))


def cosine_embedding_loss(emb_a, emb_b) -> float:
    a = np.asarray(emb_a, dtype=np.float64).reshape(-1)
    b = np.asarray(emb_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("embedding has zero norm")
    cos = float(np.dot(a, b) / (na * nb))
    return float(1.0 - np.clip(cos, -1.0, 1.0))


def feature_matching_loss(features_a, features_b) -> float:
    """Mean over layers of the mean absolute feature difference."""
    if len(features_a) != len(features_b):
        raise ShapeMismatch(f"{len(features_a)} vs {len(features_b)} layers")
    if not features_a:
        raise ShapeMismatch("no feature layers")
    per_layer = []
    for fa, fb in zip(features_a, features_b):
        fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
        if fa.shape != fb.shape:
            raise ShapeMismatch(f"layer shape {fa.shape} vs {fb.shape}")
        per_layer.append(np.mean(np.abs(fa - fb)))
    return float(np.mean(per_layer))


def stage_loss(reference: Waveform, estimate: Waveform,
               mel_cfg: MultiScaleMelConfig | None = None,
               weight_mel: float = 1.0, weight_si_sdr: float = 1.0) -> float:
    """Reconstruction objective: mel distance plus negated SI-SDR."""
    return (weight_mel * multiscale_mel_distance(reference, estimate, mel_cfg)
            + weight_si_sdr * si_sdr_loss(reference, estimate))


@dataclass
class FusionLossTerms:
    """Optional embedding-based terms for the fusion objective.

    ``speaker_embedder`` maps a Waveform to a vector; ``phoneme_features``
    maps a Waveform to a list of layer arrays.
    """

    speaker_embedder: object = None
    phoneme_features: object = None
    weights: dict = field(default_factory=lambda: {"mel": 1.0, "si_sdr": 1.0,
                                                   "spk": 1.0, "phoneme": 1.0})


def fusion_loss(reference: Waveform, estimate: Waveform, terms: FusionLossTerms | None = None,
                mel_cfg: MultiScaleMelConfig | None = None) -> dict:
    """Per-term and total fusion objective; embedding terms run only when their model is given."""
    terms = terms or FusionLossTerms()
    wt = terms.weights
    out = {
        "mel": multiscale_mel_distance(reference, estimate, mel_cfg),
        "si_sdr": si_sdr_loss(reference, estimate),
    }
    if terms.speaker_embedder is not None:
        out["spk"] = cosine_embedding_loss(terms.speaker_embedder(reference),
                                           terms.speaker_embedder(estimate))
    if terms.phoneme_features is not None:
        out["phoneme"] = feature_matching_loss(terms.phoneme_features(reference),
                                               terms.phoneme_features(estimate))
    out["total"] = sum(wt.get(k, 1.0) * v for k, v in out.items())
    return out


METRICS = {
    "sdr": (sdr, "higher_better"),
    "si_sdr": (si_sdr, "higher_better"),
    "lsd": (log_spectral_distance, "lower_better"),
    "mcd": (mel_cepstral_distortion, "lower_better"),
    "mel": (multiscale_mel_distance, "lower_better"),
}


def evaluate_metric(name: str, reference: Waveform, estimate: Waveform) -> MetricValue:
    fn, direction = METRICS[name]
    value = fn(reference, estimate)
    capped = name in ("sdr", "si_sdr") and abs(value) >= DB_CAP
    return MetricValue(name, value, direction, capped=capped)
