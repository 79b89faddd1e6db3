"""STFT/ISTFT, mel filterbanks, FIR design and FFT convolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from ._kernels import overlap_add
from .audio_io import Waveform
from .errors import DegenerateOverlap, InvalidBand, InvalidCutoff


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 4096
    hop: int = 1024
    window: str = "hann"
    center_padding: bool = True

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if not 1 <= self.hop <= n:
            raise ValueError(f"hop must lie in [1, fft_size], got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


# 4096-point Hann with 75% overlap
DEFAULT_STFT = StftConfig(4096, 1024)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """``frames`` is (n_frames, fft_size // 2 + 1) complex128."""

    frames: np.ndarray
    config: StftConfig
    source_len: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(np.asarray(frames, dtype=np.complex128), self.config,
                                  self.source_len, self.sample_rate)


def hann(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if len(x) == 1:
        return np.full(len(x) + 2 * pad, x[0])
    return np.pad(x, pad, mode="reflect")


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n = cfg.fft_size
    if cfg.center_padding:
        x = _reflect_pad(x, n // 2)
    if len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    n_frames = 1 + (len(x) - n) // cfg.hop
    return np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, n), strides=(x.strides[0] * cfg.hop, x.strides[0]), writeable=False
    )


def stft(w: Waveform, cfg: StftConfig = DEFAULT_STFT) -> ComplexSpectrogram:
    if len(w) < 1:
        raise ValueError("stft needs at least one sample")
    frames = frame_signal(np.ascontiguousarray(w.samples), cfg) * hann(cfg.fft_size)
    spec = np.fft.rfft(frames, axis=1)
    return ComplexSpectrogram(spec, cfg, len(w), w.sample_rate)


def window_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Summed squared synthesis window over ``n_frames`` frames."""
    win2 = np.tile(hann(cfg.fft_size) ** 2, (n_frames, 1))
    return overlap_add(win2, cfg.hop, (n_frames - 1) * cfg.hop + cfg.fft_size)


def istft(s: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``source_len``."""
    cfg = s.config
    n = cfg.fft_size
    win = hann(n)
    frames = np.fft.irfft(s.frames, n=n, axis=1) * win
    total = (s.n_frames - 1) * cfg.hop + n
    y = overlap_add(frames, cfg.hop, total)
    env = window_envelope(cfg, s.n_frames)
    start = n // 2 if cfg.center_padding else 0
    stop = start + s.source_len
    if stop > total:
        y = np.concatenate([y, np.zeros(stop - total)])
        env = np.concatenate([env, np.zeros(stop - total)])
    seg_env = env[start:stop]
    if np.any(seg_env < 1e-8):
        raise DegenerateOverlap(
            f"squared-window sum falls below 1e-8 (fft_size={n}, hop={cfg.hop})"
        )
    return Waveform(y[start:stop] / seg_env, s.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    n_mels: int
    sample_rate: int
    fft_size: int
    fmin: float
    fmax: float
    weights: np.ndarray  # (n_mels, fft_size // 2 + 1)

    def apply(self, magnitudes: np.ndarray) -> np.ndarray:
        """Project (frames, bins) magnitudes to (frames, n_mels)."""
        return magnitudes @ self.weights.T


def _triangles(n_mels, sample_rate, fft_size, fmin, fmax):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_filterbank(n_mels: int, sample_rate: int, fft_size: int,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """HTK-scale triangular filterbank with unit-peak triangles.

    Raises InvalidBand if the band is out of range or any filter covers no bin.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if n_mels < 1 or not 0 <= fmin < fmax <= sample_rate / 2:
        raise InvalidBand(f"invalid mel band n_mels={n_mels} fmin={fmin} fmax={fmax}")
    weights = _triangles(n_mels, sample_rate, fft_size, fmin, fmax)
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if len(empty):
        raise InvalidBand(
            f"{len(empty)} of {n_mels} mel filters cover no FFT bin at fft_size={fft_size}"
        )
    weights.setflags(write=False)
    return MelFilterbank(n_mels, sample_rate, fft_size, float(fmin), float(fmax), weights)


def usable_mels(n_mels: int, sample_rate: int, fft_size: int,
                fmin: float = 0.0, fmax: float | None = None) -> int:
    """Largest count <= n_mels whose filters all cover at least one bin."""
    if fmax is None:
        fmax = sample_rate / 2
    for m in range(n_mels, 0, -1):
        if np.all(_triangles(m, sample_rate, fft_size, fmin, fmax).sum(axis=1) > 0):
            return m
    raise InvalidBand(f"no usable mel filter for fft_size={fft_size}")


def kaiser_sinc(cutoff_norm: float, taps: int, beta: float = 8.6) -> np.ndarray:
    """Windowed-sinc lowpass; ``cutoff_norm`` is cutoff / sample_rate."""
    t = np.arange(taps) - (taps - 1) / 2
    h = 2.0 * cutoff_norm * np.sinc(2.0 * cutoff_norm * t) * np.kaiser(taps, beta)
    h = h / h.sum()
    # enforce exact symmetry against rounding in the window
    return 0.5 * (h + h[::-1])


def fir_lowpass(cutoff: float, sample_rate: int, taps: int = 255) -> np.ndarray:
    """Linear-phase Kaiser (beta 8.6) windowed-sinc lowpass, unit DC gain."""
    if not 0 < cutoff < sample_rate / 2:
        raise InvalidCutoff(f"cutoff {cutoff} Hz outside (0, {sample_rate / 2})")
    if taps < 1 or taps % 2 == 0:
        raise ValueError("taps must be a positive odd integer")
    return kaiser_sinc(cutoff / sample_rate, taps)


def lowpass_taps(cutoff: float, sample_rate: int, transition: float | None = None,
                 atten_db: float = 86.0, max_taps: int = 16383) -> int:
    """Odd tap count for a Kaiser lowpass with the given full transition width."""
    if transition is None:
        transition = 0.2 * cutoff
    dw = 2.0 * np.pi * transition / sample_rate
    n = int(np.ceil((atten_db - 7.95) / (2.285 * dw))) + 1
    n = min(max(n, 31), max_taps)
    return n | 1


def _fft_convolve_full(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n_out = len(x) + len(k) - 1
    if min(len(x), len(k)) <= 32:
        return np.convolve(x, k)
    # overlap-save with a block size a few times the kernel length
    m = len(k)
    nfft = sp_fft.next_fast_len(max(4 * m, 1024))
    step = nfft - m + 1
    kf = np.fft.rfft(k, nfft)
    padded = np.concatenate([np.zeros(m - 1), x, np.zeros(m - 1 + step)])
    out = np.empty(n_out)
    pos = 0
    while pos < n_out:
        block = padded[pos:pos + nfft]
        if len(block) < nfft:
            block = np.concatenate([block, np.zeros(nfft - len(block))])
        y = np.fft.irfft(np.fft.rfft(block) * kf, nfft)[m - 1:]
        take = min(step, n_out - pos)
        out[pos:pos + take] = y[:take]
        pos += take
    return out


def convolve(w: Waveform, kernel, mode: str = "full") -> Waveform:
    """FFT overlap-save convolution. ``same`` keeps the centered len(w) samples."""
    k = np.asarray(kernel, dtype=np.float64).reshape(-1)
    if len(k) == 0:
        raise ValueError("kernel must be nonempty")
    if len(w) == 0:
        return w
    full = _fft_convolve_full(w.samples, k)
    if mode == "full":
        return w.with_samples(full)
    if mode == "same":
        start = (len(k) - 1) // 2
        return w.with_samples(full[start:start + len(w)])
    raise ValueError(f"unknown mode {mode!r}")
