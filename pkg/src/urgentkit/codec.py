"""Desk-scale residual vector quantization codec over log-mel frames, plus token utilities.

The codec front-end is a mel spectrogram; features are ``log(1 + mel / floor)``
so silence maps to the zero vector. Decoding inverts the filterbank by
projected-gradient non-negative least squares and recovers phase with
Griffin-Lim.
"""
from __future__ import annotations

import hashlib
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._kernels import rvq_assign
from .audio_io import Waveform, resample
from .dsp import StftConfig, istft, mel_filterbank, stft
from .errors import (EmptyMask, FrameAlignmentFailure, HashMismatch, InsufficientData,
                     MalformedContainer, ShapeMismatch)
from .pipeline import Stage

MAGIC = b"RVQ1"
MEL_FLOOR = 1e-5
# decoded features below this are treated as silence
SILENCE_GATE = 0.05
KMEANS_ITERS = 50
KMEANS_TOL = 1e-6
NNLS_ITERS = 20
GRIFFIN_LIM_ITERS = 32
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class CodecFrameConfig:
    sample_rate: int = 44100
    fft_size: int = 2048
    hop: int = 512
    n_mels: int = 80
    fmin: int = 0
    fmax: int | None = None

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop)

    @property
    def band_top(self) -> int:
        return self.fmax if self.fmax is not None else self.sample_rate // 2

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def filterbank(self):
        return _filterbank(self)


_FB_CACHE: dict = {}


def _filterbank(cfg: CodecFrameConfig):
    key = (cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.band_top)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg.n_mels, cfg.sample_rate, cfg.fft_size,
                                        cfg.fmin, cfg.band_top)
    return _FB_CACHE[key]


def mel_features(w: Waveform, cfg: CodecFrameConfig) -> np.ndarray:
    """(frames, n_mels) codec features of ``w`` (must already be at cfg.sample_rate)."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz input, got {w.sample_rate} Hz")
    mag = np.abs(stft(w, cfg.stft).frames)
    return np.log1p(cfg.filterbank().apply(mag) / MEL_FLOOR)


@dataclass(frozen=True, eq=False)
class RvqCodebooks:
    codewords: np.ndarray  # (Q, K, dim) float32
    frame_config: CodecFrameConfig = field(default_factory=CodecFrameConfig)

    def __post_init__(self):
        cw = np.array(self.codewords, dtype=np.float32)
        if cw.ndim != 3 or cw.shape[0] < 1 or cw.shape[1] < 2:
            raise ValueError("codewords must be (Q>=1, K>=2, dim)")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)

    @property
    def levels(self) -> int:
        return self.codewords.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]

    def prefix(self, q: int) -> "RvqCodebooks":
        return RvqCodebooks(self.codewords[:q], self.frame_config)

    def to_bytes(self) -> bytes:
        c = self.frame_config
        head = MAGIC + struct.pack("<9I", self.levels, self.codebook_size, self.dim,
                                   c.sample_rate, c.fft_size, c.hop, c.n_mels, c.fmin, c.band_top)
        body = head + self.codewords.astype("<f4").tobytes()
        return body + hashlib.sha256(body).digest()

    @property
    def content_hash(self) -> str:
        return self.to_bytes()[-32:].hex()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RvqCodebooks":
        if len(blob) < 4 + 36 + 32 or blob[:4] != MAGIC:
            raise MalformedContainer("not an RVQ1 codebook file")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise HashMismatch("codebook content hash does not match")
        q, k, dim, rate, n_fft, hop, n_mels, fmin, fmax = struct.unpack("<9I", body[4:40])
        payload = body[40:]
        if len(payload) != q * k * dim * 4:
            raise MalformedContainer("codeword payload size inconsistent with header")
        cw = np.frombuffer(payload, dtype="<f4").reshape(q, k, dim)
        fc = CodecFrameConfig(rate, n_fft, hop, n_mels, fmin, fmax)
        return cls(cw, fc)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RvqCodebooks":
        return cls.from_bytes(Path(path).read_bytes())


def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with the origin as the fixed first center."""
    n = len(data)
    centers = [np.zeros(data.shape[1])]
    d2 = np.sum(data ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        i = int(rng.choice(n, p=d2 / total))
        centers.append(data[i])
        d2 = np.minimum(d2, np.sum((data - data[i]) ** 2, axis=1))
    return np.array(centers)


def _fill_distinct(centers: np.ndarray, k: int, data: np.ndarray) -> np.ndarray:
    """Pad to k codewords with unused, mutually distinct points when data has too few distinct rows."""
    if len(centers) >= k:
        return centers
    scale = max(float(np.max(np.abs(data))), 1.0)
    extra = []
    for j in range(k - len(centers)):
        v = np.zeros(data.shape[1])
        v[j % data.shape[1]] = scale * (10.0 + j)
        extra.append(v)
    return np.vstack([centers, np.array(extra)])


def kmeans(data: np.ndarray, k: int, seed: int, iters: int = KMEANS_ITERS,
           tol: float = KMEANS_TOL) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; empty clusters keep their centroid.

    Codeword 0 is pinned to the origin, so quantizing with the result never
    increases a residual's norm.
    """
    rng = np.random.default_rng(seed)
    centers = _fill_distinct(_kmeans_pp(data, k, rng), k, data)
    for _ in range(iters):
        idx, _ = rvq_assign(data, centers)
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, data)
        counts = np.bincount(idx, minlength=k)
        new = centers.copy()
        hit = counts > 0
        new[hit] = sums[hit] / counts[hit, None]
        new[0] = 0.0
        shift = np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < tol:
            break
    return centers


def train_rvq(frames: np.ndarray, levels: int, codebook_size: int, seed: int = 0,
              frame_config: CodecFrameConfig | None = None) -> RvqCodebooks:
    """Fit codebooks level by level, each on the residual left by the previous levels."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] < 1:
        raise InsufficientData("frames must be a nonempty (N, dim) array")
    if len(frames) < codebook_size:
        raise InsufficientData(f"{len(frames)} frames cannot fill {codebook_size} codewords")
    residual = frames.copy()
    books = []
    for q in range(levels):
        cb = kmeans(residual, codebook_size, seed=(seed * 1000003 + q) & 0xFFFFFFFF)
        cb32 = cb.astype(np.float32).astype(np.float64)
        books.append(cb32)
        idx, _ = rvq_assign(residual, cb32)
        residual = residual - cb32[idx]
    fc = frame_config or CodecFrameConfig(n_mels=frames.shape[1])
    return RvqCodebooks(np.stack(books), fc)


def quantize_frames(frames: np.ndarray, cb: RvqCodebooks) -> tuple[np.ndarray, np.ndarray]:
    """Greedy residual quantization.

    Returns (indices (Q, T), residual norms (Q + 1, T)); norms[q] is the
    residual norm after q levels.
    """
    residual = np.asarray(frames, dtype=np.float64).copy()
    books = cb.codewords.astype(np.float64)
    idx = np.zeros((cb.levels, len(residual)), dtype=np.int64)
    norms = np.zeros((cb.levels + 1, len(residual)))
    # distances come from the assignment kernel so every norm uses one summation order
    norms[0] = np.sqrt(rvq_assign(residual, np.zeros((1, cb.dim)))[1])
    for q in range(cb.levels):
        idx[q], dist = rvq_assign(residual, books[q])
        residual = residual - books[q][idx[q]]
        norms[q + 1] = np.sqrt(dist)
    return idx, norms


def dequantize(indices: np.ndarray, cb: RvqCodebooks) -> np.ndarray:
    """Sum of selected codewords per frame, (T, dim)."""
    books = cb.codewords.astype(np.float64)
    out = np.zeros((indices.shape[1], cb.dim))
    for q in range(indices.shape[0]):
        out += books[q][indices[q]]
    return out


@dataclass(frozen=True, eq=False)
class TokenGrid:
    indices: np.ndarray  # (Q, T) int
    mask: np.ndarray  # (Q, T) bool
    frame_rate: float
    num_samples: int = 0
    sample_rate: int = 0

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        mask = np.array(self.mask, dtype=bool)
        if idx.ndim != 2 or mask.shape != idx.shape:
            raise ShapeMismatch(f"indices {idx.shape} and mask {mask.shape} must be equal 2-D shapes")
        if np.any(idx < 0):
            raise ValueError("token indices must be non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.indices.shape

    def with_mask(self, mask) -> "TokenGrid":
        return TokenGrid(self.indices, mask, self.frame_rate, self.num_samples, self.sample_rate)

    def with_indices(self, indices) -> "TokenGrid":
        return TokenGrid(indices, self.mask, self.frame_rate, self.num_samples, self.sample_rate)


def encode(w: Waveform, cb: RvqCodebooks) -> TokenGrid:
    fc = cb.frame_config
    if w.sample_rate != fc.sample_rate:
        w = resample(w, fc.sample_rate)
    idx, _ = quantize_frames(mel_features(w, fc), cb)
    return TokenGrid(idx, np.zeros_like(idx, dtype=bool), fc.frame_rate, len(w), fc.sample_rate)


def nnls_mel_inverse(mel: np.ndarray, weights: np.ndarray, iters: int = NNLS_ITERS) -> np.ndarray:
    """Non-negative magnitudes S minimizing ||S W^T - mel|| by projected gradient.

    ``mel`` is (T, n_mels), ``weights`` (n_mels, bins); returns (T, bins).
    """
    pinv = np.linalg.pinv(weights)
    s = np.maximum(mel @ pinv.T, 0.0)
    step = 1.0 / max(np.linalg.norm(weights, 2) ** 2, 1e-12)
    for _ in range(iters):
        grad = (s @ weights.T - mel) @ weights
        s = np.maximum(s - step * grad, 0.0)
    return s


def griffin_lim(magnitude: np.ndarray, cfg: StftConfig, num_samples: int, sample_rate: int,
                iters: int = GRIFFIN_LIM_ITERS) -> Waveform:
    """Phase recovery from (T, bins) magnitudes, starting from zero phase."""
    from .dsp import ComplexSpectrogram

    spec = ComplexSpectrogram(magnitude.astype(np.complex128), cfg, num_samples, sample_rate)
    y = istft(spec)
    for _ in range(iters):
        est = stft(y, cfg).frames
        phase = np.exp(1j * np.angle(est))
        y = istft(spec.with_frames(magnitude * phase))
    return y


def decode(grid: TokenGrid, cb: RvqCodebooks, num_samples: int | None = None) -> Waveform:
    fc = cb.frame_config
    feats = dequantize(grid.indices, cb)
    feats = np.where(feats < SILENCE_GATE, 0.0, feats)
    mel = MEL_FLOOR * np.expm1(feats)
    mag = nnls_mel_inverse(mel, fc.filterbank().weights)
    n = num_samples if num_samples is not None else grid.num_samples
    if not n:
        n = max(1, (grid.shape[1] - 1) * fc.hop)
    # the STFT frame count fixes the span Griffin-Lim can cover
    n_frames_needed = 1 + n // fc.hop
    t = mag.shape[0]
    if t < n_frames_needed:
        mag = np.vstack([mag, np.zeros((n_frames_needed - t, mag.shape[1]))])
    elif t > n_frames_needed:
        mag = mag[:n_frames_needed]
    return griffin_lim(mag, fc.stft, n, fc.sample_rate)


def sample_mask(frames: int, levels: int, mask_fraction: float, seed: int = 0) -> np.ndarray:
    """Per level, mask a seeded uniform subset of ceil(fraction * frames) positions."""
    if not 0 < mask_fraction <= 1:
        raise ValueError("mask_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    count = int(np.ceil(mask_fraction * frames - 1e-9))
    mask = np.zeros((levels, frames), dtype=bool)
    for q in range(levels):
        mask[q, rng.choice(frames, size=count, replace=False)] = True
    return mask


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    ssl_features: np.ndarray
    codec_features_s1: np.ndarray
    preencoded_noisy: np.ndarray
    projection: np.ndarray
    conditioning: np.ndarray

    @property
    def frames(self) -> int:
        return self.conditioning.shape[0]


def log_mel_extractor(w: Waveform, cfg: CodecFrameConfig) -> tuple[np.ndarray, float]:
    """Default feature extractor: the codec's own log-mel stack at its frame rate."""
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    return mel_features(w, cfg), cfg.frame_rate


def random_projection(d_in: int, d_model: int | None = None, seed: int = 0) -> np.ndarray:
    """Seeded (d_in, d_model) matrix with orthonormal columns."""
    d_model = d_in if d_model is None else d_model
    if d_model > d_in:
        raise ValueError("d_model cannot exceed the concatenated feature width")
    g = np.random.default_rng(seed).standard_normal((d_in, d_model))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _align(features: np.ndarray, rate: float, target_frames: int, target_rate: float,
           name: str) -> np.ndarray:
    dur_frames = len(features) * target_rate / rate
    if abs(dur_frames - target_frames) > 2:
        raise FrameAlignmentFailure(
            f"{name}: {len(features)} frames at {rate:.3f}/s vs {target_frames} codec frames"
        )
    if len(features) == 0:
        return np.zeros((target_frames, features.shape[1] if features.ndim == 2 else 0))
    src = np.clip(np.rint(np.arange(target_frames) * rate / target_rate).astype(np.int64),
                  0, len(features) - 1)
    return features[src]


def assemble_conditioning(x: Waveform, s1: Waveform, cb: RvqCodebooks,
                          extractor: Callable | None = None,
                          projection: np.ndarray | None = None,
                          pre_encoder: Callable | None = None) -> ConditioningBundle:
    """Concatenate [ssl(x); codec(s1); pre_encoder(codec(x))] and project.

    ``extractor(w)`` returns (features, frame_rate); all streams are aligned to
    the codec frame count of ``x`` by nearest-frame lookup.
    """
    if x.sample_rate != s1.sample_rate or len(x) != len(s1):
        raise ShapeMismatch("x and s1 must share length and rate")
    fc = cb.frame_config
    xr = resample(x, fc.sample_rate)
    sr = resample(s1, fc.sample_rate)
    codec_x = mel_features(xr, fc)
    codec_s1 = mel_features(sr, fc)
    n = len(codec_x)
    if extractor is None:
        ssl, ssl_rate = log_mel_extractor(xr, fc)
    else:
        ssl, ssl_rate = extractor(x)
    ssl = _align(np.asarray(ssl, dtype=np.float64), ssl_rate, n, fc.frame_rate, "ssl features")
    codec_s1 = _align(codec_s1, fc.frame_rate, n, fc.frame_rate, "codec features of s1")
    pre = codec_x if pre_encoder is None else np.asarray(pre_encoder(codec_x), dtype=np.float64)
    pre = _align(pre, fc.frame_rate, n, fc.frame_rate, "pre-encoded features")
    stacked = np.concatenate([ssl, codec_s1, pre], axis=1)
    if projection is None:
        projection = random_projection(stacked.shape[1])
    projection = np.asarray(projection, dtype=np.float64)
    if projection.shape[0] != stacked.shape[1] or not np.all(np.isfinite(projection)):
        raise ShapeMismatch(f"projection must have {stacked.shape[1]} finite rows")
    return ConditioningBundle(ssl, codec_s1, pre, projection, stacked @ projection)


def mlm_loss(probabilities: np.ndarray, targets: TokenGrid | np.ndarray, mask=None) -> float:
    """Mean negative log-likelihood of the target tokens over masked positions.

    ``probabilities`` is (Q, T, K); probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    idx = targets.indices if isinstance(targets, TokenGrid) else np.asarray(targets)
    if mask is None:
        mask = targets.mask if isinstance(targets, TokenGrid) else None
    mask = np.asarray(mask, dtype=bool)
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.shape[:2] != idx.shape or mask.shape != idx.shape:
        raise ShapeMismatch(f"probabilities {probs.shape} vs targets {idx.shape} vs mask {mask.shape}")
    if not mask.any():
        raise EmptyMask("no masked positions")
    q, t = np.nonzero(mask)
    p = np.clip(probs[q, t, idx[q, t]], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(np.log(p)))


class Predictor(ABC):
    """Maps (conditioning, masked grid) to (Q, T, K) probability rows."""

    @abstractmethod
    def predict(self, cond: ConditioningBundle, grid: TokenGrid) -> np.ndarray:
        ...


def one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(indices.shape + (k,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


class UniformPredictor(Predictor):
    def __init__(self, codebook_size: int):
        self.k = codebook_size

    def predict(self, cond, grid):
        return np.full(grid.shape + (self.k,), 1.0 / self.k)


class OraclePredictor(Predictor):
    """One-hot at known true tokens."""

    def __init__(self, truth: np.ndarray, codebook_size: int):
        self.truth = np.asarray(truth, dtype=np.int64)
        self.k = codebook_size

    def predict(self, cond, grid):
        return one_hot(self.truth, self.k)


class CopyPredictor(Predictor):
    """One-hot at the tokens of the stage-1 estimate, read from the conditioning bundle."""

    def __init__(self, cb: RvqCodebooks):
        self.cb = cb

    def predict(self, cond, grid):
        idx, _ = quantize_frames(cond.codec_features_s1, self.cb)
        return one_hot(idx, self.cb.codebook_size)


def greedy_decode(predictor: Predictor, cond: ConditioningBundle, grid: TokenGrid) -> TokenGrid:
    """Fill every masked position with its argmax token in a single predictor call."""
    if not grid.mask.any():
        return grid
    probs = np.asarray(predictor.predict(cond, grid))
    if probs.shape[:2] != grid.shape:
        raise ShapeMismatch(f"predictor returned {probs.shape[:2]} rows for grid {grid.shape}")
    best = np.argmax(probs, axis=-1)
    return grid.with_indices(np.where(grid.mask, best, grid.indices))


class TokenStage(Stage):
    """Stage-2 refinement: mask every token of s1, predict, and decode.

    Takes the bundle (x, s1) and returns a waveform at the input rate and length.
    """

    name = "token"
    context = "full"
    n_inputs = 2

    def __init__(self, cb: RvqCodebooks, predictor: Predictor | None = None,
                 extractor: Callable | None = None, projection: np.ndarray | None = None,
                 mask_policy: str = "all_masked"):
        if mask_policy != "all_masked":
            raise ValueError(f"unsupported mask policy {mask_policy!r}")
        self.cb = cb
        self.predictor = predictor or CopyPredictor(cb)
        self.extractor = extractor
        self.projection = projection

    def enhance(self, *signals):
        x, s1 = signals[0], signals[1]
        n, rate = len(x), x.sample_rate
        if n == 0:
            return x
        fc = self.cb.frame_config
        cond = assemble_conditioning(x, s1, self.cb, self.extractor, self.projection)
        n_codec = int(round(n * fc.sample_rate / rate))
        grid = TokenGrid(np.zeros((self.cb.levels, cond.frames), dtype=np.int64),
                         np.ones((self.cb.levels, cond.frames), dtype=bool),
                         fc.frame_rate, n_codec, fc.sample_rate)
        filled = greedy_decode(self.predictor, cond, grid)
        out = decode(filled, self.cb, n_codec)
        out = resample(out, rate)
        x_out = out.samples[:n]
        if len(x_out) < n:
            x_out = np.concatenate([x_out, np.zeros(n - len(x_out))])
        return x.with_samples(x_out)


def token_stage(cb, predictor=None, extractor=None, projection=None,
                mask_policy: str = "all_masked") -> TokenStage:
    return TokenStage(cb, predictor, extractor, projection, mask_policy)


def corpus_features(waves, cfg: CodecFrameConfig) -> np.ndarray:
    """Stack codec features of several waveforms (resampled to the codec rate)."""
    feats = [mel_features(resample(w, cfg.sample_rate), cfg) for w in waves]
    return np.vstack(feats)
