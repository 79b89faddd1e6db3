"""Waveform container, RIFF/WAVE reading and writing, and rational resampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._kernels import polyphase_resample
from .errors import EmptyPayload, IoFailure, MalformedContainer, UnsupportedEncoding

ENCODINGS = ("pcm16", "pcm24", "float32")

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE

# resampler design: Kaiser window, 64 taps per polyphase branch measured at
# the lower rate, cutoff at 0.95 of the lower Nyquist
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_CUTOFF = 0.95
RESAMPLE_BETA = 7.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono sample buffer plus its sample rate.

    Samples are stored as a read-only float64 array.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def __repr__(self) -> str:
        return f"Waveform(n={len(self)}, sample_rate={self.sample_rate})"


@dataclass(frozen=True)
class AudioFileMeta:
    path: str
    channels: int
    sample_rate: int
    encoding: str
    duration_samples: int


def _parse_chunks(data: bytes, path) -> tuple[bytes, bytes]:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise MalformedContainer(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise MalformedContainer(f"{path}: missing or short fmt chunk")
    if payload is None:
        raise MalformedContainer(f"{path}: missing data chunk")
    return fmt, payload


def _decode_fmt(fmt: bytes, path) -> tuple[int, int, str]:
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedContainer(f"{path}: short WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise MalformedContainer(f"{path}: invalid channel count or sample rate")
    if tag == _FORMAT_PCM and bits == 16:
        enc = "pcm16"
    elif tag == _FORMAT_PCM and bits == 24:
        enc = "pcm24"
    elif tag == _FORMAT_FLOAT and bits == 32:
        enc = "float32"
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag} with {bits} bits")
    if block_align != channels * bits // 8:
        raise MalformedContainer(f"{path}: block_align inconsistent with channels/bits")
    return channels, rate, enc


def read_wav_meta(path) -> AudioFileMeta:
    data = Path(path).read_bytes()
    fmt, payload = _parse_chunks(data, path)
    channels, rate, enc = _decode_fmt(fmt, path)
    width = {"pcm16": 2, "pcm24": 3, "float32": 4}[enc] * channels
    return AudioFileMeta(str(path), channels, rate, enc, len(payload) // width)


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file as a mono Waveform.

    Multichannel files are downmixed by the arithmetic mean across channels.
    Integer PCM is scaled by full scale (2**15 for pcm16, 2**23 for pcm24).
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    fmt, payload = _parse_chunks(data, path)
    channels, rate, enc = _decode_fmt(fmt, path)
    width = {"pcm16": 2, "pcm24": 3, "float32": 4}[enc]
    n_frames = len(payload) // (width * channels)
    if n_frames == 0:
        raise EmptyPayload(f"{path}: no sample frames")
    payload = payload[:n_frames * width * channels]
    if enc == "pcm16":
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif enc == "pcm24":
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        val = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        val = np.where(val >= 1 << 23, val - (1 << 24), val)
        x = val.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    x = x.reshape(n_frames, channels)
    mono = x[:, 0] if channels == 1 else x.mean(axis=1)
    if not np.all(np.isfinite(mono)):
        raise MalformedContainer(f"{path}: non-finite samples")
    return Waveform(mono, rate)


def write_wav(w: Waveform, path, encoding: str = "float32") -> None:
    """Write a mono WAVE file.

    Integer encodings clamp to [-1, 1) before rounding to the nearest code.
    """
    if encoding not in ENCODINGS:
        raise UnsupportedEncoding(f"unsupported encoding {encoding!r}")
    x = w.samples
    if encoding == "pcm16":
        q = np.clip(np.rint(np.clip(x, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
        payload, tag, bits = q.tobytes(), _FORMAT_PCM, 16
    elif encoding == "pcm24":
        q = np.clip(np.rint(np.clip(x, -1.0, 1.0) * float(1 << 23)), -(1 << 23), (1 << 23) - 1)
        q = q.astype(np.int32) & 0xFFFFFF
        b = np.stack([q & 0xFF, (q >> 8) & 0xFF, (q >> 16) & 0xFF], axis=1).astype(np.uint8)
        payload, tag, bits = b.tobytes(), _FORMAT_PCM, 24
    else:
        payload, tag, bits = x.astype("<f4").tobytes(), _FORMAT_FLOAT, 32
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    blob = b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for an up/down polyphase resampler."""
    factor = max(up, down)
    n_taps = RESAMPLE_TAPS_PER_PHASE * factor + 1
    cutoff = RESAMPLE_CUTOFF / factor
    t = np.arange(n_taps) - (n_taps - 1) / 2
    h = cutoff * np.sinc(cutoff * t) * np.kaiser(n_taps, RESAMPLE_BETA)
    return h * (up / h.sum())


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(int(target_rate), w.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    if len(w) == 0 or n_out == 0:
        return Waveform(np.zeros(n_out), target_rate)
    y = polyphase_resample(w.samples, resample_filter(up, down), up, down, n_out)
    return Waveform(y, target_rate)
