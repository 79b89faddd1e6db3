"""On-the-fly degradation: SNR mixing, reverberation and the seven distortion types.

Every transform is deterministic given its inputs and integer seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio_io import Waveform
from .dsp import convolve, fir_lowpass, lowpass_taps
from .errors import InvalidCutoff, MissingResource, RateMismatch, ZeroNoise

ACTIVE_FRAME_S = 0.02
ACTIVE_GATE_DB = -50.0
PEAK_LIMIT = 0.99
DEFAULT_SNR_RANGE = (-5.0, 20.0)
MU = 255.0
FADE_MS = 2.0
WIND_CUTOFF_HZ = 400.0


def child_seed(seed: int, *path: int) -> int:
    """Independent 64-bit seed for a sub-component."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *path])
    return int(ss.generate_state(1, np.uint64)[0])


def active_power(x: np.ndarray, sample_rate: int) -> float:
    """Mean power over 20 ms frames whose level is above -50 dB.

    Levels are measured relative to the signal peak (dBFS after peak
    normalization), so scaling a signal scales this power exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak == 0.0:
        return 0.0
    frame = max(1, int(round(ACTIVE_FRAME_S * sample_rate)))
    n_frames = -(-len(x) // frame)
    padded = np.zeros(n_frames * frame)
    padded[:len(x)] = x / peak
    counts = np.full(n_frames, frame)
    counts[-1] = len(x) - (n_frames - 1) * frame
    energy = np.sum(padded.reshape(n_frames, frame) ** 2, axis=1)
    level = 10.0 * np.log10(np.maximum(energy / counts, 1e-300))
    active = level > ACTIVE_GATE_DB
    return float(energy[active].sum() / counts[active].sum() * peak ** 2)


def measured_snr(speech: np.ndarray, noise: np.ndarray, sample_rate: int) -> float:
    return 10.0 * np.log10(active_power(speech, sample_rate) / active_power(noise, sample_rate))


def _peak_gain(x: np.ndarray) -> float:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return min(1.0, PEAK_LIMIT / peak) if peak > 0 else 1.0


def _mix(speech: Waveform, noise: Waveform, snr_db: float, seed: int):
    if speech.sample_rate != noise.sample_rate:
        raise RateMismatch(f"speech {speech.sample_rate} Hz vs noise {noise.sample_rate} Hz")
    if len(noise) < len(speech):
        raise ValueError("noise must be at least as long as speech")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, len(noise) - len(speech) + 1))
    n = noise.samples[offset:offset + len(speech)]
    if not np.any(n):
        raise ZeroNoise("noise segment is all zeros")
    ps = active_power(speech.samples, speech.sample_rate)
    pn = active_power(n, speech.sample_rate)
    scale = np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0))) if ps > 0 else 1.0
    scaled = n * scale
    mixture = speech.samples + scaled
    g = _peak_gain(mixture)
    return mixture * g, scaled * g, g


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float,
               seed: int = 0) -> tuple[Waveform, Waveform]:
    """Mix noise into speech at ``snr_db`` (active-power definition).

    Noise is cropped at a seeded offset. The mixture is peak-limited to 0.99 and
    the same gain is applied to the returned scaled noise.
    """
    mixture, scaled, _ = _mix(speech, noise, snr_db, seed)
    return speech.with_samples(mixture), speech.with_samples(scaled)


def apply_rir(speech: Waveform, rir: Waveform) -> Waveform:
    """Reverberate, realign the RIR's strongest tap to lag 0 and restore input RMS."""
    if speech.sample_rate != rir.sample_rate:
        raise RateMismatch(f"speech {speech.sample_rate} Hz vs rir {rir.sample_rate} Hz")
    if len(rir) == 0:
        raise ValueError("rir must be nonempty")
    peak = int(np.argmax(np.abs(rir.samples)))
    full = convolve(speech, rir.samples, "full").samples
    out = full[peak:peak + len(speech)]
    rms_in = np.sqrt(np.mean(speech.samples ** 2)) if len(speech) else 0.0
    rms_out = np.sqrt(np.mean(out ** 2)) if len(out) else 0.0
    if rms_out > 0:
        out = out * (rms_in / rms_out)
    return speech.with_samples(out)


def _transition(cutoff: float, sample_rate: int) -> float:
    return min(0.2 * cutoff, 2.0 * (sample_rate / 2 - cutoff))


def zero_phase_lowpass(x: np.ndarray, cutoff: float, sample_rate: int) -> np.ndarray:
    taps = lowpass_taps(cutoff, sample_rate, _transition(cutoff, sample_rate))
    h = fir_lowpass(cutoff, sample_rate, taps)
    if len(x) == 0:
        return x
    pad = taps
    ext = np.pad(x, pad, mode="reflect", reflect_type="odd") if len(x) > 1 else np.full(len(x) + 2 * pad, x[0])
    w = Waveform(ext, sample_rate)
    fwd = convolve(w, h, "same").samples
    bwd = convolve(Waveform(fwd[::-1], sample_rate), h, "same").samples[::-1]
    return bwd[pad:pad + len(x)]


def bandwidth_limit(w: Waveform, cutoff_hz: float) -> Waveform:
    """Zero-phase (forward-backward) Kaiser FIR lowpass; length preserved."""
    if not 0 < cutoff_hz < w.sample_rate / 2:
        raise InvalidCutoff(f"cutoff {cutoff_hz} Hz outside (0, {w.sample_rate / 2})")
    return w.with_samples(zero_phase_lowpass(w.samples, cutoff_hz, w.sample_rate))


def clip(w: Waveform, threshold_fraction: float) -> Waveform:
    if not 0 < threshold_fraction <= 1:
        raise ValueError("threshold_fraction must be in (0, 1]")
    if threshold_fraction == 1:
        return w
    thr = threshold_fraction * (np.max(np.abs(w.samples)) if len(w) else 0.0)
    return w.with_samples(np.clip(w.samples, -thr, thr))


def codec_surrogate(w: Waveform, bits: int, cutoff_hz: float) -> Waveform:
    """Lowpass, mu-law compand, quantize to 2**bits levels, expand.

    A lossy stand-in for perceptual codecs; not equivalent to mp3 or ogg.
    """
    if not 4 <= bits <= 16:
        raise ValueError("bits must be in [4, 16]")
    y = bandwidth_limit(w, cutoff_hz).samples
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak == 0.0:
        return w.with_samples(y)
    u = y / peak
    comp = np.sign(u) * np.log1p(MU * np.abs(u)) / np.log1p(MU)
    # mid-tread grid: zero is representable
    steps = float(2 ** (bits - 1) - 1)
    q = np.rint(comp * steps) / steps
    exp = np.sign(q) * np.expm1(np.abs(q) * np.log1p(MU)) / MU
    return w.with_samples(exp * peak)


def packet_loss_mask(n_frames: int, rate: float, seed: int) -> np.ndarray:
    """Boolean per-frame drop decisions."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    return np.random.default_rng(seed).random(n_frames) < rate


def packet_loss(w: Waveform, rate: float, burst_ms: float, seed: int = 0) -> Waveform:
    """Zero whole ``burst_ms`` frames with probability ``rate``; 2 ms fades at the edges."""
    if burst_ms <= 0:
        raise ValueError("burst_ms must be positive")
    n = len(w)
    if n == 0 or rate == 0:
        return w
    frame = max(1, int(round(burst_ms * w.sample_rate / 1000.0)))
    n_frames = -(-n // frame)
    dropped = np.repeat(packet_loss_mask(n_frames, rate, seed), frame)[:n]
    if not dropped.any():
        return w
    idx = np.arange(n)
    last = np.maximum.accumulate(np.where(dropped, idx, -n - 1))
    nxt = np.minimum.accumulate(np.where(dropped, idx, 3 * n + 1)[::-1])[::-1]
    dist = np.minimum(idx - last, nxt - idx).astype(np.float64)
    fade = max(1, int(round(FADE_MS * w.sample_rate / 1000.0)))
    gain = np.clip(dist / fade, 0.0, 1.0)
    return w.with_samples(w.samples * gain)


def wind_noise(num_samples: int, sample_rate: int, gust_rate_hz: float, seed: int = 0) -> np.ndarray:
    """Low-frequency red noise under a smooth random gust envelope."""
    if gust_rate_hz <= 0:
        raise ValueError("gust_rate_hz must be positive")
    if num_samples == 0:
        return np.zeros(0)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(num_samples)
    # leaky integration: 1/f^2 spectrum above a 10 Hz corner
    a = np.exp(-2.0 * np.pi * 10.0 / sample_rate)
    red = lfilter([1.0], [1.0, -a], white)
    cutoff = min(WIND_CUTOFF_HZ, 0.45 * sample_rate)
    red = zero_phase_lowpass(red, cutoff, sample_rate)
    n_ctrl = int(np.ceil(num_samples / sample_rate * gust_rate_hz)) + 2
    ctrl = rng.standard_normal(n_ctrl)
    pos = np.arange(num_samples) * gust_rate_hz / sample_rate
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    smooth = 0.5 - 0.5 * np.cos(np.pi * frac)
    env = np.exp(0.8 * (ctrl[i0] * (1.0 - smooth) + ctrl[i0 + 1] * smooth))
    return red * env


def _wind(w: Waveform, snr_db: float, gust_rate_hz: float, seed: int):
    noise = Waveform(wind_noise(len(w), w.sample_rate, gust_rate_hz, seed), w.sample_rate)
    return _mix(w, noise, snr_db, child_seed(seed, 1))


def wind_noise_surrogate(w: Waveform, snr_db: float, gust_rate_hz: float, seed: int = 0) -> Waveform:
    """Add gusty low-frequency noise at ``snr_db``; a stand-in for a physical wind model."""
    mixture, _, _ = _wind(w, snr_db, gust_rate_hz, seed)
    return w.with_samples(mixture)


STEP_PARAMS = {
    "bandwidth_limit": ("cutoff_hz",),
    "clip": ("threshold_fraction",),
    "codec_surrogate": ("bits", "cutoff_hz"),
    "packet_loss": ("rate", "burst_ms"),
    "wind_noise": ("snr_db", "gust_rate_hz"),
}


@dataclass(frozen=True)
class DistortionStep:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STEP_PARAMS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; valid: {sorted(STEP_PARAMS)}")
        missing = [p for p in STEP_PARAMS[self.kind] if p not in self.params]
        extra = [p for p in self.params if p not in STEP_PARAMS[self.kind]]
        if missing or extra:
            raise ValueError(f"{self.kind}: missing {missing}, unexpected {extra}")
        p = self.params
        if self.kind == "clip" and not 0 < p["threshold_fraction"] <= 1:
            raise ValueError("threshold_fraction must be in (0, 1]")
        if self.kind == "packet_loss" and not (0 <= p["rate"] <= 1 and p["burst_ms"] > 0):
            raise ValueError("packet_loss needs 0 <= rate <= 1 and burst_ms > 0")
        if self.kind == "codec_surrogate" and not 4 <= p["bits"] <= 16:
            raise ValueError("bits must be in [4, 16]")
        if self.kind == "wind_noise" and p["gust_rate_hz"] <= 0:
            raise ValueError("gust_rate_hz must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionStep":
        d = dict(d)
        kind = d.pop("kind")
        d.update(d.pop("params", None) or {})  # nested form is accepted too
        return cls(kind, d)


@dataclass(frozen=True)
class DistortionRecipe:
    seed: int = 0
    snr_db: float | None = None
    rir: str | None = None
    chain: tuple[DistortionStep, ...] = ()

    def to_dict(self) -> dict:
        return {"seed": self.seed, "snr_db": self.snr_db, "rir": self.rir,
                "chain": [s.to_dict() for s in self.chain]}

    @classmethod
    def from_dict(cls, d: dict | None) -> "DistortionRecipe":
        d = d or {}
        return cls(
            seed=int(d.get("seed", 0) or 0),
            snr_db=None if d.get("snr_db") is None else float(d["snr_db"]),
            rir=d.get("rir"),
            chain=tuple(DistortionStep.from_dict(s) for s in d.get("chain", ())),
        )

    def resolved(self, has_noise: bool, snr_range=DEFAULT_SNR_RANGE) -> "DistortionRecipe":
        """Fill an absent SNR by a seeded uniform draw when noise is present."""
        if not has_noise or self.snr_db is not None:
            return self
        rng = np.random.default_rng(child_seed(self.seed, 0, 1))
        snr = float(rng.uniform(*snr_range))
        return DistortionRecipe(self.seed, snr, self.rir, self.chain)


def _tile(noise: Waveform, n: int) -> Waveform:
    if len(noise) >= n:
        return noise
    reps = -(-n // len(noise))
    return noise.with_samples(np.tile(noise.samples, reps))


def apply_recipe(speech: Waveform, noise: Waveform | None, rir: Waveform | None,
                 recipe: DistortionRecipe) -> tuple[Waveform, Waveform]:
    """Degrade ``speech``: RIR, then noise, then chain steps in order.

    Returns (degraded, target). The target is the dry speech, carrying every
    gain applied to the degraded signal.
    """
    if recipe.rir is not None and rir is None:
        raise MissingResource(f"recipe references rir {recipe.rir!r} but none was supplied")
    if recipe.snr_db is not None and noise is None:
        raise MissingResource("recipe sets snr_db but no noise was supplied")
    recipe = recipe.resolved(noise is not None)
    target = speech.samples
    degraded = apply_rir(speech, rir).samples if rir is not None else speech.samples
    if noise is not None:
        noise = _tile(noise, len(speech))
        degraded, _, g = _mix(speech.with_samples(degraded), noise, recipe.snr_db,
                              child_seed(recipe.seed, 0, 2))
        target = target * g
    for i, step in enumerate(recipe.chain):
        cur = speech.with_samples(degraded)
        p = step.params
        seed = child_seed(recipe.seed, i + 1)
        if step.kind == "bandwidth_limit":
            degraded = bandwidth_limit(cur, p["cutoff_hz"]).samples
        elif step.kind == "clip":
            degraded = clip(cur, p["threshold_fraction"]).samples
        elif step.kind == "codec_surrogate":
            degraded = codec_surrogate(cur, int(p["bits"]), p["cutoff_hz"]).samples
        elif step.kind == "packet_loss":
            degraded = packet_loss(cur, p["rate"], p["burst_ms"], seed).samples
        elif step.kind == "wind_noise":
            degraded, _, g = _wind(cur, p["snr_db"], p["gust_rate_hz"], seed)
            target = target * g
    g = _peak_gain(degraded)
    return speech.with_samples(degraded * g), speech.with_samples(target * g)
