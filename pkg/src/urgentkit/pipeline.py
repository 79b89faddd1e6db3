"""Multi-stage enhancement: stage runners, shift aggregation, blending and the full pipeline."""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .audio_io import Waveform, resample
from .errors import LengthMismatch, RateMismatch

log = logging.getLogger(__name__)


class Stage(ABC):
    """One enhancement stage.

    ``enhance`` receives the stage's input bundle: a single waveform for a
    first stage, ``(x, s1)`` for a refinement stage, ``(x, s1, s2)`` for a
    fusion stage. Output length and rate equal those of ``signals[0]``.
    """

    name: str = "stage"
    expected_rate: int | None = None
    context: str = "chunked"  # or "full"
    n_inputs: int = 1

    @abstractmethod
    def enhance(self, *signals: Waveform) -> Waveform:
        ...

    def __call__(self, *signals: Waveform) -> Waveform:
        if self.expected_rate is not None and signals[0].sample_rate != self.expected_rate:
            rate = signals[0].sample_rate
            inner = [resample(s, self.expected_rate) for s in signals]
            out = resample(self.enhance(*inner), rate)
            return _fit(out, len(signals[0]))
        return self.enhance(*signals)


def _fit(w: Waveform, n: int) -> Waveform:
    x = w.samples
    if len(x) >= n:
        return w.with_samples(x[:n])
    return w.with_samples(np.concatenate([x, np.zeros(n - len(x))]))


class IdentityStage(Stage):
    name = "identity"

    def enhance(self, *signals):
        return signals[0]


class GainStage(Stage):
    name = "gain"

    def __init__(self, gain: float):
        self.gain = gain

    def enhance(self, *signals):
        return signals[0].with_samples(signals[0].samples * self.gain)


class FunctionStage(Stage):
    """Wrap a plain ``ndarray -> ndarray`` function applied to the first input."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str = "function",
                 context: str = "chunked"):
        self.fn = fn
        self.name = name
        self.context = context

    def enhance(self, *signals):
        return signals[0].with_samples(self.fn(signals[0].samples))


class PickStage(Stage):
    """Apply a single-input stage to one member of a bundle."""

    def __init__(self, inner: Stage, index: int):
        self.inner, self.index = inner, index
        self.name = inner.name
        self.context = inner.context
        self.expected_rate = None

    def enhance(self, *signals):
        return self.inner(signals[self.index])


class FusionStage(Stage):
    """Combine ``[x; s1; s2]`` channel-wise with fixed weights, then run ``inner``.

    A deterministic stand-in for a trained fusion network.
    """

    n_inputs = 3

    def __init__(self, inner: Stage | None = None, weights: Sequence[float] = (0.0, 0.5, 0.5)):
        if len(weights) != 3:
            raise ValueError("fusion weights need one entry per input channel")
        self.inner = inner or IdentityStage()
        self.weights = tuple(float(v) for v in weights)
        self.name = f"fusion({self.inner.name})"
        self.context = self.inner.context

    def enhance(self, *signals):
        fused = FusionInput(*signals[:3]).stack().T @ np.asarray(self.weights)
        return self.inner(signals[0].with_samples(fused))


@dataclass(frozen=True)
class FusionInput:
    noisy: Waveform
    s1: Waveform
    s2: Waveform

    def __post_init__(self):
        rates = {self.noisy.sample_rate, self.s1.sample_rate, self.s2.sample_rate}
        if len(rates) != 1:
            raise RateMismatch(f"fusion inputs have rates {sorted(rates)}")
        if not len(self.noisy) == len(self.s1) == len(self.s2):
            raise LengthMismatch("fusion inputs must have equal lengths")

    def stack(self) -> np.ndarray:
        """(3, T) array in the fixed order noisy, s1, s2."""
        return np.stack([self.noisy.samples, self.s1.samples, self.s2.samples])

    def as_tuple(self) -> tuple[Waveform, Waveform, Waveform]:
        return self.noisy, self.s1, self.s2


def assemble_fusion_input(noisy: Waveform, s1: Waveform, s2: Waveform,
                          tolerance: int = 1024) -> FusionInput:
    """Validate and order the fusion triple, trimming small length differences.

    Lengths off by at most ``tolerance`` samples (one STFT hop) are trimmed to
    the shortest with a warning; larger differences raise LengthMismatch.
    """
    sigs = (noisy, s1, s2)
    rates = {s.sample_rate for s in sigs}
    if len(rates) != 1:
        raise RateMismatch(f"fusion inputs have rates {sorted(rates)}")
    lens = [len(s) for s in sigs]
    if max(lens) - min(lens) > tolerance:
        raise LengthMismatch(f"fusion input lengths {lens} differ by more than {tolerance}")
    if max(lens) != min(lens):
        log.warning("trimming fusion inputs from lengths %s to %d", lens, min(lens))
        n = min(lens)
        sigs = tuple(s.with_samples(s.samples[:n]) for s in sigs)
    return FusionInput(*sigs)


@dataclass(frozen=True)
class SlidingWindowConfig:
    window_s: float = 2.0
    overlap_fraction: float = 0.5
    crossfade: str = "raised_cosine"

    def __post_init__(self):
        if self.window_s <= 0 or not 0 < self.overlap_fraction < 1:
            raise ValueError("need window_s > 0 and 0 < overlap_fraction < 1")
        if self.crossfade != "raised_cosine":
            raise ValueError(f"unsupported crossfade {self.crossfade!r}")


def _segment_weight(length: int, ramp_in: int, ramp_out: int) -> np.ndarray:
    w = np.ones(length)
    if ramp_in:
        w[:ramp_in] = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp_in) + 0.5) / ramp_in)
    if ramp_out:
        w[length - ramp_out:] *= 0.5 + 0.5 * np.cos(np.pi * (np.arange(ramp_out) + 0.5) / ramp_out)
    return w


def _as_bundle(w) -> tuple[Waveform, ...]:
    return (w,) if isinstance(w, Waveform) else tuple(w)


def run_stage_windowed(stage: Callable[..., Waveform], w, cfg: SlidingWindowConfig | None = None) -> Waveform:
    """Enhance overlapping windows independently and crossfade them back together.

    ``w`` is a Waveform or a bundle of equal-length Waveforms; every member is
    windowed identically. Per-sample crossfade weights are normalized to sum to 1.
    """
    cfg = cfg or SlidingWindowConfig()
    bundle = _as_bundle(w)
    ref = bundle[0]
    n = len(ref)
    win = max(1, int(round(cfg.window_s * ref.sample_rate)))
    hop = max(1, int(round((1.0 - cfg.overlap_fraction) * win)))
    if n <= win:
        return stage(*bundle)
    starts = list(range(0, n - win, hop))
    if starts[-1] + win < n:
        starts.append(n - win)
    ramp = min(win - hop, hop)
    acc = np.zeros(n)
    norm = np.zeros(n)
    for i, s in enumerate(starts):
        seg = tuple(b.with_samples(b.samples[s:s + win]) for b in bundle)
        out = stage(*seg).samples
        if len(out) != win:
            raise LengthMismatch(f"stage returned {len(out)} samples for a {win}-sample window")
        wt = _segment_weight(win, ramp if i > 0 else 0, ramp if i < len(starts) - 1 else 0)
        acc[s:s + win] += wt * out
        norm[s:s + win] += wt
    return ref.with_samples(acc / norm)


@dataclass(frozen=True)
class ShiftConfig:
    offsets: tuple[int, ...] = (0,)
    pad_policy: str = "zero"

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        if not offs:
            raise ValueError("offsets must be nonempty")
        if len(set(offs)) != len(offs) or min(offs) < 0:
            raise ValueError("offsets must be distinct and non-negative")
        if self.pad_policy != "zero":
            raise ValueError(f"unsupported pad policy {self.pad_policy!r}")
        object.__setattr__(self, "offsets", offs)

    def validate_for(self, sample_rate: int) -> None:
        if max(self.offsets) >= sample_rate // 2:
            raise ValueError(f"shift offsets must be below {sample_rate // 2} samples")


def default_shifts(sample_rate: int, count: int = 10, max_s: float = 0.25, seed: int = 0) -> ShiftConfig:
    """Stratified offsets over [0, max_s * rate); the first stratum is pinned to 0."""
    span = int(max_s * sample_rate)
    if count < 1 or span < count:
        raise ValueError("need 1 <= count <= max_s * sample_rate")
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, span, count + 1)
    offs = [0]
    for i in range(1, count):
        lo, hi = int(np.ceil(edges[i])), int(np.ceil(edges[i + 1]))
        offs.append(int(rng.integers(lo, max(hi, lo + 1))))
    return ShiftConfig(tuple(offs))


def shift_aggregate(runner: Callable[..., Waveform], w, cfg: ShiftConfig) -> Waveform:
    """Average stage outputs over time-advanced copies of the input bundle.

    For each offset the whole bundle is advanced (zero padded at the tail), run,
    and shifted back. Each sample averages only the copies that saw it; samples
    before the smallest offset use an unshifted pass.
    """
    bundle = _as_bundle(w)
    ref = bundle[0]
    n = len(ref)
    acc = np.zeros(n)
    count = np.zeros(n)
    for tau in sorted(cfg.offsets):
        if tau >= n and n > 0:
            continue
        shifted = tuple(
            b.with_samples(np.concatenate([b.samples[tau:], np.zeros(tau)])) for b in bundle
        )
        y = runner(*shifted).samples
        if len(y) != n:
            raise LengthMismatch(f"stage returned {len(y)} samples for {n}")
        acc[tau:] += y[:n - tau]
        count[tau:] += 1
    if np.any(count == 0):
        head = count == 0
        acc[head] = runner(*bundle).samples[head]
        count[head] = 1
    return ref.with_samples(acc / count)


@dataclass(frozen=True)
class BlendSet:
    members: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.members)
        if not m or len(set(m)) != len(m):
            raise ValueError("blend members must be a nonempty set of distinct stage ids")
        object.__setattr__(self, "members", m)


def blend(outputs: Sequence[Waveform] | dict, members: BlendSet | None = None) -> Waveform:
    """Unweighted sample-wise mean of the selected outputs.

    With a dict, ``members`` are keys; with a sequence, 1-based stage ids.
    Summation runs in sorted member order so permutations give identical bits.
    """
    if isinstance(outputs, dict):
        keys = sorted(members.members) if members else sorted(outputs)
        sel = [outputs[k] for k in keys]
    else:
        ids = sorted(members.members) if members else list(range(1, len(outputs) + 1))
        sel = [outputs[i - 1] for i in ids]
    lens = {len(s) for s in sel}
    rates = {s.sample_rate for s in sel}
    if len(lens) != 1:
        raise LengthMismatch(f"blend inputs have lengths {sorted(lens)}")
    if len(rates) != 1:
        raise RateMismatch(f"blend inputs have rates {sorted(rates)}")
    acc = np.zeros(lens.pop())
    for s in sel:
        acc = acc + s.samples
    return sel[0].with_samples(acc / len(sel))


@dataclass
class PipelineOutputs:
    s1: Waveform
    s2: Waveform
    s3: Waveform
    blended: Waveform
    raw: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, Waveform]:
        return {"s1": self.s1, "s2": self.s2, "s3": self.s3, "blend": self.blended}


def _runner(stage: Stage, window_cfg: SlidingWindowConfig | None):
    if stage.context == "chunked" and window_cfg is not None:
        return lambda *sig: run_stage_windowed(stage, sig, window_cfg)
    return stage


def _aggregate(stage, bundle, shift_cfg, window_cfg):
    run = _runner(stage, window_cfg)
    if shift_cfg is None:
        return run(*bundle)
    return shift_aggregate(run, bundle, shift_cfg)


def as_refiner(stage: Stage) -> Stage:
    """Second-slot adapter: a single-input stage refines s1 from the (x, s1) bundle."""
    return stage if stage.n_inputs >= 2 else PickStage(stage, 1)


def as_fuser(stage: Stage) -> Stage:
    """Third-slot adapter: a single-input stage becomes a default-weight fusion stage."""
    return stage if stage.n_inputs >= 3 else FusionStage(stage)


def run_pipeline(x: Waveform, stages: dict, shift_cfg: dict | None = None,
                 blend_set: BlendSet = BlendSet((2, 3)),
                 window_cfg: SlidingWindowConfig | None = None,
                 blend_source: str = "aggregated") -> PipelineOutputs:
    """Run stage 1, stage 2 on (x, s1), stage 3 on (x, s1, s2), then blend.

    ``stages`` maps "s1"/"s2"/"s3" to Stage objects; ``shift_cfg`` maps the same
    keys to ShiftConfig or None. ``blend_source`` selects whether the blend
    averages shift-aggregated outputs or single unshifted passes.
    """
    shift_cfg = shift_cfg or {}
    for key in ("s1", "s2", "s3"):
        if key not in stages:
            raise KeyError(f"missing stage {key!r}")
        cfg = shift_cfg.get(key)
        if cfg is not None:
            cfg.validate_for(x.sample_rate)
    st1, st2, st3 = stages["s1"], as_refiner(stages["s2"]), as_fuser(stages["s3"])

    s1 = _aggregate(st1, (x,), shift_cfg.get("s1"), window_cfg)
    s2 = _aggregate(st2, (x, s1), shift_cfg.get("s2"), window_cfg)
    fusion = assemble_fusion_input(x, s1, s2)
    s3 = _aggregate(st3, fusion.as_tuple(), shift_cfg.get("s3"), window_cfg)
    outs = {1: s1, 2: s2, 3: s3}
    raw = {}
    if blend_source == "raw":
        r1 = _aggregate(st1, (x,), None, window_cfg)
        r2 = _aggregate(st2, (x, r1), None, window_cfg)
        r3 = _aggregate(st3, (x, r1, r2), None, window_cfg)
        raw = {1: r1, 2: r2, 3: r3}
        blended = blend(raw, blend_set)
    elif blend_source == "aggregated":
        blended = blend(outs, blend_set)
    else:
        raise ValueError(f"unknown blend_source {blend_source!r}")
    return PipelineOutputs(s1, s2, s3, blended, raw)
