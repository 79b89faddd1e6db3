"""Batch operations behind the command line: simulate, enhance, evaluate, codec, report."""
from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import Waveform, read_wav, resample, write_wav
from .codec import (CodecFrameConfig, CopyPredictor, RvqCodebooks, UniformPredictor, corpus_features,
                    decode, encode, train_rvq)
from .distortions import DistortionRecipe, apply_recipe
from .enhancers import SpectralSubtractionStage, WienerStage
from .errors import ConfigError, UrgentKitError
from .manifest import (ManifestEntry, canonical_json, config_hash, read_manifest, resolve_path,
                       utterance_seed, write_manifest)
from .metrics import METRICS, evaluate_metric, multiscale_mel_distance
from .pipeline import (BlendSet, FusionStage, GainStage, IdentityStage, ShiftConfig,
                       SlidingWindowConfig, run_pipeline)

log = logging.getLogger(__name__)

SYSTEM_ORDER = ("noisy", "s1", "s2", "s3", "blend")
SYSTEM_LABELS = {"noisy": "Noisy", "s1": "Stage 1 (S1)", "s2": "Stage 2 (S2)",
                 "s3": "Stage 3 (S3)", "blend": "Blend"}
METRIC_LABELS = {"sdr": "SDR", "si_sdr": "SI-SDR", "lsd": "LSD", "mcd": "MCD", "mel": "Mel"}


def _map(fn, items, jobs: int):
    """Order-preserving map; results do not depend on the worker count."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# -- simulate ---------------------------------------------------------------

@dataclass(frozen=True)
class _SimTask:
    entry: dict
    base: str
    out_dir: str
    run_seed: int


def _simulate_one(task: _SimTask) -> dict:
    entry = ManifestEntry.from_dict(task.entry)
    base, out = Path(task.base), Path(task.out_dir)
    result = entry.to_dict()
    try:
        if entry.clean_path is None:
            raise ConfigError("entry has no clean_path")
        speech = read_wav(resolve_path(entry.clean_path, base))
        rate = int(entry.sample_rate or speech.sample_rate)
        speech = resample(speech, rate)
        noise = rir = None
        if entry.noise_path:
            noise = resample(read_wav(resolve_path(entry.noise_path, base)), rate)
        if entry.rir_path:
            rir = resample(read_wav(resolve_path(entry.rir_path, base)), rate)
        recipe = entry.recipe
        if not entry.seed_resolved:
            recipe = DistortionRecipe(utterance_seed(recipe.seed or task.run_seed, entry.utt_id),
                                      recipe.snr_db, recipe.rir, recipe.chain)
        recipe = recipe.resolved(noise is not None)
        degraded, target = apply_recipe(speech, noise, rir, recipe)
        udir = out / entry.utt_id
        udir.mkdir(parents=True, exist_ok=True)
        write_wav(degraded, udir / "degraded.wav", "float32")
        write_wav(target, udir / "target.wav", "float32")
        result.update(recipe=recipe.to_dict(), seed_resolved=True, sample_rate=rate,
                      degraded_path=f"{entry.utt_id}/degraded.wav",
                      target_path=f"{entry.utt_id}/target.wav", error=None)
        # output paths are relative to out_dir; keep inputs reachable from there
        for key in ("clean_path", "noise_path", "rir_path"):
            if result.get(key):
                result[key] = str(resolve_path(result[key], base).resolve())
    except (UrgentKitError, OSError, ValueError) as exc:
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def cmd_simulate(manifest_in, out_dir, seed: int = 0, jobs: int = 1) -> int:
    manifest_in = Path(manifest_in)
    entries = read_manifest(manifest_in)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not entries:
        return 0
    tasks = [_SimTask(e.to_dict(), str(manifest_in.parent.resolve()), str(out.resolve()), seed)
             for e in entries]
    results = _map(_simulate_one, tasks, jobs)
    write_manifest(results, out / "manifest.jsonl")
    failed = [r["utt_id"] for r in results if r.get("error")]
    for r in results:
        if r.get("error"):
            log.error("simulate %s: %s", r["utt_id"], r["error"])
    return 1 if failed else 0


# -- enhance ----------------------------------------------------------------

@lru_cache(maxsize=8)
def _codebook(path: str) -> RvqCodebooks:
    return RvqCodebooks.load(path)


def build_stage(spec: dict):
    kind = spec["type"]
    if kind == "identity":
        return IdentityStage()
    if kind == "gain":
        return GainStage(spec["gain"])
    if kind == "wiener":
        return WienerStage(spec["noise_ms"], spec["min_gain"], spec["smoothing"])
    if kind == "spectral_subtraction":
        return SpectralSubtractionStage(spec["noise_ms"], spec["oversubtraction"], spec["floor"])
    if kind == "token":
        from .codec import TokenStage

        cb = _codebook(spec["codebook"])
        pred = CopyPredictor(cb) if spec["predictor"] == "copy" else UniformPredictor(cb.codebook_size)
        return TokenStage(cb, pred)
    if kind == "fusion":
        return FusionStage(build_stage(spec["inner"]), spec["weights"])
    raise ConfigError(f"unknown stage type {kind!r}")


def input_path(d: dict) -> str | None:
    for key in ("degraded_path", "noisy_path", "clean_path"):
        if d.get(key):
            return d[key]
    return None


@dataclass(frozen=True)
class _EnhanceTask:
    entry: dict
    base: str
    out_dir: str
    config: str  # canonical JSON of the effective config


def _fit(w: Waveform, n: int) -> Waveform:
    x = w.samples[:n]
    if len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    return w.with_samples(x)


def enhance_waveform(x: Waveform, cfg: dict):
    """Run the configured pipeline on one waveform at the pipeline rate; outputs at x's rate."""
    rate = cfg["sample_rate"]
    stages = {k: build_stage(cfg["stages"][k]) for k in ("s1", "s2", "s3")}
    shifts = {k: (ShiftConfig(tuple(v["offsets"])) if v else None) for k, v in cfg["shifts"].items()}
    window = SlidingWindowConfig(**cfg["window"]) if cfg["window"] else None
    xr = resample(x, rate)
    outs = run_pipeline(xr, stages, shifts, BlendSet(tuple(cfg["blend"])), window,
                        cfg["blend_source"])
    return {k: _fit(resample(v, x.sample_rate), len(x)) for k, v in outs.as_dict().items()}


def _enhance_one(task: _EnhanceTask) -> dict:
    d = task.entry
    utt = d["utt_id"]
    try:
        src = input_path(d)
        if src is None:
            raise ConfigError("entry has no input audio path")
        x = read_wav(resolve_path(src, Path(task.base)))
        outs = enhance_waveform(x, json.loads(task.config))
        udir = Path(task.out_dir) / utt
        udir.mkdir(parents=True, exist_ok=True)
        for name, w in outs.items():
            write_wav(w, udir / f"{name}.wav", "float32")
        return {"utt_id": utt, "error": None}
    except (UrgentKitError, OSError, ValueError) as exc:
        return {"utt_id": utt, "error": f"{type(exc).__name__}: {exc}"}


def cmd_enhance(manifest, config: dict, out_dir, jobs: int = 1) -> int:
    """``config`` is an effective (normalized) pipeline config."""
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = canonical_json(config)
    tasks = [_EnhanceTask(e.to_dict(), str(manifest.parent.resolve()), str(out.resolve()), cfg_json)
             for e in entries]
    results = _map(_enhance_one, tasks, jobs)
    record = {"tool_version": __version__, "config": config, "config_hash": config_hash(config),
              "effective_shifts": config["shifts"], "blend_set": config["blend"],
              "utterances": results}
    (out / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    failed = [r for r in results if r["error"]]
    for r in failed:
        log.error("enhance %s: %s", r["utt_id"], r["error"])
    log.info("enhanced %d/%d utterances", len(results) - len(failed), len(results))
    return 1 if failed else 0


# -- evaluate / report ------------------------------------------------------

@dataclass(frozen=True)
class _EvalTask:
    entry: dict
    base: str
    enhanced_dir: str
    metrics: tuple
    systems: tuple


def _evaluate_one(task: _EvalTask) -> list[dict]:
    d = task.entry
    utt = d["utt_id"]
    base = Path(task.base)
    rows = []
    target = None
    target_err = None
    try:
        tpath = d.get("target_path") or d.get("clean_path")
        if tpath is None:
            raise ConfigError("entry has no target_path or clean_path")
        target = read_wav(resolve_path(tpath, base))
    except (UrgentKitError, OSError, ValueError) as exc:
        target_err = f"{type(exc).__name__}: {exc}"
    for system in task.systems:
        est = None
        err = target_err
        if err is None:
            try:
                if system == "noisy":
                    src = d.get("degraded_path") or d.get("noisy_path")
                    if src is None:
                        raise ConfigError("entry has no degraded_path")
                    est = read_wav(resolve_path(src, base))
                else:
                    est = read_wav(Path(task.enhanced_dir) / utt / f"{system}.wav")
                est = _fit(resample(est, target.sample_rate), len(target))
            except (UrgentKitError, OSError, ValueError) as exc:
                err = f"{type(exc).__name__}: {exc}"
        for metric in task.metrics:
            row = {"utt_id": utt, "system": system, "metric": metric, "value": None, "error": err}
            if err is None:
                try:
                    row["value"] = evaluate_metric(metric, target, est).value
                except (UrgentKitError, ValueError) as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        if r["value"] is not None:
            groups.setdefault((r["system"], r["metric"]), []).append(r["value"])
    out = []
    systems = sorted({r["system"] for r in rows}, key=_system_key)
    metrics = list(dict.fromkeys(r["metric"] for r in rows))
    for s in systems:
        for m in metrics:
            vals = groups.get((s, m), [])
            out.append({"system": s, "metric": m, "count": len(vals),
                        "mean": float(np.mean(vals)) if vals else None,
                        "median": float(statistics.median(vals)) if vals else None})
    return out


def _system_key(s: str):
    return (SYSTEM_ORDER.index(s), s) if s in SYSTEM_ORDER else (len(SYSTEM_ORDER), s)


def render_table(aggregates: list[dict]) -> str:
    """Aligned text table: one row per system, one column per metric mean."""
    systems = list(dict.fromkeys(a["system"] for a in aggregates))
    metrics = list(dict.fromkeys(a["metric"] for a in aggregates))
    cell = {(a["system"], a["metric"]): a["mean"] for a in aggregates}
    header = ["Method"] + [METRIC_LABELS.get(m, m) for m in metrics]
    body = []
    for s in systems:
        vals = [cell[(s, m)] for m in metrics]
        body.append([SYSTEM_LABELS.get(s, s)] + ["-" if v is None else f"{v:.2f}" for v in vals])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def fmt(r):
        return " | ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"


def write_report(rows, aggregates, header: dict, report_path) -> None:
    report_path = Path(report_path)
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"type": "header", **header}, sort_keys=True) + "\n")
        for r in rows:
            f.write(json.dumps({"type": "row", **r}, sort_keys=True) + "\n")
        for a in aggregates:
            f.write(json.dumps({"type": "aggregate", **a}, sort_keys=True) + "\n")
    report_path.with_suffix(".txt").write_text(render_table(aggregates), encoding="utf-8")


def read_report(path) -> tuple[dict, list[dict], list[dict]]:
    header, rows, aggs = {}, [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            kind = d.pop("type", "row")
            if kind == "header":
                header = d
            elif kind == "aggregate":
                aggs.append(d)
            else:
                rows.append(d)
    return header, rows, aggs


def cmd_evaluate(manifest, enhanced_dir, metrics, report_path, systems=None, jobs: int = 1):
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ConfigError(f"unknown metric(s) {unknown}; valid: {sorted(METRICS)}")
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    enhanced_dir = Path(enhanced_dir)
    if systems is None:
        systems = ["s1", "s2", "s3", "blend"]
        if any(e.extra.get("degraded_path") or e.extra.get("noisy_path") for e in entries):
            systems = ["noisy"] + systems
    systems = sorted(systems, key=_system_key)
    tasks = [_EvalTask(e.to_dict(), str(manifest.parent.resolve()), str(enhanced_dir.resolve()),
                       tuple(metrics), tuple(systems)) for e in entries]
    rows = [r for rs in _map(_evaluate_one, tasks, jobs) for r in rs]
    aggs = aggregate(rows)
    run_record = enhanced_dir / "run_record.json"
    run_cfg = json.loads(run_record.read_text())["config"] if run_record.exists() else None
    header = {"tool_version": __version__, "metrics": list(metrics), "systems": systems,
              "run_config_hash": config_hash({"metrics": list(metrics), "systems": systems,
                                              "pipeline": run_cfg})}
    write_report(rows, aggs, header, report_path)
    return header, rows, aggs


# -- codec ------------------------------------------------------------------

def _load_corpus(manifest=None, inputs=()) -> list[tuple[str, Waveform]]:
    waves = []
    if manifest is not None:
        manifest = Path(manifest)
        for e in read_manifest(manifest):
            p = e.clean_path or input_path(e.extra)
            waves.append((e.utt_id, read_wav(resolve_path(p, manifest.parent))))
    for p in inputs:
        waves.append((Path(p).stem, read_wav(p)))
    return waves


def cmd_codec_train(out_path, frame_config: CodecFrameConfig, levels: int, size: int, seed: int,
                    manifest=None, inputs=()) -> RvqCodebooks:
    corpus = _load_corpus(manifest, inputs)
    feats = corpus_features([w for _, w in corpus], frame_config)
    cb = train_rvq(feats, levels, size, seed, frame_config)
    cb.save(out_path)
    return cb


def codec_roundtrip(w: Waveform, cb: RvqCodebooks) -> tuple[Waveform, list[float]]:
    """Full-depth round-trip and the mel distance for every quantizer prefix."""
    fc = cb.frame_config
    wr = resample(w, fc.sample_rate)
    dists = []
    out = None
    for q in range(1, cb.levels + 1):
        sub = cb.prefix(q)
        rt = decode(encode(wr, sub), sub, len(wr))
        dists.append(multiscale_mel_distance(wr, rt))
        out = rt
    return _fit(resample(out, w.sample_rate), len(w)), dists


def cmd_codec_roundtrip(codebook_path, out_dir, manifest=None, inputs=()) -> dict:
    cb = RvqCodebooks.load(codebook_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"codebook_hash": cb.content_hash, "levels": cb.levels, "utterances": []}
    for utt, w in _load_corpus(manifest, inputs):
        rt, dists = codec_roundtrip(w, cb)
        write_wav(rt, out / f"{utt}_roundtrip.wav", "float32")
        report["utterances"].append({"utt_id": utt, "mel_distance_by_levels": dists})
    (out / "roundtrip_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
