"""Manifest (JSON lines) and pipeline-config (JSON) documents."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distortions import DistortionRecipe
from .errors import ConfigError
from .pipeline import BlendSet, ShiftConfig, SlidingWindowConfig, default_shifts

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def utterance_seed(run_seed: int, utt_id: str) -> int:
    """FNV-1a 64 over the run seed (8 bytes, little endian) followed by the UTF-8 utt_id."""
    return fnv1a64((int(run_seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little") + utt_id.encode("utf-8"))


@dataclass
class ManifestEntry:
    utt_id: str
    clean_path: str | None = None
    noise_path: str | None = None
    rir_path: str | None = None
    recipe: DistortionRecipe = field(default_factory=DistortionRecipe)
    sample_rate: int | None = None
    extra: dict = field(default_factory=dict)
    seed_resolved: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        if "utt_id" not in d:
            raise ConfigError("manifest entry without utt_id")
        known = {"utt_id", "clean_path", "noise_path", "rir_path", "recipe", "sample_rate",
                 "seed_resolved"}
        try:
            recipe = DistortionRecipe.from_dict(d.get("recipe"))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"utt {d['utt_id']!r}: bad recipe ({exc})") from exc
        return cls(
            utt_id=str(d["utt_id"]),
            clean_path=d.get("clean_path"),
            noise_path=d.get("noise_path"),
            rir_path=d.get("rir_path"),
            recipe=recipe,
            sample_rate=d.get("sample_rate"),
            extra={k: v for k, v in d.items() if k not in known},
            seed_resolved=bool(d.get("seed_resolved", False)),
        )

    def to_dict(self) -> dict:
        d = {"utt_id": self.utt_id, "clean_path": self.clean_path, "noise_path": self.noise_path,
             "rir_path": self.rir_path, "recipe": self.recipe.to_dict(),
             "sample_rate": self.sample_rate}
        if self.seed_resolved:
            d["seed_resolved"] = True
        d.update(self.extra)
        return d


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            entry = ManifestEntry.from_dict(d)
            if entry.utt_id in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate utt_id {entry.utt_id!r}")
            seen.add(entry.utt_id)
            entries.append(entry)
    return entries


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            d = e.to_dict() if isinstance(e, ManifestEntry) else e
            f.write(json.dumps(d, sort_keys=True) + "\n")


def resolve_path(p: str | None, base: Path) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else base / q


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


STAGE_TYPES = {
    "identity": {},
    "gain": {"gain": 1.0},
    "wiener": {"noise_ms": 100.0, "min_gain": 0.1, "smoothing": 0.98},
    "spectral_subtraction": {"noise_ms": 100.0, "oversubtraction": 1.0, "floor": 0.05},
    "token": {"codebook": None, "predictor": "copy"},
    "fusion": {"weights": [0.0, 0.5, 0.5], "inner": {"type": "identity"}},
}
STAGE_KEYS = ("s1", "s2", "s3")
PIPELINE_RATE = 48000


def _normalize_stage(spec, where: str, base: Path | None) -> dict:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"{where}: stage needs a 'type' key")
    kind = spec["type"]
    if kind not in STAGE_TYPES:
        raise ConfigError(f"{where}: unknown stage type {kind!r}; valid: {sorted(STAGE_TYPES)}")
    out = {"type": kind}
    defaults = STAGE_TYPES[kind]
    unknown = set(spec) - set(defaults) - {"type"}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} for stage type {kind!r}")
    for key, default in defaults.items():
        out[key] = spec.get(key, default)
    if kind == "fusion":
        out["inner"] = _normalize_stage(out["inner"], f"{where}.inner", base)
        if len(out["weights"]) != 3:
            raise ConfigError(f"{where}.weights: need three weights")
        out["weights"] = [float(v) for v in out["weights"]]
    if kind == "token":
        if not out["codebook"]:
            raise ConfigError(f"{where}.codebook: token stage needs a codebook path")
        p = Path(out["codebook"])
        if base is not None and not p.is_absolute():
            p = base / p
        out["codebook"] = str(p.resolve())
        if out["predictor"] not in ("copy", "uniform"):
            raise ConfigError(f"{where}.predictor: expected 'copy' or 'uniform'")
    return out


def _normalize_shift(spec, where: str, rate: int) -> dict | None:
    if spec is None:
        return None
    if "offsets" in spec:
        cfg = ShiftConfig(tuple(spec["offsets"]))
    else:
        cfg = default_shifts(rate, int(spec.get("count", 10)), float(spec.get("max_s", 0.25)),
                             int(spec.get("seed", 0)))
    try:
        cfg.validate_for(rate)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return {"offsets": list(cfg.offsets)}


def normalize_config(cfg: dict, base: Path | None = None) -> dict:
    """Validate a pipeline config and return its effective form.

    The effective form has every default filled in and shift offsets resolved to
    explicit lists; normalizing it again returns an identical document.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "stages" not in cfg:
        raise ConfigError("config: missing key 'stages'")
    stages = cfg["stages"]
    for key in STAGE_KEYS:
        if key not in stages:
            raise ConfigError(f"config: missing key 'stages.{key}'")
    rate = int(cfg.get("sample_rate", PIPELINE_RATE))
    shifts = cfg.get("shifts") or {}
    blend_members = cfg.get("blend", [2, 3])
    try:
        BlendSet(tuple(blend_members))
    except ValueError as exc:
        raise ConfigError(f"config.blend: {exc}") from exc
    if not set(blend_members) <= {1, 2, 3}:
        raise ConfigError("config.blend: members must be stage ids 1, 2 or 3")
    window = cfg.get("window", {"window_s": 2.0, "overlap_fraction": 0.5})
    if window is not None:
        try:
            w = SlidingWindowConfig(float(window.get("window_s", 2.0)),
                                    float(window.get("overlap_fraction", 0.5)))
        except ValueError as exc:
            raise ConfigError(f"config.window: {exc}") from exc
        window = {"window_s": w.window_s, "overlap_fraction": w.overlap_fraction}
    source = cfg.get("blend_source", "aggregated")
    if source not in ("aggregated", "raw"):
        raise ConfigError("config.blend_source: expected 'aggregated' or 'raw'")
    return {
        "sample_rate": rate,
        "stages": {k: _normalize_stage(stages[k], f"stages.{k}", base) for k in STAGE_KEYS},
        "shifts": {k: _normalize_shift(shifts.get(k), f"shifts.{k}", rate) for k in STAGE_KEYS},
        "blend": sorted(int(m) for m in blend_members),
        "blend_source": source,
        "window": window,
    }


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return normalize_config(raw, path.parent)
