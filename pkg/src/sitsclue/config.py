"""Experiment configuration: dataclass sections, presets and the key-value file format.

Config files hold one ``section.key = value`` per line; values are JSON
literals (numbers, true/false, lists, quoted strings) or bare strings.
``#`` starts a comment.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .encoder import ModelConfig
from .errors import ConfigError


@dataclass
class DataConfig:
    n_train: int = 64
    n_test: int = 32


@dataclass
class TrainConfig:
    total_iters: int = 300
    warmup_iters: int = 81
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    lambda1: float = 0.01
    lambda2: float = 0.015
    eta: float = 0.05
    tau: float = 0.1
    alpha: float = 0.999
    Np: int = 2
    mu_low: float = 0.2
    mu_high: float = 0.4
    theta_bg: float = 0.3
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-4
    prop_iters: int = 3
    seed: int = 0
    disable_cbl: bool = False
    disable_tap: bool = False
    disable_cbcam: bool = False
    cam_source: str = "fused"
    affinity_source: str = "temporal_aware"
    renormalize_fused: bool = True
    attention_layer: str = "last"
    sigma_mode: str = "entry_std"
    include_positive_in_denominator: bool = False
    class_agnostic_cbcam: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError("need 0 <= warmup_iters < total_iters")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.mu_low < self.mu_high <= 1.0:
            raise ConfigError("need 0 <= mu_low < mu_high <= 1")
        if self.cam_source not in ("temporal", "spatial", "fused"):
            raise ConfigError(f"bad cam_source {self.cam_source!r}")
        if self.affinity_source not in ("temporal_aware", "low_level"):
            raise ConfigError(f"bad affinity_source {self.affinity_source!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"bad dtype {self.dtype!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class SegConfig:
    iters: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seg: SegConfig = field(default_factory=SegConfig)

    SECTIONS = ("synth", "data", "model", "train", "seg")

    def model_for_data(self):
        s = self.synth
        return dataclasses.replace(self.model, K=s.K, T=s.T, C=s.C, H=s.H, W=s.W)


_SECTION_TYPES = {
    "synth": SynthConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "seg": SegConfig,
}

PRESETS = {
    # desk scale: small model, short schedule, warm-up at 27% of the run
    "desk": {
        "model.d": 32,
        "model.temporal_layers": 2,
        "model.spatial_layers": 1,
        "model.heads": 4,
        "train.total_iters": 300,
        "train.warmup_iters": 81,
        "train.alpha": 0.99,
        "train.lr": 3e-3,
        "synth.parcels_per_image": 2,
        "seg.iters": 300,
        "seg.lr": 3e-3,
    },
    "paper": {
        "model.d": 128,
        "model.temporal_layers": 8,
        "model.spatial_layers": 4,
        "model.heads": 4,
        "train.total_iters": 15000,
        "train.warmup_iters": 4000,
        "train.alpha": 0.999,
        "train.batch_size": 8,
        "seg.batch_size": 8,
        "seg.iters": 15000,
    },
}


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text):
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {ln}: key {key!r} lacks a section")
        values[key] = _parse_value(value)
    return values


def apply_overrides(cfg, values):
    """Return a copy of ``cfg`` with dotted-key ``values`` applied (and re-validated)."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in ExperimentConfig.SECTIONS}
    for key, value in values.items():
        sec, _, name = key.partition(".")
        if sec not in sections:
            raise ConfigError(f"unknown config section {sec!r}")
        if name not in sections[sec]:
            raise ConfigError(f"unknown key {key!r}")
        sections[sec][name] = value
    built = {}
    for sec, kv in sections.items():
        cls = _SECTION_TYPES[sec]
        if sec == "synth":
            if kv.get("phenology_profiles") is not None:
                prof = np.asarray(kv["phenology_profiles"], dtype=np.float64)
                # K or T changed without new profiles: fall back to the default bumps
                stale = prof.shape != (kv["K"], kv["T"]) and "synth.phenology_profiles" not in values
                kv["phenology_profiles"] = None if stale else prof
            kv["parcel_size"] = tuple(kv["parcel_size"])
        try:
            built[sec] = cls(**kv)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**built)


def load_config(path=None, preset="desk", overrides=None, seed=None):
    cfg = ExperimentConfig()
    values = dict(PRESETS[preset]) if preset else {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        values.update(overrides)
    if seed is not None:
        values.update({"synth.seed": seed, "train.seed": seed, "seg.seed": seed})
    return apply_overrides(cfg, values)


def _fmt(value):
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def dump_config(cfg):
    lines = []
    for sec in ExperimentConfig.SECTIONS:
        for key, value in dataclasses.asdict(getattr(cfg, sec)).items():
            lines.append(f"{sec}.{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "effective_config.txt").write_text(dump_config(cfg), encoding="utf-8")


def parse_ablation_flags(text):
    """'disable_cbl,cam_source=temporal' -> {'train.disable_cbl': True, 'train.cam_source': 'temporal'}."""
    out = {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        if "=" in part:
            k, v = part.split("=", 1)
            out[f"train.{k.strip()}"] = _parse_value(v)
        else:
            out[f"train.{part}"] = True
    return out


def substream_seed(seed, name):
    """Independent 32-bit seed for a named random stream (data, init, batches, ...)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])
