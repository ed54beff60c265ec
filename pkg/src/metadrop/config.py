"""Run configuration: INI sections mapped onto dataclasses, presets and a stable hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .baselines import RegularizerConfig
from .eval import NORMS
from .metalearn import MetaConfig
from .noise import NoiseConfig

OUTPUT_ENV = "METADROP_OUTPUT_DIR"
# Keys that do not change results and are therefore left out of the hash.
UNHASHED = ("seed", "output_dir")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic2d"
    path: str = ""
    split_file: str = ""
    image_size: int = 28
    channels: int = 1
    rotations: bool = True
    ratios: tuple = (0.7, 0.1, 0.2)
    way: int = 5
    shot: int = 1
    m_per_class: int = 15

    def __post_init__(self):
        if self.kind not in ("synthetic2d", "image_dir"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.way < 2:
            raise ValueError("way must be >= 2")
        if self.shot < 1 or self.m_per_class < 1:
            raise ValueError("shot and m_per_class must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "dense"
    hidden: tuple = (64, 64, 64)
    standardize: bool = False
    channels: int = 64
    depth: int = 4

    def __post_init__(self):
        if self.backbone not in ("dense", "conv4"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if any(h < 1 for h in self.hidden) or self.channels < 1 or self.depth < 1:
            raise ValueError("layer sizes must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    checkpoint_every: int = 500
    val_every: int = 100
    val_episodes: int = 100

    def __post_init__(self):
        if self.checkpoint_every < 1 or self.val_every < 1 or self.val_episodes < 2:
            raise ValueError("checkpoint_every, val_every must be >= 1 and val_episodes >= 2")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 1000
    chunk_size: int = 50

    def __post_init__(self):
        if self.episodes < 2 or self.chunk_size < 1:
            raise ValueError("episodes must be >= 2 and chunk_size >= 1")


@dataclass(frozen=True)
class AttackSection:
    norm: str = "linf"
    eps_grid: tuple = (0.0, 0.05, 0.1, 0.2, 0.4)
    steps: int = 200
    step_size: float = 0.0  # 0 selects 2.5 * eps / steps
    random_start: bool = True
    clip: tuple = ()  # empty: unbounded inputs
    episodes: int = 100

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if any(e < 0 for e in self.eps_grid):
            raise ValueError("eps_grid entries must be >= 0")
        if self.steps < 1 or self.episodes < 1:
            raise ValueError("steps and episodes must be >= 1")
        if self.clip and len(self.clip) != 2:
            raise ValueError("clip must be empty or two numbers")


SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "meta": MetaConfig,
    "noise": NoiseConfig,
    "regularizer": RegularizerConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "attack": AttackSection,
}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    seed: int = 0
    output_dir: str = "runs/default"
    preset: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self)

    def with_updates(self, section: str | None = None, **values) -> "RunConfig":
        if section is None:
            return dataclasses.replace(self, **values)
        try:
            return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})
        except (TypeError, ValueError) as exc:
            key = next(iter(values), "?")
            raise ConfigError(f"{section}.{key}", str(exc)) from exc


def _canonical(obj: Any):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float):
        return repr(obj)  # exact, locale-free
    return obj


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON of every result-affecting setting."""
    d = cfg.to_dict()
    for k in UNHASHED:
        d.pop(k, None)
    d["meta"].pop("seed", None)
    blob = json.dumps(_canonical(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------------ presets

PRESETS = {
    "synthetic": {
        "dataset": {"kind": "synthetic2d", "way": 5, "shot": 1, "m_per_class": 15},
        "model": {"backbone": "dense", "hidden": (64, 64, 64)},
        "meta": {"inner_steps": 5, "inner_lr": 0.1, "outer_lr": 1e-3, "meta_batch": 4, "iterations": 2000},
    },
    "omniglot-1shot": {
        "dataset": {"kind": "image_dir", "image_size": 28, "channels": 1, "rotations": True,
                    "way": 20, "shot": 1, "m_per_class": 15},
        "model": {"backbone": "conv4", "channels": 64, "depth": 4},
        "meta": {"inner_steps": 5, "inner_lr": 0.1, "outer_lr": 1e-3, "meta_batch": 8, "iterations": 40000},
    },
    "omniglot-5shot": {
        "dataset": {"kind": "image_dir", "image_size": 28, "channels": 1, "rotations": True,
                    "way": 20, "shot": 5, "m_per_class": 15},
        "model": {"backbone": "conv4", "channels": 64, "depth": 4},
        "meta": {"inner_steps": 5, "inner_lr": 0.4, "outer_lr": 1e-3, "meta_batch": 6, "iterations": 40000},
    },
    "miniimagenet-1shot": {
        "dataset": {"kind": "image_dir", "image_size": 84, "channels": 3, "rotations": False,
                    "way": 5, "shot": 1, "m_per_class": 15},
        "model": {"backbone": "conv4", "channels": 32, "depth": 4},
        "meta": {"inner_steps": 5, "inner_lr": 0.01, "outer_lr": 1e-4, "meta_batch": 4, "iterations": 60000},
    },
    "miniimagenet-5shot": {
        "dataset": {"kind": "image_dir", "image_size": 84, "channels": 3, "rotations": False,
                    "way": 5, "shot": 5, "m_per_class": 15},
        "model": {"backbone": "conv4", "channels": 32, "depth": 4},
        "meta": {"inner_steps": 5, "inner_lr": 0.01, "outer_lr": 1e-4, "meta_batch": 4, "iterations": 60000},
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError("run.preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig(preset=name)
    for section, values in PRESETS[name].items():
        cfg = cfg.with_updates(section, **values)
    return cfg


# ------------------------------------------------------------------ parsing


def _coerce(raw: str, default: Any, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or default is None:
            if not raw or raw.lower() == "none":
                return () if isinstance(default, tuple) else None
            items = [p.strip() for p in raw.split(",") if p.strip()]
            sample = default[0] if default else 0.0
            conv = int if isinstance(sample, int) and not isinstance(sample, bool) else float
            if isinstance(sample, str):
                conv = str
            return tuple(conv(p) for p in items)
        return raw
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from exc


def parse_config(text: str, source: str = "<string>", check_paths: bool = True, base_dir=None) -> RunConfig:
    """Parse INI text.  ``[run]`` holds ``seed``, ``output_dir`` and an optional ``preset``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from exc
    for section in cp.sections():
        if section != "run" and section not in SECTIONS:
            raise ConfigError(section, "unknown section")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    unknown = set(run) - {"seed", "output_dir", "preset"}
    if unknown:
        raise ConfigError(f"run.{sorted(unknown)[0]}", "unknown key")
    cfg = preset(run["preset"].strip()) if run.get("preset", "").strip() else RunConfig()
    if "seed" in run:
        cfg = cfg.with_updates(seed=_coerce(run["seed"], 0, "run.seed"))
    if "output_dir" in run:
        cfg = cfg.with_updates(output_dir=run["output_dir"].strip())

    for section, cls in SECTIONS.items():
        if not cp.has_section(section):
            continue
        current = getattr(cfg, section)
        names = {f.name: getattr(current, f.name) for f in fields(cls)}
        values = {}
        for key, raw in cp[section].items():
            where = f"{section}.{key}"
            if key not in names:
                raise ConfigError(where, "unknown key")
            values[key] = _coerce(raw, names[key], where)
        if section == "regularizer" and values.get("clip") == ():
            values["clip"] = None
        cfg = cfg.with_updates(section, **values)
    cfg = cfg.with_updates("meta", seed=cfg.seed)
    if check_paths:
        validate_paths(cfg, base_dir)
    return cfg


def _resolve(path: str, base_dir) -> str:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return str(p)


def validate_paths(cfg: RunConfig, base_dir=None) -> RunConfig:
    d = cfg.dataset
    if d.kind == "image_dir":
        if not d.path:
            raise ConfigError("dataset.path", "required for image_dir datasets")
        if not Path(_resolve(d.path, base_dir)).is_dir():
            raise ConfigError("dataset.path", f"directory {d.path!r} does not exist")
        if d.split_file and not Path(_resolve(d.split_file, base_dir)).is_file():
            raise ConfigError("dataset.split_file", f"file {d.split_file!r} does not exist")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file {str(path)!r} not found")
    cfg = parse_config(path.read_text(), str(path), check_paths=check_paths, base_dir=path.parent)
    d = cfg.dataset
    if d.kind == "image_dir":
        # Store paths relative to the config's directory as resolved paths.
        updates = {"path": _resolve(d.path, path.parent)}
        if d.split_file:
            updates["split_file"] = _resolve(d.split_file, path.parent)
        cfg = cfg.with_updates("dataset", **updates)
    return cfg


def output_dir(cfg: RunConfig, flag: str | None = None) -> Path:
    """``--out`` beats the environment variable, which beats the config file."""
    return Path(flag or os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def render_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = ["[run]", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}", ""]

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v)
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    for section in SECTIONS:
        out.append(f"[{section}]")
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            if section == "meta" and k == "seed":
                continue
            out.append(f"{k} = {fmt(v)}")
        out.append("")
    return "\n".join(out)
