"""Declarative pipeline configuration (YAML) with strict validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .preprocess import PreprocessConfig, text_embed, UnknownInstructionError
from .synth import WeatherParams
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    name: str = "checker-garden"
    views: int = 24
    orbit_radius: float = 3.5
    camera_height: float = 5.0
    look_at: tuple = (0.0, 0.0, 0.3)
    focal: float = 120.0
    width: int = 128
    height: int = 128
    points: int = 3000
    supersample: int = 2
    test_every: int = 8

    def __post_init__(self):
        if self.name != "checker-garden":
            raise ConfigError(f"unknown scene {self.name!r}; the built-in scene is 'checker-garden'")
        if self.views < 3:
            raise ConfigError("scene.views must be >= 3")
        if self.width < 11 or self.height < 11:
            raise ConfigError("scene.width and scene.height must be >= 11 (SSIM window)")
        if self.focal <= 0 or self.orbit_radius <= 0:
            raise ConfigError("scene.focal and scene.orbit_radius must be > 0")
        if self.points < 1 or self.supersample < 1 or self.test_every < 2:
            raise ConfigError("scene.points, scene.supersample must be >= 1 and scene.test_every >= 2")
        if len(self.look_at) != 3:
            raise ConfigError("scene.look_at needs three numbers")


DEFAULT_WEATHER = ({"kind": "snow", "density": 15.0}, {"kind": "lens_droplets", "droplet_count": 6})
DEFAULT_INSTRUCTION = "Remove the snowy effect in the image"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    instruction: str = DEFAULT_INSTRUCTION
    threads: int | None = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    weather: tuple = DEFAULT_WEATHER
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def weather_params(self) -> tuple:
        return tuple(WeatherParams(**w) for w in self.weather)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out": self.out,
            "instruction": self.instruction,
            "threads": self.threads,
            "scene": asdict(self.scene),
            "weather": [dict(w) for w in self.weather],
            "preprocess": asdict(self.preprocess),
            "train": asdict(self.train),
        }
        d["scene"]["look_at"] = list(d["scene"]["look_at"])
        for w in d["weather"]:
            for k, v in w.items():
                if isinstance(v, tuple):
                    w[k] = list(v)
        return d

    def identity(self) -> dict:
        """The settings that can change outputs (everything but ``out`` and thread counts)."""
        d = self.to_dict()
        for k in ("out", "threads"):
            d.pop(k)
        d["preprocess"].pop("workers")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, seed=None, out=None, threads=None, instruction=None) -> "PipelineConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = d["preprocess"]["seed"] = d["train"]["seed"] = seed
        if out is not None:
            d["out"] = str(out)
        if threads is not None:
            d["threads"] = d["preprocess"]["workers"] = threads
        if instruction is not None:
            d["instruction"] = instruction
        return config_from_dict(d)


def _section(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(raw: dict) -> PipelineConfig:
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    threads = raw.get("threads")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        raise ConfigError("threads must be a positive integer or null")
    instruction = raw.get("instruction", DEFAULT_INSTRUCTION)
    try:
        text_embed(instruction)
    except UnknownInstructionError as e:
        raise ConfigError(str(e)) from None
    weather = raw.get("weather", [dict(w) for w in DEFAULT_WEATHER])
    if not isinstance(weather, list):
        raise ConfigError("weather must be a list of layers")
    layers = []
    for i, w in enumerate(weather):
        params = _section(WeatherParams, w, f"weather[{i}]")
        layers.append({k: v for k, v in w.items()} | {"kind": params.kind})
    scene = _section(SceneConfig, raw.get("scene"), "scene")
    pre_raw = dict(raw.get("preprocess") or {})
    pre_raw.setdefault("seed", seed)
    pre = _section(PreprocessConfig, pre_raw, "preprocess")
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("seed", seed)
    train = _section(TrainConfig, train_raw, "train")
    return PipelineConfig(
        seed=seed, out=str(raw.get("out", "runs/default")), instruction=instruction, threads=threads,
        scene=scene, weather=tuple(layers), preprocess=pre, train=train,
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return config_from_dict(raw or {})
