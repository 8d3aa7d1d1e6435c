"""Experiment configuration: one YAML tree covering every phase.

Defaults reproduce the reference experiment (seed 0, 28 procedural views at
64x64, 48-bit message, 5000 stage-2 steps, both backends). Unknown keys are
rejected so config typos fail loudly instead of silently using defaults.
"""

import math
from dataclasses import dataclass, field, asdict, fields as dc_fields
from pathlib import Path

import yaml

from .field import FieldConfig, RenderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_views: int = 28
    resolution: int = 64
    n_objects: int | None = None
    camera_angle_x: float = 0.8
    radius: float = 4.0
    ssaa: int = 4
    data_dir: str | None = None  # load instead of generate when set


@dataclass
class MessageConfig:
    n_bits: int = 48
    hex: str | None = None  # generated from the seed when unset


@dataclass
class StickerConfig:
    eps: float = 1e-4
    amplitude_ratio: float = 0.5  # m_max = ratio * initial beta
    enc_freqs: int = 5
    enc_dim: int = 32
    hidden: int = 64
    gate_samples: int = 65536


@dataclass
class ExtractorSection:
    channels: tuple = (32, 64, 128, 128, 128)


@dataclass
class BatteryConfig:
    noise: float = 0.1
    rotation: float = math.pi / 6
    cropout: float = 0.25
    blur: float = 1.0
    draws: int = 3  # random draws per distortion per view
    hue_draws: int = 5
    palette_k: int = 5
    palette_temperature: float = 0.05


@dataclass
class AblationConfig:
    steps: int = 5000


@dataclass
class ThreatConfig:
    pgd_steps: int = 50
    pgd_psnr_budget: float = 35.0
    purify_steps: int = 400
    purify_lr: float = 5e-4
    purify_eval_interval: int = 25


DEFAULT_PHASES = ("data", "backends", "ablation", "threats")


@dataclass
class ExperimentConfig:
    seed: int = 0
    phases: tuple = DEFAULT_PHASES
    backends: tuple = ("mlp", "voxel")
    scene: SceneConfig = field(default_factory=SceneConfig)
    message: MessageConfig = field(default_factory=MessageConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    field_mlp: FieldConfig = field(default_factory=FieldConfig)
    field_voxel: FieldConfig = field(default_factory=lambda: FieldConfig(kind="voxel"))
    sticker: StickerConfig = field(default_factory=StickerConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(patch_size=32))
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    threats: ThreatConfig = field(default_factory=ThreatConfig)

    def field_config(self, kind: str) -> FieldConfig:
        if kind == "mlp":
            return self.field_mlp
        if kind == "voxel":
            return self.field_voxel
        raise ConfigError(f"unknown backend {kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = list(self.phases)
        d["backends"] = list(self.backends)
        d["extractor"]["channels"] = list(self.extractor.channels)
        d["render"]["background"] = list(self.render.background)
        return d


_SECTIONS = {
    "scene": SceneConfig,
    "message": MessageConfig,
    "render": RenderConfig,
    "field_mlp": FieldConfig,
    "field_voxel": FieldConfig,
    "sticker": StickerConfig,
    "extractor": ExtractorSection,
    "train": TrainConfig,
    "battery": BatteryConfig,
    "ablation": AblationConfig,
    "threats": ThreatConfig,
}


def _build_section(cls, data: dict, path: str):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {path!r}")
    if cls is RenderConfig and "background" in data:
        data = dict(data, background=tuple(data["background"]))
    if cls is ExtractorSection and "channels" in data:
        data = dict(data, channels=tuple(data["channels"]))
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad section {path!r}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            section = data.pop(key)
            if not isinstance(section, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build_section(cls, section, key)
    for scalar in ("seed", "phases", "backends"):
        if scalar in data:
            kwargs[scalar] = data.pop(scalar)
    if data:
        raise ConfigError(f"unknown top-level key(s): {sorted(data)}")
    if "phases" in kwargs:
        kwargs["phases"] = tuple(kwargs["phases"])
        bad = set(kwargs["phases"]) - set(DEFAULT_PHASES)
        if bad:
            raise ConfigError(f"unknown phase(s): {sorted(bad)}")
    if "backends" in kwargs:
        kwargs["backends"] = tuple(kwargs["backends"])
        bad = set(kwargs["backends"]) - {"mlp", "voxel"}
        if bad:
            raise ConfigError(f"unknown backend(s): {sorted(bad)}")
    cfg = ExperimentConfig(**kwargs)
    cfg.field_mlp.kind = "mlp"
    cfg.field_voxel.kind = "voxel"
    if cfg.message.n_bits <= 0 or cfg.message.n_bits % 4 != 0:
        raise ConfigError("message.n_bits must be a positive multiple of 4")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return config_from_dict(data or {})
