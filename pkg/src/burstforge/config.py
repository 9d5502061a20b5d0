"""Run configuration: JSON with ``model``, ``train``, ``data`` and ``io`` sections."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .train import TrainConfig

DATA_DEFAULTS = {
    "sr_x4": {"crop": 48, "scale": 4, "gain": 1, "max_translation": 8.0, "max_rotation_deg": 1.0},
    "sr_x8": {"crop": 48, "scale": 8, "gain": 1, "max_translation": 8.0, "max_rotation_deg": 1.0},
    "lowlight": {"crop": 64, "gain": 4, "max_translation": 2.0, "exposure": 0.05},
    "denoise_gray": {"crop": 128, "gain": 1, "max_translation": 2.0},
    "denoise_color": {"crop": 128, "gain": 1, "max_translation": 2.0},
}

# burst length when model.burst_size is not given
DEFAULT_BURST = {"sr_x4": 14, "sr_x8": 14, "lowlight": 8, "denoise_gray": 8, "denoise_color": 8}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    seed: int = 0
    crop: Optional[int] = None
    scale: Optional[int] = None
    gain: Optional[int] = None
    max_translation: Optional[float] = None
    max_rotation_deg: Optional[float] = None
    exposure: Optional[float] = None
    fixed_sample: bool = False

    def resolve(self, task: str) -> "DataConfig":
        filled = asdict(self)
        for key, value in DATA_DEFAULTS[task].items():
            if filled.get(key) is None:
                filled[key] = value
        if filled["max_rotation_deg"] is None:
            filled["max_rotation_deg"] = 0.0
        if filled["exposure"] is None:
            filled["exposure"] = 1.0
        if filled["scale"] is None:
            filled["scale"] = 1
        return DataConfig(**filled)


@dataclass
class IOConfig:
    checkpoint: Optional[str] = None
    log_csv: Optional[str] = None
    resolved_config: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": asdict(self.data), "io": asdict(self.io)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section(cls, raw: dict, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    """Build a fully resolved :class:`RunConfig`; unknown keys are rejected."""
    unknown = set(raw) - {"model", "train", "data", "io"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model_raw = raw.get("model", {})
    if isinstance(model_raw, dict) and "burst_size" not in model_raw:
        task = model_raw.get("task", ModelConfig.task)
        model_raw = {**model_raw, "burst_size": DEFAULT_BURST.get(task, ModelConfig.burst_size)}
    model = _section(ModelConfig, model_raw, "model")
    cfg = RunConfig(
        model=model,
        train=_section(TrainConfig, raw.get("train", {}), "train"),
        data=_section(DataConfig, raw.get("data", {}), "data").resolve(model.task),
        io=_section(IOConfig, raw.get("io", {}), "io"),
    )
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def packed_size(task: str, data: DataConfig) -> int:
    """Spatial side of the network input implied by the data settings."""
    if task in ("sr_x4", "sr_x8"):
        return data.crop // 2
    return data.crop


def validate(cfg: RunConfig) -> None:
    """Pre-flight shape checks, naming the offending value."""
    task, d = cfg.model.task, cfg.data
    if task in ("sr_x4", "sr_x8"):
        expected_scale = 4 if task == "sr_x4" else 8
        if d.scale != expected_scale:
            raise ConfigError(f"data.scale={d.scale} conflicts with task {task} (needs {expected_scale})")
        if d.crop % 2:
            raise ConfigError(f"data.crop={d.crop} must be even for Bayer packing")
    side = packed_size(task, d)
    if side % 4 or side < 4:
        raise ConfigError(f"network input side {side} (from data.crop={d.crop}) must be a positive multiple of 4")
    if d.gain not in (1, 2, 4, 8):
        raise ConfigError(f"data.gain={d.gain} is not one of 1, 2, 4, 8")
