"""Experiment configuration: one JSON file drives a run, with flat dotted
overrides from the command line. Every run directory receives the fully
resolved config, so a run is reproducible from its snapshot plus seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .losses import LossConfig
from .networks import DecoderConfig, EncoderConfig, PoseNetConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration or override; maps to exit code 2."""


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # synthetic | kitti
    path: str = ""
    split: str = ""  # kitti: split file or directory
    width: int = 64
    height: int = 64
    augment: bool = True  # kitti only; synthetic data is never augmented
    gt_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "kitti"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'kitti', got {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig | None = None
    pose: PoseNetConfig = field(default_factory=PoseNetConfig)


_SECTIONS = {
    "data": DataConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "pose": PoseNetConfig,
}


def _build_section(cls, values: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    # a short run should not fail the lr_drop_epoch <= epochs invariant just
    # because the default drop epoch exceeds the override
    train_raw = raw.get("train")
    if isinstance(train_raw, dict) and "epochs" in train_raw:
        epochs = train_raw["epochs"]
        drop = train_raw.get("lr_drop_epoch", TrainConfig.__dataclass_fields__["lr_drop_epoch"].default)
        if isinstance(epochs, int) and isinstance(drop, int) and drop > epochs:
            train_raw = dict(train_raw)
            train_raw["lr_drop_epoch"] = epochs
            raw["train"] = train_raw

    kwargs = {}
    if "output_dir" in raw:
        kwargs["output_dir"] = raw.pop("output_dir")
    for name, cls in _SECTIONS.items():
        if name in raw:
            section = raw.pop(name)
            if section is None:
                kwargs[name] = None
            else:
                kwargs[name] = _build_section(cls, section, name)
    if raw:
        raise ConfigError(f"unknown config sections: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` (or `output_dir=value`) assignments onto
    the raw config dict; values parse as JSON with a string fallback."""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override {override!r} is not key=value")
        key, text = override.split("=", 1)
        value = _parse_value(text)
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if overrides:
        raw = apply_overrides(raw, list(overrides))
    return config_from_dict(raw)


def config_to_json(cfg: ExperimentConfig) -> str:
    data = {
        "output_dir": cfg.output_dir,
        "data": asdict(cfg.data),
        "train": asdict(cfg.train),
        "loss": asdict(cfg.loss),
        "encoder": asdict(cfg.encoder),
        "decoder": asdict(cfg.decoder) if cfg.decoder is not None else None,
        "pose": asdict(cfg.pose),
    }
    return json.dumps(data, indent=2, sort_keys=True)


def snapshot_config(cfg: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(config_to_json(cfg))
    return path
