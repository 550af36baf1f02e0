"""Run configuration: one JSON document covering model, training,
preprocessing, phantom template and paths, with ``section.key=value``
overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .phantom import PhantomSpec, SpecError
from .preprocess import PreprocessConfig
from .trainer import AugmentConfig, TrainConfig
from .vnet import ConfigError, ModelConfig


@dataclass
class PathsConfig:
    train_data: str | None = None
    val_data: str | None = None
    out_dir: str = "run"


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "preprocess": PreprocessConfig,
    "phantom": PhantomSpec,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            kwargs[name] = _build_section(name, typ, sec)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.model.input_size != self.preprocess.target_size:
            raise ConfigError(
                f"model.input_size ({self.model.input_size}) must equal preprocess.target_size "
                f"({self.preprocess.target_size})"
            )


def _section_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return dataclasses.asdict(obj)


def _build_section(name: str, typ, values: dict):
    allowed = {f.name for f in dataclasses.fields(typ)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    try:
        if hasattr(typ, "from_dict"):
            return typ.from_dict(values)
        if typ is TrainConfig and isinstance(values.get("augment"), dict):
            extra = set(values["augment"]) - {f.name for f in dataclasses.fields(AugmentConfig)}
            if extra:
                raise ConfigError(f"unknown keys in section 'train.augment': {sorted(extra)}")
        return typ(**values)
    except (TypeError, ValueError, SpecError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid section {name!r}: {err}") from err


def parse_override(item: str) -> tuple[list[str], object]:
    """``'train.epochs=5'`` -> (['train', 'epochs'], 5). Values are JSON when
    they parse as JSON, otherwise plain strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        parts, value = parse_override(item)
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
        node[parts[-1]] = value
    return d


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Read a JSON config (or start from defaults), apply overrides, validate.

    Relative data paths are resolved against the config file's directory.
    """
    d: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {p}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {p} is not valid JSON: {err}") from err
        base = p.resolve().parent
    cfg = RunConfig.from_dict(apply_overrides(d, overrides))
    for key in ("train_data", "val_data", "out_dir"):
        v = getattr(cfg.paths, key)
        if v is not None and not Path(v).is_absolute():
            setattr(cfg.paths, key, str((base / v).resolve()))
    return cfg


def config_schema() -> dict:
    """JSON schema listing every accepted key with its default."""
    defaults = RunConfig().to_dict()
    props = {}
    for name, sec in defaults.items():
        props[name] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"default": v} for k, v in sec.items()},
        }
    return {"type": "object", "additionalProperties": False, "properties": props}
