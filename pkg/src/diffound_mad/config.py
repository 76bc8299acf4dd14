"""Experiment configuration: pydantic models plus a YAML/JSON loader with overrides."""

import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from diffound_mad.core.lora import LoRAConfig
from diffound_mad.core.model import Mode
from diffound_mad.core.synth import SynthConfig
from diffound_mad.core.trainer import FocalLossConfig, TrainConfig
from diffound_mad.core.vit import ViTConfig
from diffound_mad.errors import ArtifactIOError, ConfigValidationError
from diffound_mad.provenance import config_hash

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DIFFOUND_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = Path("runs")

DEFAULT_RANKS = (2, 4, 8)
DEFAULT_ALPHAS = (4.0, 8.0, 16.0)
DEFAULT_DROPOUTS = (0.2, 0.4)

Protocol = Literal["known_attack_cross", "unknown_attack_loo", "ablation_smad"]
PROTOCOLS = ("known_attack_cross", "unknown_attack_loo", "ablation_smad")


class ModelConfig(BaseModel):
    """Backbone geometry and detector variant."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    preset: Optional[Literal["desk", "small", "large"]] = None
    vit: ViTConfig = ViTConfig()
    mode: Mode = "differential"
    reverse_difference: bool = False
    backbone_path: Optional[str] = Field(None, description="Saved backbone checkpoint to load")

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if isinstance(data, Mapping) and data.get("preset"):
            base = ViTConfig.preset(data["preset"]).model_dump()
            vit = data.get("vit") or {}
            base.update(vit.model_dump() if isinstance(vit, BaseModel) else vit)
            data = {**data, "vit": base}
        return data


class GridConfig(BaseModel):
    """LoRA hyperparameter axes; every combination is one cell."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ranks: List[int] = list(DEFAULT_RANKS)
    alphas: List[float] = list(DEFAULT_ALPHAS)
    dropouts: List[float] = list(DEFAULT_DROPOUTS)
    allow_custom: bool = Field(False, description="Permit values outside the default search domains")

    @model_validator(mode="after")
    def _within_domains(self) -> "GridConfig":
        for name, values, domain in (
            ("ranks", self.ranks, DEFAULT_RANKS),
            ("alphas", self.alphas, DEFAULT_ALPHAS),
            ("dropouts", self.dropouts, DEFAULT_DROPOUTS),
        ):
            if not values:
                raise ValueError(f"grid axis '{name}' is empty")
            if len(set(values)) != len(values):
                raise ValueError(f"grid axis '{name}' repeats a value")
            if not self.allow_custom and not set(values) <= set(domain):
                raise ValueError(
                    f"grid axis '{name}' must be within {list(domain)} (set allow_custom to widen)"
                )
        return self

    def cells(self, base: LoRAConfig) -> List[LoRAConfig]:
        return [
            base.model_copy(update={"rank": r, "alpha": a, "dropout": d})
            for r, a, d in itertools.product(self.ranks, self.alphas, self.dropouts)
        ]


class DataConfig(BaseModel):
    """Either generate synthetic data or read dataset directories from disk."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    source: Literal["synth", "directory"] = "synth"
    synth: SynthConfig = SynthConfig()
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    image_format: Literal["npy", "png"] = "npy"

    @model_validator(mode="after")
    def _paths_given(self) -> "DataConfig":
        if self.source == "directory" and not (self.train_path and self.test_path):
            raise ValueError("directory data needs train_path and test_path")
        return self


class ExperimentConfig(BaseModel):
    """Everything a run needs; ``seed`` drives model initialisation and training order."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "experiment"
    seed: int
    model: ModelConfig = ModelConfig()
    lora: LoRAConfig = LoRAConfig()
    grid: Optional[GridConfig] = None
    train: TrainConfig = TrainConfig()
    focal: FocalLossConfig = FocalLossConfig()
    data: DataConfig = DataConfig()
    protocol: Optional[Protocol] = None
    output_dir: Optional[str] = None

    @field_validator("name")
    @classmethod
    def _safe_name(cls, value: str) -> str:
        if not value or any(c in value for c in "/\\"):
            raise ValueError("name must be non-empty and contain no path separators")
        return value

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data: Any) -> Any:
        if not isinstance(data, Mapping) or "seed" not in data:
            return data
        train = data.get("train") or {}
        if isinstance(train, TrainConfig):
            train = train.model_copy(update={"seed": data["seed"]})
        elif isinstance(train, Mapping):
            train = {**train, "seed": data["seed"]}
        return {**data, "train": train}

    def hash(self) -> str:
        return config_hash(self)


def _field_path(loc: Sequence[Any]) -> str:
    return ".".join(str(part) for part in loc if not isinstance(part, int) or part >= 0)


def validate_config(data: Mapping[str, Any], source: str = "config") -> ExperimentConfig:
    """Validate raw data, turning pydantic errors into :class:`ConfigValidationError`."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        field_name = _field_path(first["loc"]) or "<root>"
        details = "; ".join(f"{_field_path(e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise ConfigValidationError(f"{source}: {details}", field=field_name) from exc


def parse_override(item: str) -> tuple:
    """``a.b=value`` → (["a", "b"], parsed value); values are parsed as YAML scalars."""
    if "=" not in item:
        raise ConfigValidationError(f"override '{item}' is not of the form key=value", field=item)
    key, raw = item.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigValidationError(f"override '{item}' has an empty key", field=item)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return keys, value


@dataclass
class ConfigManager:
    """Loads experiment files and layers overrides, flags and environment on top."""

    env: Mapping[str, str] = field(default_factory=lambda: dict(os.environ))
    _config: Optional[ExperimentConfig] = None
    _config_file: Optional[Path] = None

    def load_config(
        self,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Sequence[str] = (),
        flags: Optional[Mapping[str, Any]] = None,
    ) -> ExperimentConfig:
        """File < ``--set`` overrides < explicit flags (``seed``, ``epochs``, ``output``)."""
        data: Dict[str, Any] = {}
        if config_file is not None:
            self._config_file = Path(config_file)
            data = self._load_from_file(self._config_file)
        for item in overrides:
            keys, value = parse_override(item)
            self._set_nested_value(data, keys, value)
        for name, value in (flags or {}).items():
            if value is None:
                continue
            keys = {"seed": ["seed"], "epochs": ["train", "epochs"], "output": ["output_dir"]}.get(name)
            if keys is None:
                raise ConfigValidationError(f"unknown flag '{name}'", field=name)
            self._set_nested_value(data, keys, value)
        source = str(self._config_file) if self._config_file else "config"
        self._config = validate_config(data, source)
        logger.debug("loaded config %s (hash %s)", source, self._config.hash()[:12])
        return self._config

    def _load_from_file(self, file_path: Path) -> Dict[str, Any]:
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                if file_path.suffix in (".yaml", ".yml"):
                    data = yaml.safe_load(f) or {}
                elif file_path.suffix == ".json":
                    data = json.load(f)
                else:
                    raise ConfigValidationError(
                        f"unsupported config file format '{file_path.suffix}'", field="config"
                    )
        except OSError as exc:
            raise ArtifactIOError(f"cannot read config ({exc.strerror})", file_path) from exc
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ArtifactIOError(f"cannot parse config ({exc})", file_path) from exc
        if not isinstance(data, dict):
            raise ConfigValidationError(f"{file_path}: top level must be a mapping", field="<root>")
        return data

    def _set_nested_value(self, config_dict: Dict[str, Any], keys: List[str], value: Any):
        if len(keys) == 1:
            config_dict[keys[0]] = value
            return
        if not isinstance(config_dict.get(keys[0]), dict):
            config_dict[keys[0]] = {}
        self._set_nested_value(config_dict[keys[0]], keys[1:], value)

    def output_dir(self, config: ExperimentConfig) -> Path:
        """Explicit ``output_dir``, else ``$DIFFOUND_OUTPUT_ROOT/<name>``, else ``runs/<name>``."""
        if config.output_dir:
            return Path(config.output_dir)
        root = self.env.get(OUTPUT_ROOT_ENV)
        return (Path(root) if root else DEFAULT_OUTPUT_ROOT) / config.name

    def save_config(self, config: ExperimentConfig, file_path: Union[str, Path]) -> Path:
        file_path = Path(file_path)
        data = config.model_dump(mode="json", exclude_none=True)
        try:
            file_path.parent.mkdir(parents=True, exist_ok=True)
            with open(file_path, "w", encoding="utf-8") as f:
                if file_path.suffix == ".json":
                    json.dump(data, f, indent=2)
                else:
                    yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False)
        except OSError as exc:
            raise ArtifactIOError(f"cannot write config ({exc.strerror})", file_path) from exc
        self._config_file = file_path
        return file_path

    def create_default_config(self, seed: int = 0, name: str = "experiment") -> ExperimentConfig:
        return ExperimentConfig(name=name, seed=seed)


def load_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    flags: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    return ConfigManager().load_config(config_file, overrides, flags)
