"""
Run configuration: dataclass sections, strict INI loading and override
precedence (defaults < file < PFGAN_* environment < command-line flags).
"""

import configparser
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .datamodel import SyntheticSpec
from .errors import ConfigError
from .losses import ABLATION_VARIANTS, LossWeights, ablation_weights

ENV_PREFIX = "PFGAN_"
MODEL_KINDS = ("cpgan", "cpcnn", "adda")
ADDA_STAGES = ("1", "2", "both")


@dataclass
class ModelConfig:
    """Architecture shared by every learner"""
    image_size: int = 64
    channels: int = 3
    embedding_dim: int = 256
    encoder_variant: str = "compact"  # compact | resnet18
    perceptual_seed: int = 0
    perceptual_weights: Optional[str] = None
    zero_skips: bool = False

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 8:
            raise ConfigError("must be a positive multiple of 8", field="image_size")
        if self.channels not in (1, 3):
            raise ConfigError("must be 1 or 3", field="channels")
        if self.embedding_dim < 1:
            raise ConfigError("must be >= 1", field="embedding_dim")
        if self.encoder_variant not in ("compact", "resnet18"):
            raise ConfigError("must be 'compact' or 'resnet18'", field="encoder_variant")

    def architecture(self) -> Dict[str, Any]:
        """Fields that must agree between a checkpoint and its consumer"""
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "embedding_dim": self.embedding_dim,
            "encoder_variant": self.encoder_variant,
        }


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.0004
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 30
    seed: int = 1
    d_steps_per_g_step: int = 1
    steps_per_epoch: int = 0  # 0: one pass over the training profiles
    test_folds: Tuple[int, ...] = ()
    lr_decay_gamma: float = 1.0
    lr_decay_every: int = 0
    adda_stage1_epochs: int = 0  # 0: same as epochs
    verify_phases: bool = False
    progress: bool = True
    device: str = "cpu"
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("must be even and >= 2", field="batch_size")
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", field="learning_rate")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must lie in [0, 1)", field=name)
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field="epochs")
        if not 0 <= self.seed < 2 ** 63:
            raise ConfigError("must be a non-negative 64-bit integer", field="seed")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("must be >= 1", field="d_steps_per_g_step")
        if self.steps_per_epoch < 0:
            raise ConfigError("must be >= 0", field="steps_per_epoch")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError("must lie in (0, 1]", field="lr_decay_gamma")
        if self.lr_decay_every < 0 or self.adda_stage1_epochs < 0:
            raise ConfigError("must be >= 0", field="lr_decay_every")
        self.weights.validate()


@dataclass
class RunOptions:
    model: str = "cpgan"
    stage: Optional[str] = None  # adda only: 1 | 2 | both
    ablation: Optional[str] = None

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"must be one of {MODEL_KINDS}", field="model")
        if self.stage is not None:
            if self.model != "adda":
                raise ConfigError("--stage requires --model adda", field="stage")
            if self.stage not in ADDA_STAGES:
                raise ConfigError(f"must be one of {ADDA_STAGES}", field="stage")
        if self.ablation is not None:
            if self.model != "cpgan":
                raise ConfigError("--ablation applies to --model cpgan", field="ablation")
            if self.ablation not in ABLATION_VARIANTS:
                raise ConfigError(f"must be one of {ABLATION_VARIANTS}", field="ablation")


@dataclass
class PathsConfig:
    manifest: Optional[str] = None
    out: str = "runs"
    checkpoint: Optional[str] = None
    stage1_checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    """Merged view of every section; validated before any compute"""
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.synthetic.validate()
        self.model.validate()
        self.train.validate()
        self.run.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def weights(self) -> LossWeights:
        """Loss weights with the selected ablation variant applied"""
        if self.run.ablation:
            return ablation_weights(self.train.weights, self.run.ablation)
        return self.train.weights


# INI section -> attribute path on RunConfig
SECTIONS = {
    "synthetic": ("synthetic",),
    "model": ("model",),
    "train": ("train",),
    "losses": ("train", "weights"),
    "run": ("run",),
    "paths": ("paths",),
}


def _section_target(config: RunConfig, section: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]", field=section)
    target = config
    for attr in SECTIONS[section]:
        target = getattr(target, attr)
    return target


def _coerce(raw: Any, annotation, name: str) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union and type(None) in args:
        if raw.strip().lower() in ("", "none", "null"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(raw, inner, name)
    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw.strip(), 0)
        if annotation is float:
            return float(raw)
        if origin in (tuple, Tuple):
            item = args[0] if args else str
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            return tuple(_coerce(p, item, name) for p in parts)
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}",
                          field=name) from e
    return raw


def set_value(config: RunConfig, dotted: str, value: Any) -> None:
    """Set 'section.key' on the config, rejecting unknown keys"""
    if "." not in dotted:
        raise ConfigError("expected section.key", field=dotted)
    section, key = dotted.split(".", 1)
    target = _section_target(config, section)
    hints = typing.get_type_hints(type(target))
    known = {f.name for f in fields(target) if not is_dataclass(getattr(target, f.name))}
    if key not in known:
        raise ConfigError(f"unknown key '{key}' in section [{section}]", field=f"{section}.{key}")
    setattr(target, key, _coerce(value, hints[key], f"{section}.{key}"))


def _env_overrides(environ: Mapping[str, str]) -> Dict[str, str]:
    found = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in SECTIONS and key:
            found[f"{section}.{key}"] = value
    return found


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Build and validate a RunConfig from an optional INI file plus overrides"""
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as handle:
                parser.read_file(handle)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot parse config file: {e}", field=str(path)) from e
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(config, f"{section}.{key}", value)

    env = _env_overrides(os.environ if environ is None else environ)
    for dotted, value in env.items():
        set_value(config, dotted, value)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_value(config, dotted, value)
    return config.validate()


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Rebuild a RunConfig from its to_dict() echo (checkpoint/report provenance)"""
    config = RunConfig()
    for section, attrs in SECTIONS.items():
        source: Any = data
        for attr in attrs:
            source = source.get(attr, {}) if isinstance(source, Mapping) else {}
        target = _section_target(config, section)
        for f in fields(target):
            if is_dataclass(getattr(target, f.name)) or f.name not in source:
                continue
            value = source[f.name]
            if isinstance(value, list):
                value = tuple(value)
            setattr(target, f.name, value)
    return config
