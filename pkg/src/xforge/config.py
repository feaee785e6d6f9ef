"""Run configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` are comments. Values are Python literals
(numbers, strings, booleans, tuples); bare words are read as strings.
Every key has a default and unknown keys are errors.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attributions import METHOD_NAMES
from .data.augment import AugmentConfig
from .optimizer import LossWeights
from .training import TrainSchedule


class ConfigError(ValueError):
    """Raised for unreadable config files, unknown keys and bad values."""


@dataclass
class DataSection:
    source: str = "shapes"  # shapes | cifar10
    cifar_dir: str = ""
    image_size: int = 32
    num_classes: int = 3
    per_class: int = 300
    noise: float = 0.05


@dataclass
class ModelSection:
    blocks: int = 3
    width: int = 12


@dataclass
class AttributionSection:
    methods: tuple = tuple(METHOD_NAMES)
    ig_steps: int = 64
    ig_rule: str = "left"
    kernel_shap_coalitions: int = 256
    kernel_shap_ridge: float = 1e-6
    deeplift_shap_samples: int = 8
    deeplift_shap_references: int = 100
    gradient_shap_samples: int = 16
    gradient_shap_sigma: float = 0.1
    gradcam_layer: int = -1


@dataclass
class MetricSection:
    perturbations: int = 70
    subset_size: int = 0  # 0 selects round(d / 4)
    patch: int = 4


@dataclass
class FusionSection:
    l1: float = 0.6
    l2: float = 0.4


@dataclass
class OptimizerSection:
    width: int = 16
    lr_grid: tuple = (5e-2, 5e-3, 5e-4, 5e-5)
    max_epochs: int = 30
    patience: int = 5
    stop_after: int = 15
    batch_size: int = 16
    draws_per_step: int = 16
    pool: int = 256
    train_instances: int = 128
    val_instances: int = 32


@dataclass
class EvaluationSection:
    test_instances: int = 60


def _train_defaults() -> TrainSchedule:
    return TrainSchedule(max_epochs=20, plateau=12)


def _augment_defaults() -> AugmentConfig:
    return AugmentConfig(shift=0.1)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    classifier: ModelSection = field(default_factory=ModelSection)
    train: TrainSchedule = field(default_factory=_train_defaults)
    augment: AugmentConfig = field(default_factory=_augment_defaults)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    metrics: MetricSection = field(default_factory=MetricSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def set(self, key: str, value) -> None:
        """Assign one dotted key, validating the name and coercing the type."""
        self.update({key: value})

    def update(self, values: dict) -> None:
        """Assign several dotted keys; each section is validated once, after all its keys are set."""
        grouped: dict[str, dict] = {}
        for key, value in values.items():
            _check_key(self, key)
            section, _, name = key.partition(".")
            if not name:
                setattr(self, section, _coerce(key, getattr(self, section), value))
                continue
            grouped.setdefault(section, {})[name] = _coerce(key, getattr(getattr(self, section), name), value)
        for section, updated in grouped.items():
            try:
                setattr(self, section, dataclasses.replace(getattr(self, section), **updated))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid value in section {section!r}: {e}") from None

    def items(self) -> list[tuple[str, object]]:
        """All keys with their current values, in file order."""
        out: list[tuple[str, object]] = [("seed", self.seed), ("out", self.out)]
        for s in _SECTIONS:
            for f in dataclasses.fields(getattr(self, s)):
                out.append((f"{s}.{f.name}", getattr(getattr(self, s), f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.items())


_SECTIONS = ("data", "classifier", "train", "augment", "attribution", "metrics", "fusion", "loss", "optimizer", "evaluation")


def _coerce(key: str, current, value):
    if isinstance(value, str) and (not isinstance(current, str) or value[:1] in ("'", '"')):
        value = _literal(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = tuple(v.strip() for v in value.split(",") if v.strip())
        elif isinstance(value, (int, float)):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(current, str):
        return str(value)
    return value


def _literal(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def parse_config(text: str, config: RunConfig | None = None, source: str = "<string>") -> RunConfig:
    config = config or RunConfig()
    values: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            _check_key(config, key)
        except ConfigError as e:
            raise ConfigError(f"{source}:{n}: {e}") from None
        values[key] = value.strip()
    try:
        config.update(values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    return config


def _check_key(config: RunConfig, key: str) -> None:
    section, _, name = key.partition(".")
    if not name:
        if section not in ("seed", "out"):
            raise ConfigError(f"unknown key {key!r}")
    elif section not in _SECTIONS or name not in {f.name for f in dataclasses.fields(getattr(config, section))}:
        raise ConfigError(f"unknown key {key!r}")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
