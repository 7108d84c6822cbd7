"""Flat run configuration shared by every CLI subcommand.

One JSON object holds model, training, layout and path settings. Every key
can be overridden with ``--key=value``; unknown keys are rejected.
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .dit import ModelConfig
from .errors import ValidationError
from .layout import LayoutThresholds
from .trainer import TrainConfig

_MODEL_KEYS = (
    "d_model",
    "n_heads",
    "n_blocks",
    "patch_size",
    "noise_grid",
    "cam_block_index",
    "max_references",
    "mlp_ratio",
    "rope_base",
    "align",
)
_TRAIN_KEYS = (
    "steps_single",
    "steps_multi",
    "batch_size",
    "lr",
    "weight_decay",
    "lambda_mask",
    "use_regional_rope",
    "use_masked_loss",
    "t_target",
    "seed",
    "multi_subjects",
    "eval_subjects",
    "eval_scenes",
    "sampler_steps",
    "time_sampling",
)
_THRESHOLD_KEYS = ("min_containment", "min_area_ratio", "max_area_ratio", "row_overlap", "right_to_left")

PAPER_STEPS = (6000, 3000)


@dataclass(frozen=True)
class RunConfig:
    # model
    d_model: int = 64
    n_heads: int = 2
    n_blocks: int = 4
    patch_size: int = 4
    noise_grid: tuple[int, int] = (8, 8)
    cam_block_index: int = 1
    max_references: int = 4
    mlp_ratio: int = 2
    rope_base: float = 100.0
    align: float = 0.5
    # training
    steps_single: int = 2000
    steps_multi: int = 1000
    paper_budget: bool = False
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.01
    lambda_mask: float = 0.05
    use_regional_rope: bool = True
    use_masked_loss: bool = True
    t_target: int = 3
    seed: int = 0
    multi_subjects: tuple[int, ...] = (2, 3)
    eval_subjects: int = 3
    eval_scenes: int = 32
    sampler_steps: int = 20
    time_sampling: str = "uniform"
    # ablation
    seeds: tuple[int, ...] = (0, 1, 2)
    budget: bool = False
    # layout
    min_containment: float = 0.9
    min_area_ratio: float = 0.03
    max_area_ratio: float = 0.95
    row_overlap: float = 0.5
    right_to_left: bool = True
    aspect_ratio: float = 0.7
    gutter: float = 0.02
    panel_jitter: float = 0.05
    panels: int = 0
    chars: tuple[int, ...] = ()
    # data and inference
    split: str = "train"
    n_scenes: int = 16
    n_subjects: int = 3
    scene: int = 0
    refs: tuple[str, ...] = ()
    boxes: str = ""
    # paths
    out: str = "out"
    input: str = ""
    checkpoint: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS}, t_target=self.t_target)

    def train_config(self) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_KEYS}
        if self.paper_budget:
            kw["steps_single"], kw["steps_multi"] = PAPER_STEPS
        return TrainConfig(**kw, model=self.model_config())

    def thresholds(self) -> LayoutThresholds:
        return LayoutThresholds(**{k: getattr(self, k) for k in _THRESHOLD_KEYS})

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


FIELD_TYPES = typing.get_type_hints(RunConfig)


def _is_tuple(tp) -> bool:
    return typing.get_origin(tp) is tuple


def coerce(key: str, value):
    """Convert a JSON value or a command-line string to the field's type."""
    if key not in FIELD_TYPES:
        raise ValidationError(f"unknown config key {key!r}")
    tp = FIELD_TYPES[key]
    try:
        if _is_tuple(tp):
            if isinstance(value, str):
                items = [v for v in value.replace(" ", "").split(",") if v]
            elif isinstance(value, (list, tuple)):
                items = list(value)
            else:
                raise TypeError(f"expected a list, got {type(value).__name__}")
            inner = typing.get_args(tp)[0]
            if any(isinstance(v, bool) for v in items):
                raise TypeError("booleans are not list items")
            return tuple(inner(v) for v in items)
        if tp is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
                return False
            raise TypeError(f"expected a boolean, got {value!r}")
        if isinstance(value, bool):
            raise TypeError("booleans are not numbers")
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise TypeError(f"expected an integer, got {value!r}")
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                raise TypeError(f"expected a string, got {type(value).__name__}")
            return value
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config key {key!r}: {exc}") from None
    raise ValidationError(f"config key {key!r}: unsupported type {tp}")


def load_config(path: str | Path | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return raw


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    """Defaults, then the config file, then command-line overrides."""
    values = {}
    for source in (file_values, overrides):
        for k, v in source.items():
            values[k] = coerce(k, v)
    cfg = replace(RunConfig(), **values)
    # Validate the nested configs eagerly so bad values fail before any work.
    cfg.train_config()
    cfg.thresholds()
    return cfg


__all__ = ["RunConfig", "build_config", "coerce", "load_config", "PAPER_STEPS"]
