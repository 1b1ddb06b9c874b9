"""``key = value`` run configuration shared by all CLI commands."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

ARCHITECTURES = ("segnet", "segnet_ms", "fusenet_sum", "fusenet_virtual", "residual_correction")
MODALITIES = ("optical", "composite")


@dataclass
class RunConfig:
    """Every recognised key with its default.

    Model: ``architecture``, ``modality`` (input of single-stream models),
    ``k``, ``width_scale``, ``block_order``, ``branches`` (multi-scale heads).
    Data: ``n_tiles``, ``tile_size``, ``patch_size``, ``train_stride``,
    ``test_stride``, ``fold`` (``none`` or 0-2). Optimisation: ``epochs``,
    ``batch_size``, ``base_lr``, ``momentum``, ``weight_decay``,
    ``milestones``, ``encoder_lr_multiplier``, ``class_balance``,
    ``clutter_index`` (``none`` disables the clutter rule), ``seed``.
    Evaluation: ``erosion_radius``, ``tolerance`` (gradient checks).
    Paths: ``tiles_dir``, ``checkpoint``, ``base_checkpoints`` (comma
    separated), ``log``, ``predictions_dir``, ``report``.
    """

    architecture: str = "segnet"
    modality: str = "optical"
    k: int = 6
    width_scale: float = 1.0
    block_order: str = "conv-bn-relu"
    branches: int = 3
    n_tiles: int = 8
    tile_size: int = 256
    patch_size: int = 128
    train_stride: int = 64
    test_stride: int = 32
    fold: int | None = None
    epochs: int = 20
    batch_size: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    milestones: tuple = (5, 10, 15)
    encoder_lr_multiplier: float = 1.0
    class_balance: bool = True
    clutter_index: int | None = 5
    seed: int = 0
    erosion_radius: int = 3
    tolerance: float = 1e-3
    tiles_dir: str = "tiles"
    checkpoint: str = "model.mfn"
    base_checkpoints: tuple = ()
    log: str = "train.log"
    predictions_dir: str = "predictions"
    report: str = "report.txt"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}")
        if self.fold is not None and self.fold not in (0, 1, 2):
            raise ConfigError("fold must be none, 0, 1 or 2")
        for name in ("k", "patch_size", "train_stride", "test_stride", "batch_size", "n_tiles", "tile_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.erosion_radius < 0:
            raise ConfigError("epochs and erosion_radius must be >= 0")


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_OPTIONAL_INT = {"fold", "clutter_index"}


def _parse_value(key, raw):
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if key in _OPTIONAL_INT:
            return None if raw.lower() in ("none", "") else int(raw)
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if key == "milestones":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "base_checkpoints":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text, overrides=None):
    """Parse ``key = value`` lines (``#`` starts a comment) plus overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = raw
    values.update(overrides or {})
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _parse_value(k, v) for k, v in values.items()})


def load_config(path=None, overrides=None):
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, overrides)


def serialize_config(cfg):
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
