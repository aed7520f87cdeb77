"""Flat key = value configuration covering every pipeline tunable.

The file format is UTF-8 text, one ``section.key = value`` per line, with
``#`` comment lines and blank lines ignored. Unknown keys are rejected by
name. Values are validated by the owning module's dataclass on load, and
``format()`` output parses back to an identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .dataset import AugmentConfig
from .model import ModelConfig
from .spectrogram import SpectrogramParams
from .training import TrainConfig

POOL_MODES = ("mean_exp", "mean")


class ConfigError(Exception):
    """Malformed text, unknown key, or value rejected by validation."""


@dataclass(frozen=True)
class FilterConfig:
    row_factor: float = 3.0
    col_factor: float = 3.0
    threshold: float = 0.16

    def __post_init__(self) -> None:
        if self.row_factor <= 0 or self.col_factor <= 0:
            raise ValueError("clip factors must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    spectrogram: SpectrogramParams = SpectrogramParams()
    filter: FilterConfig = FilterConfig()
    augment: AugmentConfig = AugmentConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    pool_mode: str = "mean_exp"

    def __post_init__(self) -> None:
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool.mode must be one of {POOL_MODES}")


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (section attribute, field name, parser)
KEY_TABLE: dict[str, tuple[str, str, type | object]] = {
    "spectrogram.sample_rate": ("spectrogram", "sample_rate", int),
    "spectrogram.chunk_seconds": ("spectrogram", "chunk_seconds", float),
    "spectrogram.n_fft": ("spectrogram", "n_fft", int),
    "spectrogram.hop": ("spectrogram", "hop", int),
    "spectrogram.n_mels": ("spectrogram", "n_mels", int),
    "spectrogram.n_cols": ("spectrogram", "n_cols", int),
    "spectrogram.f_min": ("spectrogram", "f_min", float),
    "spectrogram.f_max": ("spectrogram", "f_max", float),
    "spectrogram.log_floor": ("spectrogram", "log_floor", float),
    "filter.row_factor": ("filter", "row_factor", float),
    "filter.col_factor": ("filter", "col_factor", float),
    "filter.threshold": ("filter", "threshold", float),
    "augment.max_roll": ("augment", "max_roll", int),
    "augment.noise_prob": ("augment", "noise_prob", float),
    "augment.blend_lo": ("augment", "blend_lo", float),
    "augment.blend_hi": ("augment", "blend_hi", float),
    "model.n_classes": ("model", "n_classes", int),
    "model.base_filters": ("model", "base_filters", int),
    "model.filter_multiplier": ("model", "filter_multiplier", float),
    "model.downsample": ("model", "downsample", str),
    "model.groups": ("model", "groups", int),
    "train.max_epochs": ("train", "max_epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.seed": ("train", "seed", int),
    "train.early_stop_patience": ("train", "early_stop_patience", int),
    "train.snapshot_every": ("train", "snapshot_every", int),
    "train.val_fraction": ("train", "val_fraction", float),
    "train.augment": ("train", "augment", _parse_bool),
    "train.base_lr": ("train", "base_lr", float),
    "train.cycle_epochs": ("train", "cycle_epochs", int),
    "pool.mode": (None, "pool_mode", str),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; rejects malformed lines and duplicates."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(cfg: PipelineConfig, raw: dict[str, str]) -> PipelineConfig:
    """New config with raw string overrides parsed, validated, and applied."""
    by_section: dict[str, dict[str, object]] = {}
    top: dict[str, object] = {}
    for key, value in raw.items():
        entry = KEY_TABLE.get(key)
        if entry is None:
            raise ConfigError(f"unknown config key: {key}")
        section, field_name, parser = entry
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        if section is None:
            top[field_name] = parsed
        else:
            by_section.setdefault(section, {})[field_name] = parsed
    try:
        kwargs: dict[str, object] = dict(top)
        for section, fields in by_section.items():
            kwargs[section] = replace(getattr(cfg, section), **fields)
        return replace(cfg, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Path | str, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base if base is not None else PipelineConfig()
    text = Path(path).read_text(encoding="utf-8")
    return apply_overrides(base, parse_config_text(text, source=str(path)))


def format_config(cfg: PipelineConfig) -> str:
    """Full key = value listing; parsing it back reproduces cfg exactly."""
    lines = []
    for key, (section, field_name, _) in KEY_TABLE.items():
        holder = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_fmt(getattr(holder, field_name))}")
    return "\n".join(lines) + "\n"
