"""Experiment configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .fixed_point import AndersonConfig, PnPConfig
from .training import TrainConfig
from .ttt import TTTConfig


class ConfigError(ValueError):
    """Unknown key, malformed value, or a value that fails validation."""


@dataclass
class ExperimentConfig:
    experiment_id: str = "shift"
    image_size: int = 64
    cs_ratios: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    num_test_images: int = 10
    test_kind: str = "phantom"
    data_seed: int = 0
    mask_seed: int = 0
    init_seed: int = 0
    measurement_noise: float = 0.0
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    anderson: AndersonConfig = field(default_factory=AndersonConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    matched_checkpoint: str = ""
    mismatched_checkpoint: str = ""
    out_dir: str = "results"
    # wall-clock columns make results.csv run-dependent, so they are opt-in
    record_time: bool = False

    def __post_init__(self):
        self.cs_ratios = [float(r) for r in self.cs_ratios]
        if not self.cs_ratios:
            raise ValueError("cs_ratios must not be empty")
        for r in self.cs_ratios:
            if not 0.0 < r <= 1.0:
                raise ValueError(f"cs_ratio {r} outside (0, 1]")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.num_test_images < 0:
            raise ValueError("num_test_images must be >= 0")
        if self.measurement_noise < 0:
            raise ValueError("measurement_noise must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        items = value if isinstance(value, (list, tuple)) else [value]
        return [_coerce(v, 0.0, key) for v in items]
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{key}: cannot set a value of type {type(current).__name__}")


def _replace(obj, name: str, value, key: str):
    try:
        return dataclasses.replace(obj, **{name: value})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{key}: {e}") from e


def set_key(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Return a copy of ``cfg`` with the dotted ``key`` set; values are validated."""
    parts = key.strip().split(".")
    if len(parts) > 2:
        raise ConfigError(f"unknown key {key!r}")
    names = {f.name for f in dataclasses.fields(cfg)}
    if parts[0] not in names:
        raise ConfigError(f"unknown key {key!r}")
    if isinstance(value, str):
        value = _parse_value(value)
    current = getattr(cfg, parts[0])
    if len(parts) == 1:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section; set {key}.<field>")
        return _replace(cfg, parts[0], _coerce(value, current, key), key)
    if not dataclasses.is_dataclass(current) or parts[1] not in {f.name for f in dataclasses.fields(current)}:
        raise ConfigError(f"unknown key {key!r}")
    sub = _replace(current, parts[1], _coerce(value, getattr(current, parts[1]), key), key)
    return _replace(cfg, parts[0], sub, key)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = base if base is not None else ExperimentConfig()
    for key, value in parser["config"].items():
        cfg = set_key(cfg, key, value)
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    return parse_config_text(text, base)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, str):
        return value
    return repr(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config_text`."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines += [f"{f.name}.{g.name} = {_fmt(getattr(v, g.name))}" for g in dataclasses.fields(v)]
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
