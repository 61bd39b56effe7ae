"""TOML configuration. Command-line flags always win over file values.

Example::

    seed = 42
    zoom = 16

    [build]
    epsilon_px = 2.0
    negative_fraction = 0.40
    test_size = 100

    [detect]
    min_inliers = 400
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from roadnet.dataset import BuildConfig
from roadnet.evaluate import EvalConfig
from roadnet.synth import DetectParams, RenderStyle, WorldConfig
from roadnet.tiles import RetryPolicy


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetOptions:
    schema: str = "coordinates"
    negative_fraction: float = 0.40
    test_size: int = 100


@dataclass(frozen=True)
class FetchOptions:
    url_template: str = "/tiles/{z}/{x}/{y}.png"
    max_concurrent_fetches: int = 8
    timeout_ms: float = 10_000.0
    api_key: Optional[str] = None


@dataclass
class Settings:
    seed: int = 0
    zoom: int = 16
    verbose: bool = False
    build: BuildConfig = field(default_factory=BuildConfig)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    world: WorldConfig = field(default_factory=WorldConfig)
    render: RenderStyle = field(default_factory=RenderStyle)
    detect: DetectParams = field(default_factory=DetectParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fetch: FetchOptions = field(default_factory=FetchOptions)
    retry: RetryPolicy = field(default_factory=RetryPolicy)


SECTIONS = ("build", "dataset", "world", "render", "detect", "eval", "fetch", "retry")
TOP_LEVEL = ("seed", "zoom", "verbose")


def _coerce(current: Any, value: Any, where: str) -> Any:
    if isinstance(current, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if current is not None and not isinstance(value, type(current)):
        raise ConfigError(f"{where}: expected {type(current).__name__}")
    return value


def _update(obj, values: dict, section: str):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    changes = {k: _coerce(getattr(obj, k), v, f"{section}.{k}") for k, v in values.items()}
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def settings_from_dict(doc: dict) -> Settings:
    s = Settings()
    for key, value in doc.items():
        if key in TOP_LEVEL:
            setattr(s, key, _coerce(getattr(s, key), value, key))
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            setattr(s, key, _update(getattr(s, key), value, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return s


def load_settings(path: Optional[str]) -> Settings:
    if path is None:
        return Settings()
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return settings_from_dict(doc)


def override(obj, **changes):
    """``dataclasses.replace`` that ignores flags left unset (None)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(obj, **changes) if changes else obj
