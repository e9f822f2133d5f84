"""Run configuration: defaults, TOML files, and dotted-flag overrides.

A RunConfig bundles every tunable of the refiner, metrics, generator,
service, and CLI into named sections. Values resolve in order: built-in
defaults, then the TOML file, then ``section.key=value`` overrides. The
fully resolved mapping is echoed into every output manifest so artifacts
are self-describing.
"""

from __future__ import annotations

import dataclasses
import os
import subprocess
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - py3.10 fallback
    import tomli as tomllib

from . import __version__
from .errors import InvalidInputError
from .metrics import MetricConfig
from .objective import RegWeights
from .optimizer import RefineSettings
from .synth import GenConfig

WORKERS_ENV = "SLENDERFIT_WORKERS"


@dataclasses.dataclass(frozen=True)
class ServiceConfig:
    """HTTP labeling-service settings."""

    host: str = "127.0.0.1"
    port: int = 8707
    data_root: str = "./slenderfit-sessions"
    max_side: int = 1024          # largest accepted image dimension, px
    max_queue: int = 8            # global pending-job bound, then 429
    success_ratio: float = 0.5    # done-job success flag threshold
    cors_origin: str = "*"

    def __post_init__(self):
        if not (0 < self.port < 65536):
            raise InvalidInputError("port must be in (0, 65536)")
        if self.max_side < 8:
            raise InvalidInputError("max_side must be >= 8")
        if self.max_queue < 1:
            raise InvalidInputError("max_queue must be >= 1")
        if self.success_ratio <= 0:
            raise InvalidInputError("success_ratio must be positive")


@dataclasses.dataclass(frozen=True)
class CliConfig:
    """Execution options shared by the subcommands."""

    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    optimizer: RefineSettings
    metrics: MetricConfig
    synth: GenConfig
    service: ServiceConfig
    cli: CliConfig

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for section in d.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return d


_SECTION_TYPES = {
    "optimizer": RefineSettings,
    "metrics": MetricConfig,
    "synth": GenConfig,
    "service": ServiceConfig,
    "cli": CliConfig,
}


def default_config() -> RunConfig:
    return RunConfig(optimizer=RefineSettings(), metrics=MetricConfig(),
                     synth=GenConfig(), service=ServiceConfig(),
                     cli=CliConfig())


def _default_leaf(section: str, path: list):
    """Default value at section.path, or raise naming the unknown key."""
    obj = _SECTION_TYPES[section]()
    trail = [section]
    for part in path:
        trail.append(part)
        if not (dataclasses.is_dataclass(obj) and
                part in {f.name for f in dataclasses.fields(obj)}):
            raise InvalidInputError(f"unknown config key: {'.'.join(trail)}")
        obj = getattr(obj, part)
    if dataclasses.is_dataclass(obj):
        raise InvalidInputError(
            f"{'.'.join(trail)} is a section, not a value")
    return obj


def _coerce(text: str, template, key: str):
    """Parse a flag string against the type of the default value."""
    if isinstance(text, str) and text.lower() in ("none", "null"):
        return None
    try:
        if isinstance(template, bool):
            if str(text).lower() in ("1", "true", "yes", "on"):
                return True
            if str(text).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(template, int) and not isinstance(template, bool):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, tuple):
            parts = [p for p in str(text).replace(",", " ").split() if p]
            return tuple(type(template[0])(p) for p in parts)
        if template is None:
            # typed None defaults (e.g. optional floats) accept numbers
            try:
                return float(text)
            except ValueError:
                return str(text)
        return str(text)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"bad value for {key}: {exc}") from exc


def _merge_section(section: str, base: dict, incoming: dict, trail: str):
    for key, value in incoming.items():
        path = f"{trail}.{key}"
        default = _default_leaf(section, path.split(".")[1:]) \
            if not isinstance(value, dict) else None
        if isinstance(value, dict):
            sub = base.setdefault(key, {})
            if not isinstance(sub, dict):
                raise InvalidInputError(f"{path} is a value, not a section")
            _merge_section(section, sub, value, path)
        else:
            if isinstance(value, list):
                value = tuple(value)
            elif default is not None and not isinstance(value, type(default)) \
                    and isinstance(value, (int, float)) \
                    and isinstance(default, float):
                value = float(value)
            base[key] = value


def _build(section: str, data: dict):
    cls = _SECTION_TYPES[section]
    kwargs = dict(data)
    if section == "optimizer" and isinstance(kwargs.get("weights"), dict):
        kwargs["weights"] = RegWeights(**kwargs["weights"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad [{section}] config: {exc}") from exc


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    """Resolve a RunConfig from an optional TOML file plus dotted overrides.

    ``overrides`` holds strings of the form ``section.key=value`` (nested
    keys allowed, e.g. ``optimizer.weights.lam2=0.1``). The environment
    variable SLENDERFIT_WORKERS, when set, overrides cli.workers last.
    """
    merged: dict = {name: {} for name in _SECTION_TYPES}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise InvalidInputError(f"{path}: {exc}") from exc
        for section, body in doc.items():
            if section not in _SECTION_TYPES:
                raise InvalidInputError(f"unknown config section: {section}")
            if not isinstance(body, dict):
                raise InvalidInputError(f"[{section}] must be a table")
            _merge_section(section, merged[section], body, section)
    for item in overrides:
        if "=" not in item:
            raise InvalidInputError(f"override must be key=value: {item!r}")
        dotted, _, raw = item.partition("=")
        parts = dotted.strip().split(".")
        if len(parts) < 2 or parts[0] not in _SECTION_TYPES:
            raise InvalidInputError(f"override key must be section.key: {dotted!r}")
        default = _default_leaf(parts[0], parts[1:])
        target = merged[parts[0]]
        for part in parts[1:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = _coerce(raw.strip(), default, dotted)
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers is not None:
        try:
            merged["cli"]["workers"] = int(env_workers)
        except ValueError as exc:
            raise InvalidInputError(
                f"{WORKERS_ENV} must be an integer: {env_workers!r}") from exc
    return RunConfig(**{name: _build(name, body)
                        for name, body in merged.items()})


_VERSION_CACHE = None


def version_string() -> str:
    """Package version plus short commit hash when running from a checkout."""
    global _VERSION_CACHE
    if _VERSION_CACHE is None:
        base = f"slenderfit-{__version__}"
        try:
            out = subprocess.run(
                ["git", "describe", "--always", "--dirty"],
                cwd=os.path.dirname(os.path.abspath(__file__)),
                capture_output=True, text=True, timeout=5)
            if out.returncode == 0 and out.stdout.strip():
                base = f"{base}+g{out.stdout.strip()}"
        except (OSError, subprocess.SubprocessError):
            pass
        _VERSION_CACHE = base
    return _VERSION_CACHE
