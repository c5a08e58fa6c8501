"""Typed parameter tables and config-file resolution for the command line.

Config files are INI files with one section per subcommand (``[iid-sweep]``,
``[cliff]``, ...) plus an optional ``[common]`` section.  A JSON file written
as ``resolved-config.json`` is accepted too, which makes every run
reproducible from its own record.  Precedence: flags > file > defaults.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Param:
    name: str
    kind: type
    default: Any
    help: str = ""
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


COMMON = (
    Param("seed", int, 0, "base seed for all random streams"),
    Param("runs", int, None, "number of independent repetitions"),
    Param("jobs", int, 1, "worker processes"),
    Param("out", str, None, "output directory (default: $MEVRL_OUT or ./mevrl-out)"),
)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(param: Param, raw):
    if raw is None:
        return None
    try:
        if param.kind is bool:
            value = parse_bool(raw)
        elif param.kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            value = int(raw)
        elif param.kind is float:
            value = float(raw)
        else:
            value = str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{param.name}: cannot read {raw!r} as {param.kind.__name__}") from exc
    if param.choices and value not in param.choices:
        raise ConfigError(f"{param.name} must be one of {', '.join(map(str, param.choices))}")
    return value


def read_config_file(path, section: str) -> dict:
    """Raw key/value pairs for ``section`` (merged over ``[common]``)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        cmd = data.pop("subcommand", section)
        data.pop("version", None)
        if cmd != section:
            raise ConfigError(f"config was written for {cmd!r}, not {section!r}")
        return data
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc
    values = {}
    for name in ("common", section):
        if parser.has_section(name):
            values.update(parser[name])
    return values


def resolve(params: Sequence[Param], file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file values and flags; unknown keys are an error."""
    table = {p.name: p for p in params}
    unknown = sorted(set(file_values) - set(table)) + sorted(set(flag_values) - set(table))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for p in params:
        if p.name in flag_values and flag_values[p.name] is not None:
            out[p.name] = coerce(p, flag_values[p.name])
        elif p.name in file_values:
            out[p.name] = coerce(p, file_values[p.name])
        else:
            out[p.name] = p.default
    return out


def parse_overrides(items: Sequence[str] | None) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


__all__ = ["Param", "COMMON", "ConfigError", "coerce", "parse_bool", "read_config_file",
           "resolve", "parse_overrides"]
