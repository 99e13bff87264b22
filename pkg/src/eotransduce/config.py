"""Experiment configuration: TOML (or JSON) files with unit-suffixed keys.

Files are validated against the schema of the shipped default config:
unknown sections or keys are rejected, values must have the default's type,
and missing keys inside a present section fall back to the defaults.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

# sections each subcommand reads
REQUIRED_SECTIONS = {
    "figures": ("device", "figures", "noise", "detection", "filters"),
    "photon": ("qubit_cavity", "drive", "path", "device"),
    "tomography": ("tomography",),
    "sweep": ("device", "qubit_cavity", "drive", "path", "noise", "detection", "counting"),
    "rabi": ("device", "qubit_cavity", "drive", "path", "noise", "detection", "counting"),
}

# keys whose absence is meaningful (no default value)
OPTIONAL_KEYS = {("drive", "bsb_amplitude_rad_per_s"): float}

# schema of list-of-table entries
ROW_SCHEMAS = {
    ("path", "ledger"): {"label": str, "loss_db": float},
    ("filters", "pump_bank"): {"fsr_hz": float, "linewidth_hz": float, "peak_transmission": float},
    ("filters", "signal_bank"): {"fsr_hz": float, "linewidth_hz": float, "peak_transmission": float},
}


def default_config_text() -> str:
    return resources.files("eotransduce").joinpath("data/default.toml").read_text()


def default_config() -> dict:
    return tomllib.loads(default_config_text())


_DEFAULTS = default_config()


def _coerce(value, expected, path):
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if expected is int:
        if isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if not isinstance(value, expected):
        raise ConfigError(f"expected {expected.__name__}, got {value!r}", path)
    return value


def _check_value(default, value, path, row_schema=None):
    if row_schema is not None:
        if not isinstance(value, list):
            raise ConfigError("expected a list of tables", path)
        rows = []
        for i, row in enumerate(value):
            if not isinstance(row, dict):
                raise ConfigError("expected a table", f"{path}[{i}]")
            extra = set(row) - set(row_schema)
            if extra:
                raise ConfigError(f"unknown key {sorted(extra)[0]!r}", f"{path}[{i}]")
            missing = set(row_schema) - set(row)
            if missing:
                raise ConfigError(f"missing key {sorted(missing)[0]!r}", f"{path}[{i}]")
            rows.append({k: _coerce(row[k], t, f"{path}[{i}].{k}") for k, t in row_schema.items()})
        return rows
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError("expected a list", path)
        return [_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(default, bool):
        return _coerce(value, bool, path)
    if isinstance(default, int):
        return _coerce(value, int, path)
    if isinstance(default, float):
        return _coerce(value, float, path)
    return _coerce(value, type(default), path)


def resolve(raw: dict, command: str | None = None, fill_missing_sections: bool = False) -> dict:
    """Validate a parsed config and fill per-key defaults.

    With ``fill_missing_sections`` absent sections are taken from the
    defaults; otherwise every section needed by ``command`` must be present.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    for section in raw:
        if section not in _DEFAULTS:
            raise ConfigError("unknown section", section)
    if command is not None:
        if command not in REQUIRED_SECTIONS:
            raise ConfigError(f"unknown command {command!r}")
        if not fill_missing_sections:
            for section in REQUIRED_SECTIONS[command]:
                if section not in raw:
                    raise ConfigError("missing section", section)
    resolved = {}
    for section, defaults in _DEFAULTS.items():
        given = raw.get(section)
        if given is None:
            resolved[section] = copy.deepcopy(defaults)
            continue
        if not isinstance(given, dict):
            raise ConfigError("expected a table", section)
        out = {}
        for key, value in given.items():
            path = f"{section}.{key}"
            if (section, key) in OPTIONAL_KEYS:
                out[key] = _coerce(value, OPTIONAL_KEYS[(section, key)], path)
            elif key not in defaults:
                raise ConfigError("unknown key", path)
            else:
                out[key] = _check_value(defaults[key], value, path, ROW_SCHEMAS.get((section, key)))
        for key, value in defaults.items():
            out.setdefault(key, copy.deepcopy(value))
        resolved[section] = out
    return resolved


def load(path: str | Path | None, command: str | None = None) -> dict:
    """Read and resolve a config file; ``None`` gives the shipped default."""
    if path is None:
        return resolve(default_config(), command)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"parse error: {exc}", str(path)) from exc
    return resolve(raw, command)
