"""Flat, typed run configuration and anchor files (TOML)."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiments import Anchors
from .source import ChainConfig, DetectorParams, GeometryParams, MemoryParams, SourceParams

CONFIG_SCHEMA = "atomphoton.config/1"
ANCHORS_SCHEMA = "atomphoton.anchors/1"
MODES = ("analytic", "sampled")
MAX_N_MAX = 12


class ConfigError(ValueError):
    """Invalid configuration input; the message names the offending key."""


def _real(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False) -> Callable[[float], bool]:
    def ok(x):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            return False
        return (x > lo if lo_open else x >= lo) and (x < hi if hi_open else x <= hi) and math.isfinite(x)
    return ok


def _unit3(v) -> bool:
    return len(v) == 3 and all(math.isfinite(x) for x in v) and abs(math.sqrt(sum(x * x for x in v)) - 1) <= 1e-12


# key -> (kind, range check)
FIELDS: dict[str, tuple[str, Callable[[Any], bool]]] = {
    "chi_L": ("float", _real(0, 1, hi_open=True)),
    "chi_R": ("float", _real(0, 1, hi_open=True)),
    "phi1": ("float", _real()),
    "phi2": ("float", _real()),
    "phase_jitter_sigma": ("float", _real(0)),
    "mode_overlap": ("float", _real(0, 1)),
    "eta_r0": ("float", _real(0, 1)),
    "shape": ("str", lambda s: s in ("gaussian", "exponential")),
    "T": ("float", _real(0, lo_open=True)),
    "dephase_T": ("float", _real(0, lo_open=True)),
    "eta_AS": ("float", _real(0, 1, lo_open=True)),
    "eta_S": ("float", _real(0, 1, lo_open=True)),
    "dark_prob": ("float", _real(0, 1, hi_open=True)),
    "background_S": ("float", _real(0, 1, hi_open=True)),
    "background_S_rate": ("float", _real(0)),
    "k_W": ("vec3", _unit3),
    "k_R": ("vec3", _unit3),
    "k_AS_L": ("vec3", _unit3),
    "k_AS_R": ("vec3", _unit3),
    "wavenumber": ("float", _real(0, lo_open=True)),
    "n_max": ("int", lambda n: 1 <= n <= MAX_N_MAX),
    "tau_us": ("float", _real(0)),
    "mode": ("str", lambda m: m in MODES),
    "trials": ("int", lambda n: n >= 1),
    "seed": ("int", lambda n: 0 <= n < 2**64),
    "workers": ("int", lambda n: n >= 1),
    "out_dir": ("str", lambda s: len(s) > 0),
}


def _coerce(key: str, kind: str, value):
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if not isinstance(value, (list, tuple)) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in value):
        raise ConfigError(f"{key} must be a list of 3 numbers")
    return tuple(float(x) for x in value)


def validate(raw: Mapping[str, Any]) -> dict[str, Any]:
    """Type- and range-check a flat mapping; every known key must be present."""
    unknown = sorted(set(raw) - set(FIELDS) - {"schema"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    if raw.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError(f"schema must be {CONFIG_SCHEMA!r}")
    out: dict[str, Any] = {}
    for key, (kind, ok) in FIELDS.items():
        if key not in raw:
            raise ConfigError(f"{key} missing")
        value = _coerce(key, kind, raw[key])
        if not ok(value):
            raise ConfigError(f"{key} out of range")
        out[key] = value
    return out


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _shipped(name: str) -> dict:
    with resources.files("atomphoton.data").joinpath(name).open("rb") as fh:
        return tomllib.load(fh)


def default_values() -> dict[str, Any]:
    return validate(_shipped("defaults.toml"))


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with a TOML literal value; bare words are taken as strings."""
    key, sep, text = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {text.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = text.strip()
    return key, value


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        """Shipped defaults, then the file at ``path``, then ``overrides``."""
        raw: dict[str, Any] = dict(_shipped("defaults.toml"))
        if path is not None:
            user = _load_toml(path)
            if user.get("schema") != CONFIG_SCHEMA:
                raise ConfigError(f"schema missing or not {CONFIG_SCHEMA!r}")
            raw.update(user)
        raw.update(overrides or {})
        return cls(validate(raw))

    def __getitem__(self, key):
        return self.values[key]

    def chain(self) -> ChainConfig:
        v = self.values
        return ChainConfig(
            source=SourceParams(v["chi_L"], v["chi_R"], v["phi1"], v["phi2"], v["phase_jitter_sigma"],
                                v["mode_overlap"]),
            memory=MemoryParams(v["eta_r0"], v["shape"], v["T"], v["dephase_T"]),
            detector=DetectorParams(v["eta_AS"], v["eta_S"], v["dark_prob"], v["background_S"],
                                    v["background_S_rate"]),
            geometry=GeometryParams(v["k_W"], v["k_R"], v["k_AS_L"], v["k_AS_R"], v["wavenumber"]),
            n_max=v["n_max"],
        )

    def echo(self) -> dict[str, Any]:
        out = {"schema": CONFIG_SCHEMA}
        out.update({k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()})
        return out


ANCHOR_KEYS = {"schema", "p_AS", "eta_AS", "eta_S", "shape", "n_max", "retrieval", "g2", "bell",
               "visibility_intercept", "visibility_tau"}


def load_anchors(path: str | Path | None = None) -> Anchors:
    raw = _shipped("anchors.toml") if path is None else _load_toml(path)
    unknown = sorted(set(raw) - ANCHOR_KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    if raw.get("schema") != ANCHORS_SCHEMA:
        raise ConfigError(f"schema missing or not {ANCHORS_SCHEMA!r}")
    for key in ("retrieval", "g2", "bell"):
        rows = raw.get(key, [])
        if not isinstance(rows, list) or any(
                not isinstance(r, list) or len(r) != 3 or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in r)
                for r in rows):
            raise ConfigError(f"{key} must be a list of [tau_us, value, std_err] triples")
        if any(r[0] < 0 or r[2] <= 0 for r in rows):
            raise ConfigError(f"{key} out of range")
    if "visibility_intercept" not in raw:
        raise ConfigError("visibility_intercept missing")
    if not 0 < raw["visibility_intercept"] <= 1:
        raise ConfigError("visibility_intercept out of range")
    kwargs = {k: raw[k] for k in ANCHOR_KEYS - {"schema", "retrieval", "g2", "bell"} if k in raw}
    for key, ok in (("p_AS", _real(0, 1, lo_open=True)), ("eta_AS", _real(0, 1, lo_open=True)),
                    ("eta_S", _real(0, 1, lo_open=True)), ("visibility_tau", _real(0)),
                    ("n_max", lambda n: isinstance(n, int) and 1 <= n <= MAX_N_MAX),
                    ("shape", lambda s: s in ("gaussian", "exponential"))):
        if key in kwargs and not ok(kwargs[key]):
            raise ConfigError(f"{key} out of range")
    try:
        return Anchors(retrieval=raw.get("retrieval", []), g2=raw.get("g2", []), bell=raw.get("bell", []), **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
