"""Run configuration: TOML file, defaults and dotted command-line overrides."""

from __future__ import annotations

import copy
import sys

from rnl.errors import ArgumentError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "precision": "f64",
    "out": "out",
    "refs": [],
    "input": {
        "path": "",
        "pattern": "moving-dot",
        "shape": [4, 16, 16, 16],
        "value": 1.0,
        "radius": 2.0,
        "velocity": [0, 1],
        "amplitude": 5.0,
        "noise": 0.1,
    },
    "block": {
        "kind": "rnl",
        "reduction": 2,
        "form": "gaussian",
        "residual_bn": True,
        "zero_gamma": True,
        "ftheta": {"mode": "conv", "kt": 3, "kh": 7, "kw": 7, "bias": False},
    },
    "oracle": {"tolerance": 1e-5, "corrupt": False},
    "gradcheck": {"shape": [2, 3, 3, 4], "h": 1e-5, "tol": 1e-5},
}


def _merge(base, update, prefix=""):
    for key, val in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ArgumentError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ArgumentError(f"config key {name!r} must be a table")
            _merge(base[key], val, name + ".")
        else:
            base[key] = _coerce(name, base[key], val)


def _coerce(name, default, val):
    if isinstance(default, bool):
        ok = isinstance(val, bool)
    elif isinstance(default, int):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(default, float):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        val = float(val) if ok else val
    elif isinstance(default, list):
        ok = isinstance(val, list)
    else:
        ok = isinstance(val, str)
    if not ok:
        raise ArgumentError(f"config key {name!r} expects {type(default).__name__}, got {val!r}")
    return val


def parse_value(text):
    """A TOML literal (``3``, ``true``, ``[1, 2]``) or else a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(cfg, dotted, value):
    keys = dotted.split(".")
    node = {}
    root = node
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    _merge(cfg, root)


def load_config(path=None, overrides=()):
    """Defaults, then the TOML file at ``path``, then ``(dotted_key, value)`` pairs."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ArgumentError(f"{path}: {exc}") from exc
        _merge(cfg, data)
    for key, val in overrides:
        set_dotted(cfg, key, val)
    return cfg
