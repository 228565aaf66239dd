"""TOML config loading, defaults, and a small writer for resolved copies."""

from __future__ import annotations

from pathlib import Path

import tomli


class ConfigError(Exception):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "problem": {
        "kind": "heat",
        "n_p": 16,
        "sigma2": 1.0,
        "n_angles": 32,
        "n_det": 0,  # 0 -> n_p
        "accel": 4,
        "center_fraction": 0.08,
        "mask_seed": 7,
        "noise_zero_freq_pct": 0.04,
        "n_x": 64,
        "n_y": 32,
    },
    "prior": {"kind": "rect", "n_data": 2000, "shift_max": 8},
    "gan": {
        "n_z": 5,
        "gen_widths": [64, 256],
        "critic_widths": [256, 64],
        "epochs": 300,
        "batch": 64,
        "lr": 2e-4,
        "beta1": 0.5,
        "beta2": 0.99,
        "lambda_gp": 10.0,
        "n_critic": 5,
        "patience": 0,
    },
    "flow": {"kind": "planar", "n_layers": 64, "hidden": 0, "actnorm": False},
    "vi": {
        "epochs": 1000,
        "batch": 32,
        "lr": 2e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "patience": 0,
        "stride": 10,
    },
    "hmc": {
        "n_samples": 10000,
        "n_leapfrog": 10,
        "target_accept": 0.75,
        "burn_in_fraction": 0.5,
        "initial_step": 0.01,
    },
    "sample": {"n_s": 10000},
    "output": {"dir": "runs/out", "formats": ["gftensor", "pgm", "csv"], "figures": True},
}


def load_config(path) -> dict:
    with open(path, "rb") as f:
        raw = tomli.load(f)
    return resolve(raw)


def resolve(raw: dict) -> dict:
    """Overlay a raw config onto the defaults; unknown keys are rejected."""
    cfg = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            section = dict(default)
            for k, v in raw.get(key, {}).items():
                if k not in default:
                    raise ConfigError(f"unknown key [{key}].{k}")
                section[k] = v
            cfg[key] = section
        else:
            cfg[key] = raw.get(key, default)
    for key in raw:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown section or key {key!r}")
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


def dumps(cfg: dict) -> str:
    """Serialize a {scalars, one-level tables} dict to TOML text."""
    top = []
    tables = []
    for key, value in cfg.items():
        if isinstance(value, dict):
            body = "\n".join(f"{k} = {_fmt(v)}" for k, v in value.items())
            tables.append(f"[{key}]\n{body}")
        else:
            top.append(f"{key} = {_fmt(value)}")
    parts = []
    if top:
        parts.append("\n".join(top))
    parts.extend(tables)
    return "\n\n".join(parts) + "\n"


def dump(cfg: dict, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
