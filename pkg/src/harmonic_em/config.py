"""INI configuration with a strict schema: unknown sections or keys are errors."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any, Callable


class ConfigError(ValueError):
    """Schema violation; the message names the offending section/key."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.replace(",", " ").split())


def _str(s: str) -> str:
    return s.strip()


SCHEMA: dict[str, dict[str, Callable[[str], Any]]] = {
    "units": {"temperature": float, "k_B": float},
    "schedule": {"n_steps": int, "upsilon_max": float, "record_every": int},
    "potential": {
        "kind": _str, "kappa": float, "center": _floats, "dim": int, "a": float, "b": float,
        "heights": _floats, "eps_bar": float, "perturb_mode": _str, "perturb_seed": int,
    },
    "sampler": {
        "kind": _str, "dt": float, "stiffness": float, "gamma": float, "alpha_v": float,
        "replicas": int, "seed": int, "substep": _str, "heun_stiffness": _str, "init_scale": float,
        "horizontal_kappa": float, "horizontal_center": _floats,
    },
    "glue": {
        "kind": _str, "k": float, "dt": float, "k_a": float, "r_min": float, "S": int, "rho": float,
        "eps": float, "align": _bool, "distance_mode": _str,
    },
    "exactness": {"mh_enabled": _bool, "mh_target": _str, "arex_enabled": _bool, "B": int, "lambda_schedule": _str},
    "lattice": {"N": int, "B": int, "passes": int, "workers": int},
    "output": {"dir": _str, "prefix": _str, "velocities": _bool},
    "diagnostics": {"paths": int, "seed": int, "schemes": _str, "grids": _str, "chains": int, "steps": int},
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "units": {"temperature": 1.0, "k_B": 1.0},
    "schedule": {"n_steps": 100, "upsilon_max": 1.0, "record_every": 1},
    "potential": {"kind": "quadratic", "kappa": 1.0, "center": (0.0,), "dim": 1, "a": 1.0, "b": 1.0,
                  "heights": (0.7, 0.1, 1.5), "eps_bar": 0.0, "perturb_mode": "constant-shift", "perturb_seed": 0},
    "sampler": {"kind": "em", "gamma": 1.0, "alpha_v": 0.5, "replicas": 1, "seed": 0, "substep": "em",
                "heun_stiffness": "0", "init_scale": 1.0, "horizontal_kappa": 0.0, "horizontal_center": (0.0,)},
    "glue": {"kind": "adjacent", "k_a": 1.0, "r_min": 1.0, "S": 1, "rho": 0.6, "eps": 1e-9, "align": True,
             "distance_mode": "per-frame"},
    "exactness": {"mh_enabled": False, "mh_target": "bare", "arex_enabled": False, "B": 1,
                  "lambda_schedule": "linear"},
    "lattice": {"N": 8, "B": 8, "passes": 10, "workers": 1},
    "output": {"dir": "out", "prefix": "run", "velocities": False},
    "diagnostics": {"paths": 400_000, "seed": 0, "schemes": "em,heun,strang", "grids": "16,32,64,128",
                    "chains": 4000, "steps": 2000},
}


@dataclass
class Config:
    values: dict[str, dict[str, Any]]
    present: set[str] = field(default_factory=set)
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(self.values.get(name, {}))
        return merged

    def has(self, name: str) -> bool:
        return name in self.present


def parse_config_text(text: str, source: str = "<config>") -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    return config_from_mapping({s: dict(cp[s]) for s in cp.sections()}, source)


def config_from_mapping(raw: dict[str, dict[str, str]], source: str = "<config>") -> Config:
    values: dict[str, dict[str, Any]] = {}
    for sec, items in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        values[sec] = {}
        for key, text in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{sec}]")
            try:
                values[sec][key] = SCHEMA[sec][key](str(text))
            except ValueError as err:
                raise ConfigError(f"{source}: bad value for '{key}' in [{sec}]: {err}") from None
    smp = values.get("sampler", {})
    if "dt" in smp and "stiffness" in smp:
        raise ConfigError(f"{source}: give exactly one of 'dt' and 'stiffness' in [sampler]")
    return Config(values, set(raw), {s: {k: str(v) for k, v in d.items()} for s, d in raw.items()})


def load_config(path: str) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))
