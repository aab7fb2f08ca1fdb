"""Scenario files for the experiment runner.

See docs/scenarios.md for the grammar. Values are typed by the schema below;
unknown sections or keys are rejected with the offending line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lq_mfc import LqModel
from .textconfig import ConfigError, read_sections

MODES = ("lq-unconstrained", "lq-constrained", "mfg", "bridge", "fj-suite", "mvsde-check")


class ScenarioError(ConfigError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("yes", "true", "on", "1"):
        return True
    if low in ("no", "false", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be nonnegative")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise ValueError("must be positive")
    return v


def _mode(text: str) -> str:
    if text not in MODES:
        raise ValueError(f"unknown mode {text!r}; expected one of {', '.join(MODES)}")
    return text


_MODEL_KEYS = ("b1", "b2", "b3", "b4", "s1", "s2", "s3", "s4", "q", "v", "ell", "T", "m0", "v0")

SCHEMA: dict[str, dict[str, object]] = {
    "run": {
        "mode": _mode,
        "N": _pos_int,
        "M": _pos_int,
        "seed": _nonneg_int,
        "max_iter": _pos_int,
        "damping": float,
        "tol": float,
        "degree": _nonneg_int,
        "outer_iter": _pos_int,
        "outer_tol": float,
        "dt_list": _floats,
        "directions": _pos_int,
        "eps": float,
    },
    "model": {k: float for k in _MODEL_KEYS},
    "constraint": {"h": _floats},
    "output": {"paths": _bool, "adjoint": _bool, "particles": _nonneg_int},
}

DEFAULTS = {
    "run": {"max_iter": 100, "damping": 0.5, "tol": 1e-4, "degree": 1, "outer_iter": 20, "outer_tol": 1e-3,
            "directions": 5, "eps": 1e-4},
    "output": {"paths": True, "adjoint": True, "particles": 100},
}

REQUIRED = {
    "lq-unconstrained": ("run.N", "run.M", "run.seed"),
    "lq-constrained": ("run.N", "run.M", "run.seed", "constraint.h"),
    "mfg": ("run.N", "run.M", "run.seed"),
    "bridge": ("run.dt_list",),
    "fj-suite": (),
    "mvsde-check": ("run.N", "run.M", "run.seed"),
}


@dataclass
class Scenario:
    mode: str
    values: dict[str, dict[str, object]]
    lines: dict[str, int | None] = field(default_factory=dict)

    def get(self, dotted: str, default=None):
        section, key = dotted.split(".", 1)
        return self.values.get(section, {}).get(key, default)

    def model(self) -> LqModel:
        params = dict(self.values.get("model", {}))
        h = self.get("constraint.h")
        if h is not None:
            params["h"] = h[0] if len(h) == 1 else np.array(h)
        return LqModel.benchmark(**params)

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _store(values, lines, section, key, raw, line):
    if section not in SCHEMA:
        raise ScenarioError(f"unknown section [{section}]", line, key)
    conv = SCHEMA[section].get(key)
    if conv is None:
        raise ScenarioError(f"unknown key in [{section}]", line, key)
    try:
        values.setdefault(section, {})[key] = conv(raw)
    except ValueError as exc:
        raise ScenarioError(f"bad value {raw!r}: {exc}", line, key) from None
    lines[f"{section}.{key}"] = line


def parse_scenario(text: str, overrides: list[str] | tuple[str, ...] = ()) -> Scenario:
    """Parse scenario text and apply ``section.key=value`` overrides in order."""
    values: dict[str, dict[str, object]] = {}
    lines: dict[str, int | None] = {}
    for name, line, entries in read_sections(text, ScenarioError):
        if name not in SCHEMA:
            raise ScenarioError(f"unknown section [{name}]", line)
        if name in values:
            raise ScenarioError(f"duplicate section [{name}]", line)
        values[name] = {}
        for key, (raw, kline) in entries.items():
            _store(values, lines, name, key, raw, kline)
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        if not sep or "." not in dotted:
            raise ScenarioError(f"override {item!r} is not section.key=value", key=item)
        section, key = dotted.strip().split(".", 1)
        _store(values, lines, section, key.strip(), raw.strip(), None)
        lines[f"{section}.{key.strip()}"] = None

    mode = values.get("run", {}).get("mode")
    if mode is None:
        raise ScenarioError("missing required key", lines.get("run.mode"), "run.mode")
    for dotted in REQUIRED[mode]:
        section, key = dotted.split(".")
        if key not in values.get(section, {}):
            raise ScenarioError(f"mode {mode} needs this key", None, dotted)
    for section, defaults in DEFAULTS.items():
        for key, val in defaults.items():
            values.setdefault(section, {}).setdefault(key, val)
    return Scenario(mode, values, lines)


def load_scenario(path, overrides=()) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"), overrides)
