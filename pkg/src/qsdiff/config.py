"""Line-oriented ``key = value`` experiment configuration.

Keys are dotted (``grid.N = 2000``); a ``[grid]`` header line prefixes the
keys that follow it.  Model parameters may be written ``model.sigma`` or
``model.params.sigma``.  ``#`` starts a comment.  Any key can be overridden
from the environment as ``QSDIFF_<SECTION>__<KEY>`` (for example
``QSDIFF_GRID__N=4000``).
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .model import model_from_config

ENV_PREFIX = "QSDIFF_"


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _float(v: str) -> float:
    return float(v)


def _int(v: str) -> int:
    f = float(v)
    if f != int(f):
        raise ValueError(f"{v!r} is not an integer")
    return int(f)


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{v!r} is not a boolean")


def _floats(v: str) -> tuple:
    return tuple(float(p) for p in v.replace(";", ",").split(",") if p.strip())


def _str(v: str) -> str:
    return v


# key -> (parser, default, check, message); default None means required or model-derived
_SCHEMA: dict = {
    "model.name": (_str, None, lambda v: v in ("logistic_feller", "polynomial", "brownian"),
                   "model.name must be logistic_feller, polynomial or brownian"),
    "model.sigma": (_float, 1.0, lambda v: v > 0, "model.sigma must be > 0"),
    "model.r": (_float, 1.0, lambda v: v > 0, "model.r must be > 0"),
    "model.k": (_float, 1.0, lambda v: v > 0, "model.k must be > 0"),
    "model.terms": (_str, "", None, ""),
    "grid.eps": (_float, 1e-3, lambda v: v > 0, "grid.eps must be > 0"),
    "grid.R": (_float, None, lambda v: v > 0, "grid.R must be > 0"),
    "grid.N": (_int, 2000, lambda v: v >= 3, "grid.N must be >= 3"),
    "grid.spacing": (_str, "log", lambda v: v in ("log", "uniform"),
                     "grid.spacing must be log or uniform"),
    "sim.dt": (_float, 1e-3, lambda v: v > 0, "sim.dt must be > 0"),
    "sim.T": (_float, 5.0, lambda v: v > 0, "sim.T must be > 0"),
    "sim.paths": (_int, 100000, lambda v: v >= 1, "sim.paths must be >= 1"),
    "sim.seed": (_int, 20240601, lambda v: 0 <= v < 2 ** 64, "sim.seed must be a 64-bit integer"),
    "sim.record_times": (_floats, (1.0, 3.0, 5.0), lambda v: len(v) >= 1 and all(
        b > a for a, b in zip(v, v[1:])) and v[0] >= 0, "sim.record_times must increase"),
    "sim.initial": (_str, "alpha", None, ""),
    "sim.left_kill_level": (_float, 0.0, None, ""),
    "analysis.psi": (_str, "one", lambda v: v in ("one", "linear"),
                     "analysis.psi must be one or linear"),
    "analysis.c": (_float, 0.5, lambda v: 0 < v < 1, "analysis.c must lie in (0, 1)"),
    "analysis.bins": (_int, 40, lambda v: v >= 2, "analysis.bins must be >= 2"),
    "analysis.fit_window": (_floats, (), lambda v: len(v) in (0, 2) and (
        not v or v[0] < v[1]), "analysis.fit_window must be 'lo, hi'"),
    "analysis.initial": (_str, "node:1.0", None, ""),
    "analysis.t_max": (_float, 20.0, lambda v: v > 0, "analysis.t_max must be > 0"),
    "analysis.n_times": (_int, 201, lambda v: v >= 5, "analysis.n_times must be >= 5"),
    "analysis.thm22_initial": (_str, "alpha_upper", None, ""),
    "analysis.qe_x": (_float, 1.0, lambda v: v > 0, "analysis.qe_x must be > 0"),
    "analysis.qe_t_min": (_float, 1.0, lambda v: v > 0, "analysis.qe_t_min must be > 0"),
    "analysis.qe_t_max": (_float, 50.0, lambda v: v > 0, "analysis.qe_t_max must be > 0"),
    "analysis.qe_points": (_int, 15, lambda v: v >= 3, "analysis.qe_points must be >= 3"),
    "output.dir": (_str, "out", None, ""),
    "output.plot": (_bool, False, None, ""),
}

_INITIAL_KINDS = ("alpha", "beta", "alpha_upper", "uniform")


def _check_initial(v: str) -> bool:
    if v in _INITIAL_KINDS:
        return True
    kind, _, arg = v.partition(":")
    try:
        vals = _floats(arg)
    except ValueError:
        return False
    if kind in ("point", "node"):
        return len(vals) == 1 and vals[0] > 0
    if kind == "uniform":
        return len(vals) == 2 and 0 < vals[0] < vals[1]
    return False


for _k in ("sim.initial", "analysis.initial", "analysis.thm22_initial"):
    _p, _d, _, _ = _SCHEMA[_k]
    _SCHEMA[_k] = (_p, _d, _check_initial,
                   f"{_k} must be alpha, beta, alpha_upper, uniform, point:x, node:x or uniform:a,b")


@dataclass
class ExperimentConfig:
    """Validated configuration; ``values`` holds every schema key."""

    values: dict
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def model(self):
        name = self.values["model.name"]
        if name == "logistic_feller":
            params = {k: self.values[f"model.{k}"] for k in ("sigma", "r", "k")}
        elif name == "polynomial":
            params = {"terms": parse_terms(self.values["model.terms"])}
        else:
            params = {}
        return model_from_config(name, params)

    def dump(self) -> str:
        """Canonical text form (sorted keys), stable across runs."""
        lines = []
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()


def parse_terms(text: str) -> list:
    """``"-1:0.5, 1:-0.5, 3:0.125"`` -> ``[(-1, 0.5), (1, -0.5), (3, 0.125)]``."""
    out = []
    for chunk in text.split(","):
        if not chunk.strip():
            continue
        p, _, c = chunk.partition(":")
        out.append((float(p), float(c)))
    if not out:
        raise ValueError("model.terms must list power:coefficient pairs")
    return out


def _unquote(v: str) -> str:
    v = v.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    return v


def _set(raw: dict, lines: dict, key: str, value: str, line: Optional[int]):
    if key not in _SCHEMA:
        raise ConfigError(f"unknown key {key!r}", line)
    raw[key] = value
    lines[key] = line


def parse_config_text(text: str, env: Optional[dict] = None) -> ExperimentConfig:
    raw: dict = {}
    lines: dict = {}
    section = ""
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            continue
        if "=" not in s:
            raise ConfigError(f"expected key = value, got {s!r}", n)
        k, v = s.split("=", 1)
        k = k.strip()
        if section and not k.startswith(section + "."):
            k = f"{section}.{k}"
        if k.startswith("model.params."):
            k = "model." + k[len("model.params."):]
        _set(raw, lines, k, _unquote(v), n)
    env = os.environ if env is None else env
    for ek, ev in env.items():
        if ek.startswith(ENV_PREFIX) and "__" in ek:
            sec, _, key = ek[len(ENV_PREFIX):].partition("__")
            k = _match_key(f"{sec.lower()}.{key}")
            if k is None:
                raise ConfigError(f"environment override {ek} names no config key")
            _set(raw, lines, k, ev, None)
    return _validate(raw, lines)


def _match_key(k: str) -> Optional[str]:
    for key in _SCHEMA:
        if key.lower() == k.lower():
            return key
    return None


def _validate(raw: dict, lines: dict) -> ExperimentConfig:
    values: dict = {}
    for key, (parse, default, check, msg) in _SCHEMA.items():
        line = lines.get(key)
        if key in raw:
            try:
                v = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", line) from None
            if check is not None and not check(v):
                raise ConfigError(msg, line)
        elif default is None and key != "grid.R":
            raise ConfigError(f"missing required key {key!r}")
        else:
            v = default
        values[key] = v
    cfg = ExperimentConfig(values=values, sources=dict(lines))
    try:
        model = cfg.model()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}", lines.get("model.name")) from None
    if values["grid.R"] is None:
        values["grid.R"] = float(model.domain_hint[1])
    if not values["grid.eps"] < values["grid.R"]:
        raise ConfigError("grid.eps must be < grid.R", lines.get("grid.eps"))
    if not values["sim.dt"] < values["sim.T"]:
        raise ConfigError("sim.dt must be < sim.T", lines.get("sim.dt"))
    if values["sim.record_times"][-1] > values["sim.T"]:
        raise ConfigError("sim.record_times must lie in [0, sim.T]", lines.get("sim.record_times"))
    if not values["analysis.qe_t_min"] < values["analysis.qe_t_max"]:
        raise ConfigError("analysis.qe_t_min must be < analysis.qe_t_max",
                          lines.get("analysis.qe_t_min"))
    return cfg


def parse_config(path, env: Optional[dict] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), env=env)


DEFAULT_CONFIG = "model.name = logistic_feller\n"
