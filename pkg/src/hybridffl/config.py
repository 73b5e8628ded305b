"""Experiment configuration: JSON schema, defaults and validation.

Structure (types, required shapes, unknown keys) is checked with a JSON
schema; numeric invariants are checked by :func:`validate_model` and the
grid/input constructors so every violation is reported in one error.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from .errors import ConfigError
from .learning import LearnOptions
from .model import GENE_NAMES, FflModel, GeneKinetics, SwitchingParams, validate_model
from .simulate import PromoterInput, TimeGrid

_KIN = {"b": 0.8, "lambda": 2.0, "A": 1.85, "sigma": 0.05}
_ON_LEVEL = (_KIN["b"] + _KIN["A"]) / _KIN["lambda"]

DEFAULTS = {
    "model": {
        "kinetics": {g: dict(_KIN) for g in GENE_NAMES},
        "switching": {
            "M": {"kp": 0.5, "ke": 3.0, "km": 0.5},
            "S": {"kp": 0.1, "ke": 3.0, "km": 2.0},
            "T": {"kp": 0.1, "ke": 3.0, "km": 2.0},
        },
        "initial": {g: {"x0": _ON_LEVEL} for g in GENE_NAMES},
        "sigma_obs": 0.01,
    },
    "grid": {"t0": 0.0, "t_end": 10.0, "dt": 0.01},
    "master_input": {
        "mode": "pinned",
        "initial": 1,
        "switches": [[3.0, 0], [5.0, 1], [5.3, 0], [8.0, 1]],
    },
    "observations": {"count": 50},
    "seeds": {"simulate": 29, "observe": 1029, "inference": 0},
    "inference": {"enabled": True, "max_sweeps": 200, "tol": 1e-8},
    "learning": {
        "enabled": False,
        "max_em_iters": 60,
        "param_tol": 1e-4,
        "fix_sigma": True,
        "share_sigma": False,
        "constraint_mode": "project",
        "fixed": [],
        "activation": True,
        "anneal": [4.0, 2.0],
    },
}

_num = {"type": "number"}
_int = {"type": "integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


def _per_gene(schema):
    return _obj({g: schema for g in GENE_NAMES})


_KIN_SCHEMA = _obj({"b": _num, "lambda": _num, "A": _num, "sigma": _num})

SCHEMA = _obj(
    {
        "model": _obj(
            {
                "kinetics": _per_gene(_KIN_SCHEMA),
                "switching": _per_gene(_obj({"kp": _num, "ke": _num, "km": _num})),
                "initial": _per_gene(_obj({"x0": _num, "x0_var": _num, "p_on0": _num})),
                "sigma_obs": _num,
            }
        ),
        "grid": _obj({"t0": _num, "t_end": _num, "dt": _num}),
        "master_input": _obj(
            {
                "mode": {"enum": ["pinned", "stochastic"]},
                "initial": {"enum": [0, 1]},
                "switches": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "prefixItems": [_num, {"enum": [0, 1]}],
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
            }
        ),
        "observations": _obj(
            {
                "count": {"type": "integer", "minimum": 0},
                "times": {
                    "oneOf": [
                        {"type": "array", "items": _num},
                        _per_gene({"type": "array", "items": _num}),
                    ]
                },
            }
        ),
        "seeds": _obj({"simulate": _int, "observe": _int, "inference": _int}),
        "inference": _obj({"enabled": {"type": "boolean"}, "max_sweeps": _int, "tol": _num}),
        "learning": _obj(
            {
                "enabled": {"type": "boolean"},
                "max_em_iters": _int,
                "param_tol": _num,
                "fix_sigma": {"type": "boolean"},
                "share_sigma": {"type": "boolean"},
                "constraint_mode": {"enum": ["project", "barrier"]},
                "fixed": {"type": "array", "items": {"enum": ["b", "lambda", "A"]}, "uniqueItems": True},
                "activation": {"type": "boolean"},
                "anneal": {"type": "array", "items": _num},
                "init": _per_gene(_KIN_SCHEMA),
            }
        ),
    }
)


@dataclass(frozen=True)
class InferenceSettings:
    enabled: bool
    max_sweeps: int
    tol: float


@dataclass(frozen=True)
class LearningSettings:
    enabled: bool
    options: LearnOptions
    init: dict | None


@dataclass(frozen=True)
class ExperimentConfig:
    model: FflModel
    grid: TimeGrid
    master_input: PromoterInput
    obs_times: dict
    seeds: dict
    inference: InferenceSettings
    learning: LearningSettings
    normalized: dict
    defaults_applied: tuple

    def with_seeds(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed replaced by ``seed``."""
        seeds = {k: int(seed) for k in self.seeds}
        norm = copy.deepcopy(self.normalized)
        norm["seeds"] = dict(seeds)
        return ExperimentConfig(
            self.model, self.grid, self.master_input, self.obs_times, seeds,
            self.inference, self.learning, norm, self.defaults_applied,
        )


def _fill(user, defaults, path, applied):
    out = {}
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        if key not in user:
            out[key] = copy.deepcopy(default)
            applied.append(where)
        elif isinstance(default, dict) and isinstance(user[key], dict):
            out[key] = _fill(user[key], default, where, applied)
        else:
            out[key] = copy.deepcopy(user[key])
    for key in user:
        if key not in defaults:
            out[key] = copy.deepcopy(user[key])
    return out


def _kinetics(block):
    return GeneKinetics(float(block["b"]), float(block["lambda"]), float(block["A"]), float(block["sigma"]))


def _schema_errors(raw):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    return errors


def normalize_config(raw: dict):
    """Fill defaults; returns ``(normalized, defaults_applied)``."""
    applied = []
    norm = _fill(raw, DEFAULTS, "", applied)
    if "count" in raw.get("observations", {}) or "times" in raw.get("observations", {}):
        norm["observations"] = copy.deepcopy(raw["observations"])
        applied = [a for a in applied if not a.startswith("observations")]
    user_input = raw.get("master_input", {})
    if user_input.get("mode") == "stochastic":
        norm["master_input"] = copy.deepcopy(user_input)
        applied = [a for a in applied if not a.startswith("master_input")]
    return norm, tuple(applied)


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed JSON document and build the config object."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a JSON object")
    errors = _schema_errors(raw)
    if errors:
        raise ConfigError(errors)
    norm, applied = normalize_config(raw)
    errors = []
    m = norm["model"]
    initial = {g: {k: float(v) for k, v in m["initial"].get(g, {}).items()} for g in GENE_NAMES}
    model = FflModel.canonical(
        {g: _kinetics(m["kinetics"][g]) for g in GENE_NAMES},
        {g: SwitchingParams(**{k: float(v) for k, v in m["switching"][g].items()}) for g in GENE_NAMES},
        float(m["sigma_obs"]),
        initial,
    )
    errors += validate_model(model)

    grid = None
    try:
        grid = TimeGrid(float(norm["grid"]["t0"]), float(norm["grid"]["t_end"]), float(norm["grid"]["dt"]))
    except ValueError as exc:
        errors.append(f"grid: {exc}")

    master = None
    mi = norm["master_input"]
    try:
        if mi["mode"] == "pinned":
            master = PromoterInput.pinned(mi["initial"], [tuple(s) for s in mi["switches"]])
            if grid is not None:
                master.check_grid(grid)
        else:
            if mi.get("switches"):
                raise ValueError("switches given for a stochastic input")
            master = PromoterInput("stochastic")
    except ValueError as exc:
        errors.append(f"master_input: {exc}")

    obs_times = {}
    ob = norm["observations"]
    if ("count" in ob) == ("times" in ob):
        errors.append("observations: give exactly one of 'count' or 'times'")
    elif grid is not None:
        if "count" in ob:
            times = np.linspace(grid.t0, grid.t_end, ob["count"])
            obs_times = {g: times for g in GENE_NAMES}
        elif isinstance(ob["times"], dict):
            obs_times = {g: np.asarray(ob["times"].get(g, []), dtype=float) for g in GENE_NAMES}
        else:
            obs_times = {g: np.asarray(ob["times"], dtype=float) for g in GENE_NAMES}
        for g, t in obs_times.items():
            if t.size and not grid.contains(t):
                errors.append(f"observations: times for gene {g} outside the grid span")

    inf = norm["inference"]
    if inf["max_sweeps"] < 1:
        errors.append("inference.max_sweeps must be >= 1")
    if not (math.isfinite(inf["tol"]) and inf["tol"] > 0):
        errors.append("inference.tol must be > 0")
    inference = InferenceSettings(bool(inf["enabled"]), int(inf["max_sweeps"]), float(inf["tol"]))

    ln = norm["learning"]
    learning = None
    fixed = frozenset("lam" if f == "lambda" else f for f in ln["fixed"])
    try:
        opts = LearnOptions(
            max_em_iters=int(ln["max_em_iters"]),
            param_tol=float(ln["param_tol"]),
            fix_sigma=bool(ln["fix_sigma"]),
            share_sigma=bool(ln["share_sigma"]),
            constraint_mode=ln["constraint_mode"],
            fixed=fixed,
            activation=bool(ln["activation"]),
            anneal=tuple(float(c) for c in ln["anneal"]),
            sweeps_per_iter=inference.max_sweeps,
            sweep_tol=inference.tol,
        )
    except ValueError as exc:
        errors.append(f"learning: {exc}")
        opts = None
    init = None
    if "init" in ln:
        init = {}
        for g in GENE_NAMES:
            if g not in ln["init"]:
                errors.append(f"learning.init: missing gene {g}")
                continue
            missing = [k for k in ("b", "lambda", "A", "sigma") if k not in ln["init"][g]]
            if missing:
                errors.append(f"learning.init.{g}: missing fields {missing}")
                continue
            init[g] = _kinetics(ln["init"][g])
        if not errors:
            errors += [f"learning.init: {e}" for e in validate_model(model.with_kinetics(init))]
    if ln["enabled"] and not inference.enabled:
        errors.append("learning requires inference.enabled = true")
    if ln["enabled"] and "init" not in ln:
        errors.append("learning.init is required when learning is enabled")
    if opts is not None:
        learning = LearningSettings(bool(ln["enabled"]), opts, init)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(model, grid, master, obs_times, dict(norm["seeds"]), inference, learning, norm, applied)


def load_config(path) -> ExperimentConfig:
    """Parse, default-fill and validate a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return build_config(raw)


def shipped_config_path(name="fig3.json"):
    return resources.files("hybridffl") / "configs" / name
