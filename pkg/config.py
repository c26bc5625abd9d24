"""
config.py - Configuration for the conservative scheme experiments
-----------------------------------------------------------------
Manages output directories, experiment defaults, the JSON schema of an
experiment file, dotted command-line overrides and strict parsing.
"""

import copy
import json
import logging
import os
from typing import Dict, List, Optional, Sequence

from jsonschema import Draft202012Validator

from errors import ConfigError, MultiplierMethodError
from problems_module import BUILDERS, instantiate, resolve_params

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

# ═══════════════════════════════════════════════════════════════
# DIRECTORY PATHS
# ═══════════════════════════════════════════════════════════════

BASE_DIR = os.path.abspath(os.path.dirname(__file__))
RESULTS_DIR = os.path.join(BASE_DIR, "results")
LOG_DIR = os.path.join(BASE_DIR, "logs")

MODES = ("run", "convergence", "consistency", "identity", "divergence")

# ═══════════════════════════════════════════════════════════════
# DEFAULTS
# ═══════════════════════════════════════════════════════════════

DEFAULT_CONFIG = {
    "mode": "run",
    "params": {},
    "t0": 0.0,
    "solver": {
        "residual_tol": 1e-12,
        "max_iters": 50,
        "jacobian_fd_eps": 1e-7,
        "predictor": "linear_extrapolation",
        "startup": "taylor2",
    },
    "outputs": {"dir": RESULTS_DIR, "tag": None, "xlsx": False},
    "convergence": {"reference": "exact", "metric": "solution"},
    "consistency": {"tau0": 0.1, "h0": 0.2, "levels": 4},
    "identity": {"steps": [0.2, 0.1, 0.05, 0.025], "seed": 0},
    "checks": {"spread_tol": 1e-9, "order_tol": 0.3, "identity_slope": 6.0, "slope_tol": 1.0},
}

# ═══════════════════════════════════════════════════════════════
# SCHEMA
# ═══════════════════════════════════════════════════════════════

_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "problem": {"type": "string"},
        "params": {"type": "object", "additionalProperties": {"type": "number"}},
        "mode": {"enum": list(MODES)},
        "t0": {"type": "number"},
        "T": {"type": "number", "minimum": 0},
        "N": {"type": "integer", "minimum": 1},
        "tau": _POSITIVE,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "extent": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 1, "maxItems": 2},
                "domain": {"type": "array", "minItems": 1, "maxItems": 2,
                           "items": {"type": "array", "items": {"type": "number"},
                                     "minItems": 2, "maxItems": 2}},
                "boundary": {"enum": ["periodic", "boundary"]},
            },
        },
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string"},
                "u0": {"type": "array"},
                "ut0": {"type": "array"},
                "u1": {"type": "array"},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "residual_tol": _POSITIVE,
                "max_iters": {"type": "integer", "minimum": 1},
                "jacobian_fd_eps": {"type": "number", "minimum": 1e-10, "maximum": 1e-4},
                "predictor": {"enum": ["copy", "linear_extrapolation"]},
                "startup": {"enum": ["exact_solution", "taylor2", "given"]},
                "polish": {"type": "boolean"},
                "max_halvings": {"type": "integer", "minimum": 0},
                "max_floor_ratio": {"type": "number", "minimum": 1},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "tag": {"type": ["string", "null"]},
                "xlsx": {"type": "boolean"},
            },
        },
        "convergence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "N": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3},
                "extent": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                "reference": {"enum": ["exact", "self"]},
                "metric": {"enum": ["solution", "density"]},
            },
        },
        "consistency": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau0": _POSITIVE,
                "h0": _POSITIVE,
                "levels": {"type": "integer", "minimum": 3},
            },
        },
        "identity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": dict(_NUMBER_LIST, minItems=3),
                "seed": {"type": "integer"},
            },
        },
        "checks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spread_tol": _POSITIVE,
                "order_tol": _POSITIVE,
                "identity_slope": _POSITIVE,
                "slope_tol": _POSITIVE,
            },
        },
    },
}


# ═══════════════════════════════════════════════════════════════
# JSON HELPERS
# ═══════════════════════════════════════════════════════════════

def load_json(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json(path: str, data: Dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def _merge(defaults: Dict, overrides: Dict) -> Dict:
    """Recursive merge; dict values merge, everything else replaces."""
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


# ═══════════════════════════════════════════════════════════════
# OVERRIDES
# ═══════════════════════════════════════════════════════════════

def apply_overrides(doc: Dict, overrides: Sequence[str]) -> Dict:
    """
    Set dotted keys, e.g. "solver.residual_tol=1e-13".

    Values are parsed as JSON literals when possible, else kept as strings.
    """
    doc = copy.deepcopy(doc)
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} needs the form key.path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-object value", path)
        node[keys[-1]] = value
    return doc


# ═══════════════════════════════════════════════════════════════
# PARSING
# ═══════════════════════════════════════════════════════════════

def validate_schema(doc: Dict):
    """Raise ConfigError listing every schema violation with its dotted path."""
    errors = sorted(Draft202012Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if not errors:
        return
    paths = [".".join(str(part) for part in error.path) for error in errors]
    lines = [f"{path or '<root>'}: {error.message}" for path, error in zip(paths, errors)]
    failure = ConfigError("; ".join(lines))
    failure.path = paths[0]
    raise failure


def _check_grid(resolved: Dict, problem):
    grid = resolved.get("grid")
    if problem.n == 0:
        if grid:
            raise ConfigError(f"{problem.name} is an ODE and takes no spatial grid", "grid")
        resolved.pop("grid", None)
        return
    if not grid or "extent" not in grid or "domain" not in grid:
        raise ConfigError(f"{problem.name} needs grid.extent and grid.domain", "grid")
    if len(grid["extent"]) != problem.n or len(grid["domain"]) != problem.n:
        raise ConfigError(f"{problem.name} has {problem.n} spatial axis/axes", "grid.extent")
    grid.setdefault("boundary", "periodic")
    for axis, (lo, hi) in enumerate(problem.stencil.reach):
        if grid["extent"][axis] < hi - lo + 1:
            raise ConfigError(f"axis {axis} extent below stencil width {hi - lo + 1}", "grid.extent")
    for lo, hi in grid["domain"]:
        if not hi > lo:
            raise ConfigError("domain bounds must satisfy lo < hi", "grid.domain")


def _check_initial(resolved: Dict, problem):
    initial = resolved.get("initial") or {}
    if "preset" in initial and "u0" in initial:
        raise ConfigError("give either preset or inline u0, not both", "initial")
    if "preset" in initial and initial["preset"] not in problem.initial_presets:
        raise ConfigError(f"unknown preset {initial['preset']!r}; available: "
                          f"{', '.join(sorted(problem.initial_presets))}", "initial.preset")
    if "preset" not in initial and "u0" not in initial:
        raise ConfigError("initial data needs a preset or u0", "initial")
    if resolved["solver"]["startup"] == "given" and problem.second_order_in_time and "u1" not in initial:
        raise ConfigError("startup 'given' needs initial.u1", "initial.u1")


def _check_convergence(resolved: Dict, problem):
    block = resolved["convergence"]
    if resolved["mode"] != "convergence":
        return
    if "N" not in block:
        raise ConfigError("convergence mode needs a list of step counts", "convergence.N")
    if problem.n:
        extents = block.get("extent")
        if not extents or len(extents) != len(block["N"]):
            raise ConfigError("PDE convergence needs one extent per step count", "convergence.extent")
    if block["reference"] == "exact" and block["metric"] == "solution" and problem.exact_solution is None:
        raise ConfigError(f"{problem.name} has no exact solution; use reference 'self'",
                          "convergence.reference")


def resolve_config(doc: Dict) -> Dict:
    """
    Merge defaults and validate the cross-field rules.

    Problem defaults (T, N or tau, grid, initial) fill what the document
    leaves out; exactly one of N / tau must result.
    """
    validate_schema(doc)
    resolved = _merge(DEFAULT_CONFIG, doc)

    name = resolved.get("problem")
    if name is None:
        if resolved["mode"] != "identity":
            raise ConfigError("missing problem name", "problem")
        return resolved
    if name not in BUILDERS:
        raise ConfigError(f"unknown problem {name!r}; available: {', '.join(BUILDERS)}", "problem")
    try:
        resolved["params"] = resolve_params(name, resolved["params"])
    except MultiplierMethodError as e:
        raise ConfigError(str(e), "params") from e
    problem = instantiate(name, resolved["params"])

    if "N" in doc and "tau" in doc:
        raise ConfigError("give exactly one of N and tau", "N")
    defaults = problem.defaults
    if "T" not in resolved:
        resolved["T"] = defaults["T"]
    if "N" not in doc and "tau" not in doc:
        for key in ("N", "tau"):
            if key in defaults:
                resolved[key] = defaults[key]
    if resolved.get("N") is not None and not resolved["T"] > 0:
        raise ConfigError(f"T must be positive with a step count (tau = T / N), got {resolved['T']}", "T")
    if "grid" in defaults:
        resolved["grid"] = _merge(defaults["grid"], doc.get("grid", {}))
    if "initial" not in doc:
        resolved["initial"] = copy.deepcopy(defaults["initial"])

    _check_grid(resolved, problem)
    _check_initial(resolved, problem)
    _check_convergence(resolved, problem)
    return resolved


def parse_config(text: str, overrides: Optional[Sequence[str]] = None) -> Dict:
    """
    Parse and validate an experiment document.

    Args:
        text: JSON object text
        overrides: dotted "key.path=value" strings applied before validation

    Returns:
        dict: fully resolved configuration

    Raises:
        ConfigError: malformed JSON, unknown keys, type mismatches or
            cross-field violations (with the dotted key path)
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if overrides:
        doc = apply_overrides(doc, overrides)
    resolved = resolve_config(doc)
    logger.debug("resolved configuration: %s", resolved)
    return resolved


def load_config(path: str, overrides: Optional[Sequence[str]] = None) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e
    return parse_config(text, overrides)


# ═══════════════════════════════════════════════════════════════
# TESTING
# ═══════════════════════════════════════════════════════════════

if __name__ == "__main__":
    print("Testing config.py...")
    cfg = parse_config('{"problem": "dho", "params": {"m": 1, "k": 5, "gamma": 0.5}, '
                       '"N": 200, "T": 10, "mode": "run"}')
    print(f"solver block: {cfg['solver']}")
    try:
        parse_config('{"problem": "dho", "sigma_xx": 1}')
    except ConfigError as e:
        print(f"rejected as expected: {e}")
