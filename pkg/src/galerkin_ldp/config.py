"""Experiment configuration: JSON documents merged over packaged defaults."""
from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .action import EventSpec, MinimizeOptions
from .drift import Drift, drift_from_config
from .dynamics import SimConfig
from .rare_event import SweepSettings
from .spectral import SpectralOperator, from_grid, grid_size, make_operator, operator_from_eigenvalues

TASKS = ("simulate", "minimize", "sweep", "approx_scan", "diagnostics")
PRESETS = ("fractional_linear", "fractional_power", "ou_1mode", "schilder")
# blocks replaced as a whole rather than merged key by key
_REPLACED = ("drift", "initial")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _load_packaged(name: str) -> dict:
    text = resources.files("galerkin_ldp").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def defaults() -> dict:
    return _load_packaged("defaults")


def preset(name: str) -> dict:
    """Full configuration for a named preset."""
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return merge(defaults(), _load_packaged(name))


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in _REPLACED:
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load(path) -> dict:
    """Read a config file (or a run manifest) and merge it over the defaults."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    if doc.get("kind") == "manifest":
        doc = doc["config"]
    return merge(defaults(), doc)


@dataclass
class Experiment:
    """Validated configuration with all runtime objects built."""

    raw: dict
    op: SpectralOperator
    drift: Drift
    x0: np.ndarray
    event: EventSpec
    optimizer: MinimizeOptions
    sweep: SweepSettings

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def sim_config(self, eps: float = 0.0) -> SimConfig:
        t = self.raw["time"]
        return SimConfig(self.op, self.drift, self.x0, float(t["T"]), int(t["n_steps"]), float(eps))


def _number(block: dict, key: str, where: str, positive=False, nonneg=False, integer=False):
    if key not in block:
        raise ConfigError(f"{where}.{key}", "missing")
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}.{key}", f"expected a finite number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{where}.{key}", f"expected an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}.{key}", f"must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(f"{where}.{key}", f"must be nonnegative, got {v!r}")
    return int(v) if integer else float(v)


def _operator(block: dict) -> SpectralOperator:
    sigma = _number(block, "sigma", "operator", positive=True)
    omega = _number(block, "omega", "operator", nonneg=True)
    delta = _number(block, "delta", "operator")
    eig = block.get("eigenvalues")
    try:
        if eig is not None:
            if "n_modes" in block and block["n_modes"] is not None and int(block["n_modes"]) != len(eig):
                raise ConfigError("operator.n_modes", f"{block['n_modes']} modes but {len(eig)} eigenvalues")
            with warnings.catch_warnings():
                warnings.simplefilter("always")
                return operator_from_eigenvalues(eig, delta, sigma, omega)
        n = _number(block, "n_modes", "operator", positive=True, integer=True)
        return make_operator(sigma, omega, n, delta)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("operator", str(exc)) from exc


def _initial(block: dict, op: SpectralOperator) -> np.ndarray:
    kind = block.get("kind")
    if kind == "zero":
        return np.zeros(op.n_modes)
    if kind == "single_mode":
        k = _number(block, "mode", "initial", nonneg=True, integer=True)
        if k >= op.n_modes:
            raise ConfigError("initial.mode", f"mode {k} outside [0, {op.n_modes})")
        x = np.zeros(op.n_modes)
        x[k] = _number(block, "amplitude", "initial")
        return x
    if kind in ("grid", "coefficients"):
        vals = np.asarray(block.get("values"), dtype=float)
        want = grid_size(op.n_modes) if kind == "grid" else op.n_modes
        if vals.shape != (want,) or not np.all(np.isfinite(vals)):
            raise ConfigError("initial.values", f"expected {want} finite numbers")
        return from_grid(op, vals) if kind == "grid" else vals
    raise ConfigError("initial.kind", f"expected zero, single_mode, grid or coefficients, got {kind!r}")


def validate(raw: dict) -> Experiment:
    """Check every field and build the runtime objects; raises :class:`ConfigError`."""
    known = set(defaults()) | {"_notes", "kind"}
    for key in raw:
        if key not in known and not key.startswith("_"):
            raise ConfigError(key, "unknown key")
    if raw.get("task") not in TASKS:
        raise ConfigError("task", f"expected one of {', '.join(TASKS)}, got {raw.get('task')!r}")
    _number(raw, "seed", "config", nonneg=True, integer=True)
    op = _operator(raw["operator"])
    t = raw["time"]
    _number(t, "T", "time", positive=True)
    _number(t, "n_steps", "time", positive=True, integer=True)
    try:
        drift = drift_from_config(raw["drift"], op)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("drift", str(exc)) from exc
    x0 = _initial(raw["initial"], op)
    try:
        event = EventSpec.from_config(raw["event"])
        event.check(op)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("event", str(exc)) from exc
    try:
        optimizer = MinimizeOptions.from_config(raw["optimizer"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("optimizer", str(exc)) from exc
    if optimizer.tol <= 0 or optimizer.max_iters < 1 or optimizer.n_starts < 1:
        raise ConfigError("optimizer", "tol must be positive, max_iters and n_starts at least 1")

    sw = raw["sweep"]
    eps_list = sw.get("eps_list")
    if not isinstance(eps_list, list) or not eps_list:
        raise ConfigError("sweep.eps_list", "expected a non-empty list")
    if any(not isinstance(e, (int, float)) or e <= 0 for e in eps_list):
        raise ConfigError("sweep.eps_list", "entries must be positive numbers")
    if any(e1 >= e0 for e0, e1 in zip(eps_list, eps_list[1:])):
        raise ConfigError("sweep.eps_list", "must be strictly decreasing")
    methods = sw.get("methods")
    methods = [methods] * len(eps_list) if isinstance(methods, str) else methods
    if (not isinstance(methods, list) or len(methods) != len(eps_list)
            or any(m not in ("plain", "tilted") for m in methods)):
        raise ConfigError("sweep.methods", "expected 'plain', 'tilted' or one of them per eps")
    settings = SweepSettings(
        _number(sw, "plain_scale", "sweep", positive=True),
        _number(sw, "plain_cap", "sweep", positive=True, integer=True),
        _number(sw, "tilted_n", "sweep", positive=True, integer=True),
        _number(sw, "rel_tol", "sweep", nonneg=True),
        _number(sw, "abs_tol", "sweep", nonneg=True),
    )
    sim = raw["simulate"]
    _number(sim, "eps", "simulate", nonneg=True)
    _number(sim, "n_samples", "simulate", positive=True, integer=True)
    scan = raw["approx_scan"]
    R_list = scan.get("R_list")
    if (not isinstance(R_list, list) or not R_list or any(r < 1 for r in R_list)
            or any(r1 <= r0 for r0, r1 in zip(R_list, R_list[1:]))):
        raise ConfigError("approx_scan.R_list", "expected an increasing list of values >= 1")
    _number(scan, "sample_budget", "approx_scan", positive=True, integer=True)
    n_mc = _number(scan, "n_mc", "approx_scan", positive=True, integer=True)
    if n_mc % 2:
        raise ConfigError("approx_scan.n_mc", "must be even")
    diag = raw["diagnostics"]
    _number(diag, "eps", "diagnostics", positive=True)
    _number(diag, "n_samples", "diagnostics", positive=True, integer=True)
    sk = raw["skeletons"]
    _number(sk, "n_starts", "skeletons", nonneg=True, integer=True)
    _number(sk, "action_tol", "skeletons", positive=True)
    return Experiment(raw, op, drift, x0, event, optimizer, settings)
