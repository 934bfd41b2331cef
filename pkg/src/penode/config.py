"""Run configuration: YAML files checked against a JSON schema, merged over
defaults, and stamped into every run directory."""
from __future__ import annotations

import copy
import hashlib
import json
import subprocess
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "plant": {
        "template": "boost",
        "params": {},
        "r_series": 0.0,
        "kappa": 0.0,
        "noise": 0.0,
        "period": 1e-5,
        "samples_per_period": 100,
        "window_periods": 2,
        "perturbation": 0.3,
    },
    "conditions": {"inputs": [[20.0, 24.0]], "duty": [[0.3, 0.5]], "n_conditions": 40,
                   "n_windows": 100},
    "model": {},
    "preprocess": {"denoise": "median", "window": 3, "ratios": [0.7, 0.2, 0.1], "split_seed": 0,
                   "fraction": 1.0},
    "train": {},
    "eval": {"plots": True, "max_trajectories": 4},
    "bench": {"periods": 1000, "rk4_steps": [10, 20, 50], "dopri5_rtol": [1e-6, 1e-8, 1e-10],
              "repeats": 1},
    "deploy": {"sparsity": 0.0, "calib_windows": 20, "conformance_periods": 10, "budget": 0.02},
}


def schema() -> dict:
    text = resources.files("penode").joinpath("config_schema.json").read_text()
    return json.loads(text)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_ranges(cond: dict, where: str, n_inputs: int | None = None):
    for key in ("inputs", "duty", "phase"):
        for lo, hi in cond.get(key, []):
            if lo > hi:
                raise ConfigError(f"{where}.{key}: range [{lo}, {hi}] is empty")
    for lo, hi in cond.get("duty", []):
        if lo < 0 or hi > 1:
            raise ConfigError(f"{where}.duty: range [{lo}, {hi}] outside [0, 1]")
    for lo, hi in cond.get("inputs", []):
        if lo < 0:
            raise ConfigError(f"{where}.inputs: source voltages must be non-negative")
    if n_inputs is not None and len(cond.get("inputs", [])) != n_inputs:
        raise ConfigError(f"{where}.inputs: expected {n_inputs} ranges")


_N_INPUTS = {"boost": 1, "buck": 1, "dab_reduced": 2}


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {path}: {exc.message}") from None
    n_in = _N_INPUTS.get(cfg.get("plant", {}).get("template"))
    for sec in ("conditions", "ood"):
        if sec in cfg:
            _check_ranges(cfg[sec], sec, n_in)
    r = cfg.get("preprocess", {}).get("ratios")
    if r is not None and abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError("preprocess.ratios must sum to 1")
    return cfg


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then ``overrides``; validated."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        # validate the user tree first so unknown keys are reported as written
        validate(user)
    cfg = merge(DEFAULTS, user)
    cfg = merge(cfg, overrides or {})
    return validate(cfg)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_stamp(run_dir, cfg: dict, command: str, extra: dict | None = None) -> Path:
    """Resolved config snapshot plus provenance for a run directory."""
    from . import __version__
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(json.loads(canonical(cfg)), fh, sort_keys=True)
    stamp = {
        "command": command,
        "seed": int(cfg.get("seed", 0)),
        "config_hash": config_hash(cfg),
        "git_describe": git_describe(Path(__file__).parent),
        "penode_version": __version__,
        "numpy_version": np.__version__,
    }
    stamp.update(extra or {})
    with open(run_dir / "run.yaml", "w") as fh:
        yaml.safe_dump(stamp, fh, sort_keys=True)
    return run_dir
