"""Synthetic plant data, CSV ingestion and preprocessing.

The "real plant" is a builtin template with fixed, seeded departures from
the nominal physics: a series resistance and a cubic term on the inductor
current, ``di/dt -= (r_s i + kappa i^3) / L``, plus Gaussian measurement
noise. Every window starts at a carrier cycle boundary from a random
perturbation of the averaged equilibrium.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import median_filter

from .automaton import PwmSpec, build_schedule, gate_word
from .dynamics import StateSpaceTemplate, make_template
from .errors import DataError, RatioInvalid, WindowTooLarge
from .solvers import SolverConfig, Trajectory, integrate_schedule

# parameter carrying the inductance of the row that receives the parasitics
_INDUCTANCE = {"boost": "L", "buck": "L", "dab_reduced": "L_lk"}


@dataclass
class OperatingPoint:
    """Constant inputs and per-channel duty/phase (fractions of a period)."""

    inputs: tuple
    duties: tuple
    phases: tuple = ()

    def __post_init__(self):
        self.inputs = tuple(float(v) for v in np.atleast_1d(self.inputs))
        self.duties = tuple(float(v) for v in np.atleast_1d(self.duties))
        self.phases = tuple(float(v) for v in np.atleast_1d(self.phases)) if len(self.phases) else \
            (0.0,) * len(self.duties)
        if len(self.phases) != len(self.duties):
            raise DataError("need one phase per duty")

    def pwm(self, period: float) -> list[PwmSpec]:
        return [PwmSpec.from_duty(d, period, 1.0, (p % 1.0) * period)
                for d, p in zip(self.duties, self.phases)]

    def to_dict(self):
        return {"inputs": list(self.inputs), "duties": list(self.duties), "phases": list(self.phases)}


@dataclass
class PlantSpec:
    template: str = "boost"
    params: dict = field(default_factory=dict)
    r_series: float = 0.0
    kappa: float = 0.0
    noise: float | tuple = 0.0
    seed: int = 0
    period: float = 1e-5
    samples_per_period: int = 100
    window_periods: int = 2
    perturbation: float = 0.3
    inductor_row: int = 0

    def __post_init__(self):
        sig = np.atleast_1d(np.asarray(self.noise, float))
        if np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise DataError("noise levels must be finite and >= 0")
        if not (math.isfinite(self.r_series) and math.isfinite(self.kappa)):
            raise DataError("parasitic magnitudes must be finite")
        if self.samples_per_period < 1 or self.window_periods < 1:
            raise DataError("sampling settings must be positive")

    def build_template(self) -> StateSpaceTemplate:
        return make_template(self.template)

    def values(self) -> np.ndarray:
        tpl = self.build_template()
        v = tpl.defaults.values.copy()
        for k, val in self.params.items():
            if k not in tpl.defaults.names:
                raise DataError(f"template {self.template!r} has no parameter {k!r}")
            v[tpl.defaults.names.index(k)] = val
        return v

    def noise_vector(self, d: int) -> np.ndarray:
        sig = np.atleast_1d(np.asarray(self.noise, float))
        return np.broadcast_to(sig, (d,)).copy()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = list(np.atleast_1d(np.asarray(self.noise, float)).tolist()) \
            if np.ndim(self.noise) else float(self.noise)
        d["params"] = {k: float(v) for k, v in self.params.items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    windows: list
    metadata: dict = field(default_factory=dict)
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.tags:
            self.tags = [""] * len(self.windows)
        if len(self.tags) != len(self.windows):
            raise DataError("one split tag per window required")

    def __len__(self):
        return len(self.windows)

    def select(self, idx, tag=None) -> Dataset:
        idx = list(idx)
        tags = [tag if tag is not None else self.tags[i] for i in idx]
        return Dataset([self.windows[i] for i in idx], dict(self.metadata), tags)


def _plant_field(tpl: StateSpaceTemplate, values, plant: PlantSpec):
    mats = [tpl.matrices(values, z) for z in range(tpl.n_modes)]
    ind = _INDUCTANCE.get(plant.template)
    L = values[tpl.defaults.names.index(ind)] if ind else None
    row = plant.inductor_row
    r_s, kappa = plant.r_series, plant.kappa
    parasitic = L is not None and (r_s or kappa)

    def f(t, x, u, z):
        A, B = mats[z]
        dx = A @ x + B @ u
        if parasitic:
            i = x[row]
            dx[row] -= (r_s * i + kappa * i ** 3) / L
        return dx

    return f


def averaged_equilibrium(tpl: StateSpaceTemplate, values, specs, u) -> np.ndarray:
    """Equilibrium of the duty-weighted average of the mode dynamics."""
    period = specs[0].period
    sched = build_schedule(0.0, period, tpl.transition_map(0, gate_word(0.0, specs)), specs,
                           tpl.transition_map)
    d, m = tpl.n_states, tpl.n_inputs
    A = np.zeros((d, d))
    B = np.zeros((d, m))
    for a, b, z in sched.intervals():
        Az, Bz = tpl.matrices(values, z)
        A += (b - a) / period * Az
        B += (b - a) / period * Bz
    try:
        return np.linalg.solve(A, -B @ np.asarray(u, float))
    except np.linalg.LinAlgError:
        return np.zeros(d)


def replay_modes(gates, transition_map, z0: int = 0) -> np.ndarray:
    """Mode active after each sample, from the logged (right-limit) gate words."""
    z = int(z0)
    out = np.empty(len(gates), int)
    for k, g in enumerate(gates):
        z = transition_map(z, tuple(int(b) for b in g))
        out[k] = z
    return out


def snap_duty(duty: float, samples_per_period: int) -> float:
    """Nearest duty (or phase fraction) whose switching instant falls on the
    sampling grid."""
    return round(duty * samples_per_period) / samples_per_period


def simulate_window(plant: PlantSpec, op: OperatingPoint, x0, t0: float = 0.0,
                    noise_rng=None, rtol: float = 1e-10) -> Trajectory:
    """One observed window of the plant (dopri5 ground truth)."""
    tpl = plant.build_template()
    values = plant.values()
    specs = op.pwm(plant.period)
    n = plant.samples_per_period * plant.window_periods
    t_end = t0 + plant.window_periods * plant.period
    times = t0 + plant.period / plant.samples_per_period * np.arange(n + 1)
    times[-1] = t_end
    z0 = tpl.transition_map(0, gate_word(t0, specs))
    sched = build_schedule(t0, t_end, z0, specs, tpl.transition_map)
    f = _plant_field(tpl, values, plant)
    u = np.asarray(op.inputs, float)
    cfg = SolverConfig("dopri5", rtol=rtol, atol=1e-12 * max(1.0, float(np.max(np.abs(x0)))))
    tr = integrate_schedule(f, sched, x0, cfg, u, t_eval=times, n_inputs=tpl.n_inputs)
    pos = np.searchsorted(tr.times, times - 1e-9 * plant.period / plant.samples_per_period)
    if pos.max() >= len(tr) or np.max(np.abs(tr.times[pos] - times)) > 1e-9 * plant.period:
        raise DataError("simulation did not return every sampling instant")
    states = tr.states[pos].copy()
    if noise_rng is not None:
        states += noise_rng.normal(0.0, 1.0, states.shape) * plant.noise_vector(tpl.n_states)
    gates = np.array([gate_word(t, specs) for t in times], int)
    modes = replay_modes(gates, tpl.transition_map, z0)
    return Trajectory(times, states, modes, np.tile(u, (n + 1, 1)), gates,
                      info={"condition": op.to_dict()})


def generate(plant: PlantSpec, conditions, n_windows: int) -> Dataset:
    """``n_windows`` windows cycling through ``conditions``.

    Window ``i`` draws its start state and noise from a generator seeded by
    ``(plant.seed, i)``, so windows are independent of generation order.
    """
    if not conditions:
        raise DataError("at least one operating condition is required")
    tpl = plant.build_template()
    values = plant.values()
    windows = []
    for i in range(int(n_windows)):
        op = conditions[i % len(conditions)]
        if not isinstance(op, OperatingPoint):
            op = OperatingPoint(**op)
        spp = plant.samples_per_period
        op = OperatingPoint(op.inputs, tuple(snap_duty(d, spp) for d in op.duties),
                            tuple(snap_duty(p % 1.0, spp) % 1.0 for p in op.phases))
        if len(op.inputs) != tpl.n_inputs:
            raise DataError(f"condition has {len(op.inputs)} inputs, template needs {tpl.n_inputs}")
        rng = np.random.default_rng([int(plant.seed), i])
        x_eq = averaged_equilibrium(tpl, values, op.pwm(plant.period), op.inputs)
        x0 = x_eq * (1.0 + plant.perturbation * rng.uniform(-1.0, 1.0, x_eq.shape))
        windows.append(simulate_window(plant, op, x0, 0.0, rng))
    meta = {"plant": plant.to_dict(), "plant_hash": plant.digest(), "seed": int(plant.seed),
            "template": plant.template, "state_names": list(tpl.state_names),
            "input_names": list(tpl.input_names)}
    return Dataset(windows, meta)


# -- preprocessing ------------------------------------------------------------------

def _haar_denoise(y: np.ndarray, levels: int | None = None) -> np.ndarray:
    n = y.size
    if levels is None:
        levels = max(1, min(4, int(math.log2(max(n, 2)))))
    size = int(math.ceil(n / 2 ** levels) * 2 ** levels)
    a = np.concatenate([y, y[::-1][: size - n]]) if size > n else y.copy()
    if a.size < size:
        a = np.pad(a, (0, size - a.size), mode="edge")
    details = []
    for _ in range(levels):
        even, odd = a[0::2], a[1::2]
        details.append((even - odd) / math.sqrt(2.0))
        a = (even + odd) / math.sqrt(2.0)
    sigma = np.median(np.abs(details[0])) / 0.6745
    thr = sigma * math.sqrt(2.0 * math.log(max(n, 2)))
    for k, dk in enumerate(details):
        details[k] = np.sign(dk) * np.maximum(np.abs(dk) - thr, 0.0)
    for dk in reversed(details):
        up = np.empty(2 * a.size)
        up[0::2] = (a + dk) / math.sqrt(2.0)
        up[1::2] = (a - dk) / math.sqrt(2.0)
        a = up
    return a[:n]


def denoise(traj: Trajectory, window: int = 5, method: str = "median") -> Trajectory:
    """Channel-wise centered moving median, or Haar soft-threshold denoising
    with the universal threshold (``window`` unused then)."""
    n = len(traj)
    if method == "median":
        if window < 1 or window % 2 == 0:
            raise ValueError("window must be odd and >= 1")
        if window > n:
            raise WindowTooLarge(f"window {window} exceeds trajectory length {n}")
        if window == 1:
            states = traj.states.copy()
        else:
            states = median_filter(traj.states, size=(window, 1), mode="nearest")
    elif method == "wavelet":
        states = np.column_stack([_haar_denoise(traj.states[:, c]) for c in range(traj.states.shape[1])])
    else:
        raise ValueError(f"unknown denoising method {method!r}")
    return Trajectory(traj.times.copy(), states, traj.modes.copy(),
                      None if traj.inputs is None else traj.inputs.copy(),
                      None if traj.gates is None else traj.gates.copy(), dict(traj.info))


def switching_signature(traj: Trajectory) -> bytes:
    if traj.gates is None:
        raise DataError("window has no gate log")
    return np.ascontiguousarray(traj.gates, dtype=np.int8).tobytes()


def cluster_by_switching(dataset: Dataset) -> list[list[int]]:
    """Window indices grouped by identical gate-word sequences, in order of
    first appearance."""
    groups: dict[bytes, list[int]] = {}
    for i, w in enumerate(dataset.windows):
        groups.setdefault(switching_signature(w), []).append(i)
    return list(groups.values())


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(dataset: Dataset, ratios=(0.7, 0.2, 0.1), seed: int = 0):
    """Seeded, cluster-stratified split into (train, val, test).

    Each cluster is shuffled and its members ranked by their fractional
    position; taking the lowest ranks globally keeps every cluster close to
    the requested proportions while the overall sizes are exact.
    """
    r = np.asarray(ratios, float)
    if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise RatioInvalid(f"ratios {tuple(ratios)} must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    keys = []
    for c, members in enumerate(cluster_by_switching(dataset)):
        perm = rng.permutation(len(members))
        for rank, j in enumerate(perm):
            keys.append(((rank + 0.5) / len(members), c, members[j]))
    keys.sort()
    order = [k[2] for k in keys]
    n_train, n_val, _ = split_sizes(len(dataset), r)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(dataset.select(sorted(p), tag) for p, tag in zip(parts, ("train", "val", "test")))


def subsample(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(dataset)
    k = int(round(fraction * n))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return dataset.select(idx.tolist())


# -- CSV storage ------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_window(path, traj: Trajectory):
    d = traj.states.shape[1]
    m = 0 if traj.inputs is None else traj.inputs.shape[1]
    s = 0 if traj.gates is None else traj.gates.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"u{j + 1}" for j in range(m)] + \
        [f"g{k + 1}" for k in range(s)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(traj)):
            row = [_fmt(traj.times[i])] + [_fmt(v) for v in traj.states[i]]
            if m:
                row += [_fmt(v) for v in traj.inputs[i]]
            if s:
                row += [str(int(g)) for g in traj.gates[i]]
            w.writerow(row)


def read_window(path, transition_map=None, z0: int = 0) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise DataError(f"{path}: missing header")
    header = rows[0]
    cols = {c[0] for c in header[1:]}
    if not cols <= {"x", "u", "g"}:
        raise DataError(f"{path}: unexpected columns {header}")
    xi = [k for k, c in enumerate(header) if c.startswith("x")]
    ui = [k for k, c in enumerate(header) if c.startswith("u")]
    gi = [k for k, c in enumerate(header) if c.startswith("g")]
    try:
        data = [[float(v) for v in r] for r in rows[1:]]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    arr = np.array(data, float).reshape(len(data), len(header))
    times = arr[:, 0]
    gates = arr[:, gi].astype(int) if gi else None
    modes = None
    if gates is not None and transition_map is not None:
        modes = replay_modes(gates, transition_map, z0)
    return Trajectory(times, arr[:, xi], modes, arr[:, ui] if ui else None, gates)


def write_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, w in enumerate(dataset.windows):
        name = f"window_{i:05d}.csv"
        write_window(directory / name, w)
        files.append(name)
    meta = dict(dataset.metadata)
    meta["files"] = files
    meta["tags"] = list(dataset.tags)
    meta["conditions"] = [w.info.get("condition") for w in dataset.windows]
    with open(directory / "dataset.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    return directory


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    side = directory / "dataset.yaml"
    if not side.exists():
        raise DataError(f"{directory}: no dataset.yaml sidecar")
    with open(side) as fh:
        meta = yaml.safe_load(fh) or {}
    tmap = None
    if meta.get("template") in _INDUCTANCE:
        tmap = make_template(meta["template"]).transition_map
    files = meta.pop("files", None) or sorted(p.name for p in directory.glob("*.csv"))
    tags = meta.pop("tags", None) or []
    conditions = meta.pop("conditions", None) or [None] * len(files)
    windows = []
    for name, cond in zip(files, conditions):
        w = read_window(directory / name, tmap)
        if cond is not None:
            w.info["condition"] = cond
        windows.append(w)
    return Dataset(windows, meta, tags)
