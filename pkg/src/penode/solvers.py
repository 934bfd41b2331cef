"""ODE integration: classical RK4, Dormand-Prince 5(4), and the hybrid drivers.

The hybrid drivers integrate each dwell interval of a :class:`ModeSchedule`
with that interval's vector field only. Event instants come from the
automaton; they are never located by interpolation. The state passes through
every jump unchanged.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .automaton import ModeSchedule
from .dynamics import HybridModel, vector_field
from .errors import MaxStepsExceeded, NonFiniteState, NotLinear, StepUnderflow


@dataclass
class SolverConfig:
    method: str = "dopri5"
    h: float = 1e-7
    rtol: float = 1e-6
    atol: float = 1e-9
    max_steps: int = 1_000_000
    dense_output: bool = True

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.method!r}")
        if not (self.h > 0 and self.rtol > 0 and self.atol > 0 and self.max_steps > 0):
            raise ValueError("solver step, tolerances and max_steps must be positive")


@dataclass
class Trajectory:
    """Sampled state trajectory.

    ``modes[i]`` is the mode active on ``[times[i], times[i+1])``; ``gates``
    holds the switch word over the same interval when known.
    """

    times: np.ndarray
    states: np.ndarray
    modes: np.ndarray | None = None
    inputs: np.ndarray | None = None
    gates: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.states = np.atleast_2d(np.asarray(self.states, float))
        if self.states.shape[0] != self.times.size and self.times.size == 1:
            self.states = self.states.reshape(1, -1)
        n = self.times.size
        if self.modes is None:
            self.modes = np.zeros(n, dtype=int)
        self.modes = np.asarray(self.modes, dtype=int)
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, float).reshape(n, -1)
        if self.gates is not None:
            self.gates = np.asarray(self.gates, dtype=int).reshape(n, -1)

    def __len__(self):
        return self.times.size

    def validate(self):
        n = self.times.size
        if self.states.shape[0] != n or self.modes.shape != (n,):
            raise ValueError("trajectory arrays have unequal lengths")
        if self.inputs is not None and self.inputs.shape[0] != n:
            raise ValueError("trajectory inputs have the wrong length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must strictly increase")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.times))):
            raise ValueError("trajectory contains non-finite values")
        return self

    @property
    def x(self):
        return self.states

    def slice(self, i0, i1) -> Trajectory:
        g = None if self.gates is None else self.gates[i0:i1]
        u = None if self.inputs is None else self.inputs[i0:i1]
        return Trajectory(self.times[i0:i1].copy(), self.states[i0:i1].copy(),
                          self.modes[i0:i1].copy(), u, g, dict(self.info))


def _input_fn(u, m=None):
    if callable(u):
        return u
    arr = np.zeros(m or 0) if u is None else np.atleast_1d(np.asarray(u, float))
    return lambda t: arr


def rk4_step(f, t, x, u, h):
    """One classical Runge-Kutta step of ``dx/dt = f(t, x, u)``.

    ``u`` is either a fixed input vector or a callable of time.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    uf = _input_fn(u)
    k1 = f(t, x, uf(t))
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1, uf(t + 0.5 * h))
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2, uf(t + 0.5 * h))
    k4 = f(t + h, x + h * k3, uf(t + h))
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise NonFiniteState(f"non-finite stage derivative at t={t!r}")
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f, t0, t1, x0, u, h, t_eval=None) -> Trajectory:
    """Fixed-step RK4 landing exactly on ``t1`` and on every ``t_eval`` point.

    Each gap between output points is split into ``ceil(gap / h)`` equal steps.
    """
    uf = _input_fn(u)
    pts = [t0] + ([t for t in t_eval if t0 < t < t1] if t_eval is not None else []) + [t1]
    x = np.array(x0, dtype=float)
    times, states = [t0], [x.copy()]
    grid = []
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, math.ceil((b - a) / h - 1e-9))
        grid.extend(a + (b - a) * np.arange(n) / n)
    grid.append(t1)
    keep = set(pts)
    nsteps = 0
    for a, b in zip(grid[:-1], grid[1:]):
        x = rk4_step(f, a, x, uf, b - a)
        nsteps += 1
        if b in keep:
            times.append(b)
            states.append(x.copy())
    traj = Trajectory(np.array(times), np.array(states))
    traj.info.update(n_steps=nsteps, n_rejected=0)
    return traj


# -- Dormand-Prince 5(4) ------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# 4th-order continuous extension: y(t + s h) = y + h * K^T (P @ [s, s^2, s^3, s^4])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_FAC_MIN, _FAC_MAX = 0.2, 5.0
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA


def _initial_step(f, t0, x0, f0, uf, rtol, atol, span):
    sc = atol + rtol * np.abs(x0)
    d0 = np.sqrt(np.mean((x0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    x1 = x0 + h0 * f0
    f1 = f(t0 + h0, x1, uf(t0 + h0))
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    # floor: the heuristic collapses when |x0| barely exceeds atol while f0 is large;
    # error control shrinks an oversized first guess anyway
    return max(min(100 * h0, h1, span), 1e-6 * span)


def dopri5_integrate(f, t0, t1, x0, u=None, cfg: SolverConfig | None = None,
                     t_eval=None) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with FSAL and PI step-size control.

    Steps are accepted when ``|err_i| <= atol + rtol * max(|x_i|, |x_new_i|)``
    for every component. Output holds every accepted step, or only ``t0``,
    ``t_eval`` points and ``t1`` (dense output) when ``t_eval`` is given.
    The last step is shortened to land exactly on ``t1``.
    """
    cfg = cfg or SolverConfig()
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    uf = _input_fn(u)
    span = t1 - t0
    x = np.array(x0, dtype=float)
    t = float(t0)
    fx = np.asarray(f(t, x, uf(t)), float)
    if not np.all(np.isfinite(fx)):
        raise NonFiniteState(f"non-finite derivative at t={t!r}")
    h = _initial_step(f, t, x, fx, uf, cfg.rtol, cfg.atol, span)
    h_min = 1e-14 * span
    evals = None if t_eval is None else np.sort(np.asarray(
        [s for s in np.atleast_1d(t_eval) if t0 < s < t1], float))
    ei = 0
    times, states = [t], [x.copy()]
    K = np.empty((7, x.size))
    err_prev = 1e-4
    n_acc = n_rej = 0
    while t < t1:
        if n_acc + n_rej >= cfg.max_steps:
            raise MaxStepsExceeded(f"exceeded {cfg.max_steps} steps at t={t!r}")
        last = t + h >= t1 - 1e-12 * span
        if last:
            h = t1 - t
        if h < h_min and not last:
            raise StepUnderflow(f"step {h!r} below {h_min!r} at t={t!r}")
        K[0] = fx
        for s in range(1, 7):
            ts = t + _C[s] * h
            xs = x + h * (np.asarray(_A[s]) @ K[:s])
            K[s] = f(ts, xs, uf(ts))
        x_new = x + h * (_B5 @ K)
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(K))):
            raise NonFiniteState(f"non-finite stage at t={t!r}")
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.max(np.abs(h * (_E @ K)) / sc))
        if err <= 1.0:
            t_new = t1 if last else t + h
            if evals is not None:
                while ei < evals.size and evals[ei] <= t_new:
                    s_ = (evals[ei] - t) / h
                    times.append(evals[ei])
                    if evals[ei] < t_new:
                        q = _P @ np.array([s_, s_ ** 2, s_ ** 3, s_ ** 4])
                        states.append(x + h * (q @ K))
                    else:
                        states.append(x_new.copy())
                    ei += 1
            x, t, fx = x_new, t_new, K[6].copy()
            if evals is None or t == t1:
                times.append(t)
                states.append(x.copy())
            n_acc += 1
            fac = _FAC_MAX if err == 0 else _SAFETY * err ** -_ALPHA * err_prev ** _BETA
            h *= min(_FAC_MAX, max(_FAC_MIN, fac))
            err_prev = max(err, 1e-4)
        else:
            n_rej += 1
            h *= min(1.0, max(_FAC_MIN, _SAFETY * err ** -0.2))
            if h < h_min:
                raise StepUnderflow(f"step {h!r} below {h_min!r} at t={t!r}")
    traj = Trajectory(np.array(times), np.array(states))
    traj.info.update(n_steps=n_acc, n_rejected=n_rej)
    return traj


# -- hybrid drivers ------------------------------------------------------------

def _merge_times(event_times, t_eval, tol):
    """Union of event instants and requested outputs, snapping near-duplicates
    onto the event instant."""
    ev = np.asarray(event_times, float)
    out = list(ev)
    for s in t_eval:
        j = np.searchsorted(ev, s)
        near = any(0 <= i < ev.size and abs(ev[i] - s) <= tol for i in (j - 1, j))
        if not near:
            out.append(float(s))
    return np.array(sorted(out))


def integrate_schedule(field_fn: Callable, schedule: ModeSchedule, x0, cfg: SolverConfig | None = None,
                       u=None, t_eval=None, return_segments: bool = False, n_inputs: int | None = None):
    """Integrate ``dx/dt = field_fn(t, x, u, z)`` along a mode schedule.

    Returns a :class:`Trajectory` with one sample at every event time (labeled
    with the mode entered there) plus the horizon end, and every ``t_eval``
    point when given. With ``return_segments`` the per-interval trajectories
    are returned as well; consecutive segments share their boundary state
    bit for bit.
    """
    cfg = cfg or SolverConfig()
    uf = _input_fn(u, n_inputs)
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteState("initial state is not finite")
    intervals = schedule.intervals()
    span = schedule.horizon_end - schedule.t0
    tol = 1e-12 * span
    if t_eval is not None:
        t_eval = np.asarray(t_eval, float)
        t_eval = t_eval[(t_eval >= schedule.t0 - tol) & (t_eval <= schedule.horizon_end + tol)]
        grid = _merge_times([a for a, _, _ in intervals] + [schedule.horizon_end], t_eval, tol)
    times, states, modes = [], [], []
    segments = []
    for a, b, z in intervals:
        def f(t, xx, uu, _z=z):
            return field_fn(t, xx, uu, _z)
        inner = None
        if t_eval is not None:
            inner = grid[(grid > a + tol) & (grid < b - tol)]
        try:
            if cfg.method == "rk4":
                seg = rk4_integrate(f, a, b, x, uf, cfg.h, inner)
            else:
                seg = dopri5_integrate(f, a, b, x, uf, cfg, inner)
        except (NonFiniteState, StepUnderflow, MaxStepsExceeded) as exc:
            raise type(exc)(f"mode {z} on [{a!r}, {b!r}]: {exc}") from exc
        seg.modes[:] = z
        segments.append(seg)
        times.extend(seg.times[:-1])
        states.extend(seg.states[:-1])
        modes.extend([z] * (len(seg) - 1))
        x = seg.states[-1]
    times.append(schedule.horizon_end)
    states.append(x)
    modes.append(intervals[-1][2])
    times = np.array(times)
    inputs = np.array([uf(t) for t in times], float)
    traj = Trajectory(times, np.array(states), np.array(modes), inputs)
    traj.info["n_steps"] = sum(s.info.get("n_steps", 0) for s in segments)
    if return_segments:
        return traj, segments
    return traj


def hybrid_integrate(model: HybridModel, schedule: ModeSchedule, x0, cfg: SolverConfig | None = None,
                     u=None, t_eval=None, return_segments: bool = False):
    """Simulate a :class:`HybridModel` along ``schedule`` (see :func:`integrate_schedule`)."""
    def field_fn(t, x, uu, z):
        return vector_field(x, uu, t, model, z)
    return integrate_schedule(field_fn, schedule, x0, cfg, u, t_eval, return_segments,
                              n_inputs=model.n_inputs)


# -- exact propagation for linear modes ------------------------------------------------

def affine_propagator(A, b, tau):
    """``(Phi, gamma)`` with ``x(tau) = Phi x(0) + gamma`` for ``dx/dt = A x + b``.

    Uses the exponential of the augmented matrix ``[[A, b], [0, 0]]``
    (scaling and squaring with Pade approximants), which stays exact for
    singular ``A``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    d = A.shape[0]
    M = np.zeros((d + 1, d + 1))
    M[:d, :d] = A
    M[:d, d] = b
    E = expm(M * tau)
    return E[:d, :d], E[:d, d]


def forcing_series(A, tau, n_terms=30):
    """Truncated ``sum_k A^k tau^(k+1) / (k+1)!`` (the integral of ``exp(A s)``)."""
    A = np.atleast_2d(np.asarray(A, float))
    term = tau * np.eye(A.shape[0])
    acc = term.copy()
    for k in range(1, n_terms):
        term = term @ A * (tau / (k + 1))
        acc = acc + term
    return acc


def event_driven_solve(model: HybridModel, schedule: ModeSchedule, x0, u=None) -> Trajectory:
    """Jump from event to event with exact exponential propagators.

    Only linear models (no residual rows) are accepted. Inputs are held
    constant over each dwell interval at their value at the interval start.
    Propagators are cached per (mode, dwell time to 12 significant digits,
    input).
    """
    if model.has_residual:
        raise NotLinear("event-driven propagation needs a model without neural rows")
    uf = _input_fn(u, model.n_inputs)
    mats = model.physics_matrices()
    cache = {}
    x = np.array(x0, dtype=float)
    times, states, modes, inputs = [], [], [], []
    for a, b, z in schedule.intervals():
        uk = np.asarray(uf(a), float)
        tau = b - a
        key = (z, float(f"{tau:.12e}"), uk.tobytes())
        if key not in cache:
            A, B = mats[z]
            cache[key] = affine_propagator(A, B @ uk, tau)
        Phi, gamma = cache[key]
        times.append(a)
        states.append(x)
        modes.append(z)
        inputs.append(uk)
        x = Phi @ x + gamma
    times.append(schedule.horizon_end)
    states.append(x)
    modes.append(modes[-1])
    inputs.append(np.asarray(uf(schedule.horizon_end), float))
    traj = Trajectory(np.array(times), np.array(states), np.array(modes), np.array(inputs))
    traj.info["n_propagators"] = len(cache)
    return traj
