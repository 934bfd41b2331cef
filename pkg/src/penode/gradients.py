"""Trajectory loss and its gradient with respect to all model parameters.

Two independent engines share one batched vector-field evaluator:

``backprop``
    exact reverse-mode differentiation of the unrolled fixed-step RK4 graph.
``adjoint``
    the continuous adjoint ``da/dt = -(df/dx)^T a`` integrated backward with
    RK4, with loss gradients injected at observation instants and parameter
    gradients accumulated as ``int a^T df/dtheta dt``. Forward states are
    checkpointed at dwell-interval boundaries and recomputed inside each
    interval; off-grid states are taken from the cubic Hermite interpolant.

Both work on a :class:`GridBatch`: a set of equally long windows on a uniform
step grid, with every mode switch on a grid point. Jumps are identity maps
for both state and adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .automaton import ModeSchedule
from .dynamics import HybridModel
from .errors import GridMismatch, NonFiniteGradient
from .solvers import Trajectory


@dataclass
class LossReport:
    mse: float
    per_channel: np.ndarray
    l2_penalty: float = 0.0

    @property
    def total(self) -> float:
        return self.mse + self.l2_penalty


@dataclass
class GridBatch:
    """Windows sharing a uniform RK4 grid.

    ``modes[w, n]`` is the mode on step ``n`` of window ``w``; observations
    are taken every ``substeps`` steps, excluding the initial state.
    """

    h: float
    substeps: int
    t0: np.ndarray
    x0: np.ndarray
    u: np.ndarray
    modes: np.ndarray
    obs: np.ndarray

    @property
    def n_windows(self):
        return self.x0.shape[0]

    @property
    def n_steps(self):
        return self.modes.shape[1]

    @property
    def n_obs(self):
        return self.obs.shape[1]

    def subset(self, idx) -> GridBatch:
        return GridBatch(self.h, self.substeps, self.t0[idx], self.x0[idx], self.u[idx],
                         self.modes[idx], self.obs[idx])

    @classmethod
    def from_windows(cls, windows, substeps: int = 1) -> GridBatch:
        """Stack observed windows (uniformly sampled, constant input)."""
        if not windows:
            raise GridMismatch("no windows")
        n = len(windows[0])
        dt = windows[0].times[1] - windows[0].times[0]
        t0s, x0s, us, modes, obs = [], [], [], [], []
        for w in windows:
            if len(w) != n:
                raise GridMismatch("windows differ in length")
            steps = np.diff(w.times)
            if np.max(np.abs(steps - dt)) > 1e-6 * dt:
                raise GridMismatch("windows are not on a common uniform grid")
            if w.inputs is None:
                raise GridMismatch("windows need input samples")
            if np.any(w.inputs != w.inputs[0]):
                raise GridMismatch("inputs must be constant within a window")
            t0s.append(w.times[0])
            x0s.append(w.states[0])
            us.append(w.inputs[0])
            modes.append(np.repeat(w.modes[:-1], substeps))
            obs.append(w.states[1:])
        return cls(dt / substeps, substeps, np.array(t0s), np.array(x0s), np.array(us),
                   np.array(modes, dtype=int), np.array(obs))


def batch_from_schedule(schedule: ModeSchedule, x0, obs: Trajectory, u, substeps: int = 1) -> GridBatch:
    """Single-window batch whose modes come from ``schedule``.

    Every event of the schedule inside the observed span must fall on the
    step grid.
    """
    times = obs.times
    dt = times[1] - times[0]
    if np.max(np.abs(np.diff(times) - dt)) > 1e-6 * dt:
        raise GridMismatch("observation times must be uniform")
    h = dt / substeps
    n_steps = (times.size - 1) * substeps
    grid = times[0] + h * np.arange(n_steps + 1)
    for t in schedule.times[1:]:
        if times[0] < t < times[-1]:
            k = np.rint((t - times[0]) / h)
            if abs(grid[int(k)] - t) > 1e-6 * h:
                raise GridMismatch(f"event at t={t!r} is not on the step grid")
    mids = grid[:-1] + 0.5 * h
    modes = np.array([[schedule.mode_at(t) for t in mids]], dtype=int)
    u = np.atleast_1d(np.asarray(u, float))
    return GridBatch(h, substeps, np.array([times[0]]), np.asarray(x0, float)[None], u[None],
                     modes, obs.states[1:][None])


class _Acc:
    """Parameter-gradient accumulators."""

    def __init__(self, model: HybridModel):
        Z, d, m = model.n_modes, model.n_states, model.n_inputs
        self.M = np.zeros((Z, d, d))
        self.N = np.zeros((Z, d, m))
        self.nets = [np.zeros(n.n_params) for n in model.nets]

    def to_vector(self, model: HybridModel) -> np.ndarray:
        g_phys = np.zeros(len(model.phys))
        if model.has_physics:
            for z, (dA, dB) in enumerate(model.physics_derivatives()):
                g_phys += np.einsum("pij,ij->p", dA, self.M[z]) + np.einsum("pij,ij->p", dB, self.N[z])
        g_phys *= model.phys.dvalue_dfree()
        return np.concatenate([g_phys] + self.nets)


class BatchField:
    """Vector field of a model evaluated on many windows at once."""

    def __init__(self, model: HybridModel):
        self.model = model
        mats = model.physics_matrices()
        self.A = [A for A, _ in mats]
        self.B = [B for _, B in mats]
        self.d = model.n_states
        self.rows = [lay.nn_rows if lay.nn[1] else None for lay in model.layouts]
        self.nets = [model.net_for(z) for z in range(model.n_modes)]
        self.net_ids = model.net_of_mode
        self.has_phys = [bool(lay.phys[1]) for lay in model.layouts]

    @staticmethod
    def groups(modes_col: np.ndarray, n_modes: int):
        present = np.unique(modes_col)
        if present.size == 1:
            return [(int(present[0]), None)]
        return [(int(z), np.flatnonzero(modes_col == z)) for z in present]

    def __call__(self, T, X, U, groups, keep=False):
        model = self.model
        F = np.empty_like(X)
        cache = [] if keep else None
        for z, idx in groups:
            Xi = X if idx is None else X[idx]
            Ui = U if idx is None else U[idx]
            Fi = Xi @ self.A[z].T + Ui @ self.B[z].T if self.has_phys[z] else np.zeros_like(Xi)
            acts = None
            if self.rows[z] is not None:
                Ti = None if model.time_period is None else (T if idx is None else T[idx])
                inp = model.nn_input(Xi, Ui, Ti, z)
                if keep:
                    out, acts = self.nets[z].forward(inp)
                else:
                    out = self.nets[z](inp)
                Fi[:, self.rows[z]] += out
            if idx is None:
                F = Fi
            else:
                F[idx] = Fi
            if keep:
                cache.append((z, idx, Xi, Ui, acts))
        return F, cache

    def vjp(self, cache, V, acc: _Acc):
        """``J^T V`` for every window; parameter gradients go into ``acc``."""
        gX = np.empty_like(V)
        for z, idx, Xi, Ui, acts in cache:
            Vi = V if idx is None else V[idx]
            if self.has_phys[z]:
                g = Vi @ self.A[z]
                acc.M[z] += Vi.T @ Xi
                acc.N[z] += Vi.T @ Ui
            else:
                g = np.zeros_like(Vi)
            if acts is not None:
                gin, _ = self.nets[z].backward(acts, Vi[:, self.rows[z]], acc.nets[self.net_ids[z]])
                g += gin[:, :self.d]
            if idx is None:
                gX = g
            else:
                gX[idx] = g
        return gX


def _mse(pred, obs):
    r = pred - obs
    W, K, _ = r.shape
    per_channel = np.einsum("wkc,wkc->c", r, r) / (W * K)
    return LossReport(float(per_channel.sum()), per_channel), r * (2.0 / (W * K))


def _step_groups(batch: GridBatch, n_modes):
    return [BatchField.groups(batch.modes[:, n], n_modes) for n in range(batch.n_steps)]


def predict(model: HybridModel, batch: GridBatch) -> np.ndarray:
    """RK4 predictions at the observation instants, shape ``(W, K, d)``."""
    F = BatchField(model)
    h = batch.h
    X = batch.x0.copy()
    U = batch.u
    pred = np.empty_like(batch.obs)
    for n in range(batch.n_steps):
        g = BatchField.groups(batch.modes[:, n], model.n_modes)
        T = batch.t0 + n * h
        k1, _ = F(T, X, U, g)
        k2, _ = F(T + 0.5 * h, X + 0.5 * h * k1, U, g)
        k3, _ = F(T + 0.5 * h, X + 0.5 * h * k2, U, g)
        k4, _ = F(T + h, X + h * k3, U, g)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (n + 1) % batch.substeps == 0:
            pred[:, (n + 1) // batch.substeps - 1] = X
    return pred


def evaluate_loss(model: HybridModel, batch: GridBatch) -> LossReport:
    report, _ = _mse(predict(model, batch), batch.obs)
    return report


def _finish(model, acc, report, gx0):
    g = acc.to_vector(model)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    return report, g, gx0


def backprop_gradient(model: HybridModel, batch: GridBatch):
    """Loss report, flat parameter gradient and ``dL/dx0`` by reverse-mode AD."""
    F = BatchField(model)
    h = batch.h
    U = batch.u
    X = batch.x0.copy()
    groups = _step_groups(batch, model.n_modes)
    tape = []
    pred = np.empty_like(batch.obs)
    for n in range(batch.n_steps):
        g = groups[n]
        T = batch.t0 + n * h
        k1, c1 = F(T, X, U, g, True)
        k2, c2 = F(T + 0.5 * h, X + 0.5 * h * k1, U, g, True)
        k3, c3 = F(T + 0.5 * h, X + 0.5 * h * k2, U, g, True)
        k4, c4 = F(T + h, X + h * k3, U, g, True)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tape.append((c1, c2, c3, c4))
        if (n + 1) % batch.substeps == 0:
            pred[:, (n + 1) // batch.substeps - 1] = X
    report, gpred = _mse(pred, batch.obs)
    acc = _Acc(model)
    gX = np.zeros_like(X)
    for n in range(batch.n_steps - 1, -1, -1):
        if (n + 1) % batch.substeps == 0:
            gX = gX + gpred[:, (n + 1) // batch.substeps - 1]
        c1, c2, c3, c4 = tape[n]
        gk1 = (h / 6.0) * gX
        gk2 = (h / 3.0) * gX
        gk3 = (h / 3.0) * gX
        gk4 = (h / 6.0) * gX
        gin = F.vjp(c4, gk4, acc)
        out = gX + gin
        gk3 = gk3 + h * gin
        gin = F.vjp(c3, gk3, acc)
        out += gin
        gk2 = gk2 + 0.5 * h * gin
        gin = F.vjp(c2, gk2, acc)
        out += gin
        gk1 = gk1 + 0.5 * h * gin
        out += F.vjp(c1, gk1, acc)
        gX = out
        tape[n] = None
    return _finish(model, acc, report, gX)


def _checkpoints(batch: GridBatch) -> list[int]:
    """Step indices where any window changes mode (plus both ends)."""
    m = batch.modes
    change = np.flatnonzero(np.any(m[:, 1:] != m[:, :-1], axis=0)) + 1
    return [0, *change.tolist(), batch.n_steps]


def adjoint_gradient(model: HybridModel, batch: GridBatch):
    """Loss report, flat parameter gradient and ``dL/dx0`` by the adjoint method."""
    F = BatchField(model)
    h = batch.h
    U = batch.u
    Z = model.n_modes
    ckpts = _checkpoints(batch)
    # forward sweep, keeping only interval-boundary states
    X = batch.x0.copy()
    saved = {0: X.copy()}
    pred = np.empty_like(batch.obs)
    for s, e in zip(ckpts[:-1], ckpts[1:]):
        g = BatchField.groups(batch.modes[:, s], Z)
        for n in range(s, e):
            T = batch.t0 + n * h
            k1, _ = F(T, X, U, g)
            k2, _ = F(T + 0.5 * h, X + 0.5 * h * k1, U, g)
            k3, _ = F(T + 0.5 * h, X + 0.5 * h * k2, U, g)
            k4, _ = F(T + h, X + h * k3, U, g)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if (n + 1) % batch.substeps == 0:
                pred[:, (n + 1) // batch.substeps - 1] = X
        saved[e] = X.copy()
    report, gpred = _mse(pred, batch.obs)
    acc = _Acc(model)
    a = np.zeros_like(X)
    for s, e in reversed(list(zip(ckpts[:-1], ckpts[1:]))):
        g = BatchField.groups(batch.modes[:, s], Z)
        # recompute grid states of this dwell interval
        xs = [saved[s]]
        X = saved[s]
        for n in range(s, e):
            T = batch.t0 + n * h
            k1, _ = F(T, X, U, g)
            k2, _ = F(T + 0.5 * h, X + 0.5 * h * k1, U, g)
            k3, _ = F(T + 0.5 * h, X + 0.5 * h * k2, U, g)
            k4, _ = F(T + h, X + h * k3, U, g)
            X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            xs.append(X)
        T_hi = batch.t0 + e * h
        f_hi, c_hi = F(T_hi, xs[-1], U, g, True)
        for n in range(e - 1, s - 1, -1):
            if (n + 1) % batch.substeps == 0:
                a = a + gpred[:, (n + 1) // batch.substeps - 1]
            T_lo = batch.t0 + n * h
            f_lo, c_lo = F(T_lo, xs[n - s], U, g, True)
            x_mid = 0.5 * (xs[n - s] + xs[n - s + 1]) + (h / 8.0) * (f_lo - f_hi)
            _, c_mid = F(T_lo + 0.5 * h, x_mid, U, g, True)
            # reversed-time RK4 on da/ds = J^T a, dG/ds = (df/dtheta)^T a
            w1, w2 = h / 6.0, h / 3.0
            k1 = F.vjp(c_hi, w1 * a, acc) / w1
            k2 = F.vjp(c_mid, w2 * (a + 0.5 * h * k1), acc) / w2
            k3 = F.vjp(c_mid, w2 * (a + 0.5 * h * k2), acc) / w2
            k4 = F.vjp(c_lo, w1 * (a + h * k3), acc) / w1
            a = a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            f_hi, c_hi = f_lo, c_lo
    return _finish(model, acc, report, a)


ENGINES = {"backprop": backprop_gradient, "adjoint": adjoint_gradient}


def loss(pred: Trajectory, obs: Trajectory, lam: float = 0.0, theta_nn=None) -> LossReport:
    """Multi-step prediction MSE between two trajectories on the same grid.

    ``mse = (1/K) sum_k ||x(t_k) - x_obs(t_k)||^2``; the L2 penalty is
    ``lam * ||theta_nn||^2``.
    """
    if pred.times.shape != obs.times.shape or np.any(pred.times != obs.times):
        raise GridMismatch("prediction and observation grids differ")
    r = pred.states - obs.states
    per_channel = np.mean(r * r, axis=0)
    pen = 0.0 if theta_nn is None else float(lam * np.dot(theta_nn, theta_nn))
    return LossReport(float(per_channel.sum()), per_channel, pen)


def _single(engine, model, schedule, x0, obs, u, substeps):
    batch = batch_from_schedule(schedule, x0, obs, u, substeps)
    report, g, _ = ENGINES[engine](model, batch)
    return report, g


def grad_backprop(model: HybridModel, schedule: ModeSchedule, x0, obs: Trajectory, u=None,
                  substeps: int = 1):
    """Gradient of the observation MSE (observations after ``obs.times[0]``)
    by differentiating RK4 with ``substeps`` steps per observation gap."""
    u = np.zeros(model.n_inputs) if u is None else u
    return _single("backprop", model, schedule, x0, obs, u, substeps)


def grad_adjoint(model: HybridModel, schedule: ModeSchedule, x0, obs: Trajectory, u=None,
                 substeps: int = 1):
    """As :func:`grad_backprop`, computed with the continuous adjoint."""
    u = np.zeros(model.n_inputs) if u is None else u
    return _single("adjoint", model, schedule, x0, obs, u, substeps)
