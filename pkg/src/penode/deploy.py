"""Emulated edge deployment: pruning, post-training quantization and
integer-arithmetic inference.

Number formats
--------------
* physics matrices: signed 32-bit Q16.16. Rows holding entries beyond the
  Q16.16 range are pre-scaled by a power of two (``row_shift``); the stored
  integer ``q`` then means ``q * 2**(shift - 16)``.
* hidden layers: symmetric int8 weights with one scale per tensor, int8
  activations with one scale per layer input (from calibration max-abs),
  int32 biases in accumulator scale, int32 accumulation and a fixed-point
  requantization multiplier.
* output layer: IEEE binary16 weights and biases; products are summed in
  float64 and the sum is rounded to binary16.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .automaton import ModeSchedule
from .dynamics import HybridModel
from .errors import AccumulatorOverflow, Overflow
from .mlp import ResidualNet
from .solvers import SolverConfig, Trajectory, integrate_schedule

Q_FRAC = 16
Q_MAX = 2 ** 31 - 1
Q_MIN = -(2 ** 31)
INT8_MAX = 127
_I32 = (-(2 ** 31), 2 ** 31 - 1)


# -- pruning --------------------------------------------------------------------------

def prune_magnitude(net: ResidualNet, sparsity: float) -> ResidualNet:
    """Zero the ``round(sparsity * n)`` smallest-magnitude hidden-layer weights.

    All weight matrices except the output layer are ranked together; ties
    are broken by (layer, row, column). Biases and the output layer are kept.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    out = net.copy()
    hidden = out.W[:-1]
    if not hidden or sparsity == 0.0:
        return out
    mags, layer, row, col = [], [], [], []
    for j, W in enumerate(hidden):
        r, c = np.indices(W.shape)
        mags.append(np.abs(W).ravel())
        layer.append(np.full(W.size, j))
        row.append(r.ravel())
        col.append(c.ravel())
    mags, layer, row, col = (np.concatenate(a) for a in (mags, layer, row, col))
    k = int(round(sparsity * mags.size))
    order = np.lexsort((col, row, layer, mags))[:k]
    for i in order:
        hidden[layer[i]][row[i], col[i]] = 0.0
    return out


# -- scalar quantizers ---------------------------------------------------------------

def int8_scale(w) -> float:
    m = float(np.max(np.abs(w))) if np.size(w) else 0.0
    s = m / INT8_MAX
    # subnormal maxima underflow to a zero scale
    return s if s > 0 else 1.0


def quantize_int8(w, scale):
    return np.clip(np.rint(np.asarray(w, float) / scale), -INT8_MAX, INT8_MAX).astype(np.int8)


def dequantize_int8(q, scale):
    return q.astype(float) * scale


def to_q16(a, shift: int = 0) -> np.ndarray:
    v = np.rint(np.asarray(a, float) * 2.0 ** (Q_FRAC - shift))
    if np.any(v > Q_MAX) or np.any(v < Q_MIN):
        raise Overflow("value outside the Q16.16 range")
    return v.astype(np.int64).astype(np.int32)


def from_q16(q, shift=0):
    return np.asarray(q, np.int64).astype(float) * 2.0 ** (np.asarray(shift) - Q_FRAC)


def row_shifts(M, allow_scaling: bool = True) -> np.ndarray:
    """Smallest power-of-two pre-scaling per row that fits Q16.16."""
    M = np.atleast_2d(np.asarray(M, float))
    peak = np.max(np.abs(M), axis=1) if M.size else np.zeros(M.shape[0])
    lim = 32768.0 - 2.0 ** -17
    shifts = np.zeros(M.shape[0], int)
    for r, p in enumerate(peak):
        if not math.isfinite(p):
            raise Overflow("non-finite physics entry")
        if p >= lim:
            if not allow_scaling:
                raise Overflow(f"physics entry {p!r} outside the Q16.16 range")
            shifts[r] = int(math.floor(math.log2(p / lim))) + 1
            while p / 2.0 ** shifts[r] >= lim:
                shifts[r] += 1
    return shifts


def requant_multiplier(m: float) -> tuple[int, int]:
    """``m ~ m0 * 2**-s`` with ``m0`` a 31-bit integer (for ``m > 0``)."""
    if m <= 0:
        raise ValueError("multiplier must be positive")
    frac, exp = math.frexp(m)
    m0 = int(round(frac * 2 ** 31))
    if m0 == 2 ** 31:
        m0 //= 2
        exp += 1
    s = 31 - exp
    if s <= 0 or s > 62:
        raise Overflow(f"requantization multiplier {m!r} not representable")
    return m0, s


def _requant(acc: np.ndarray, m0: int, s: int) -> np.ndarray:
    # round half up; accumulators are non-negative after ReLU
    return (acc * np.int64(m0) + (np.int64(1) << np.int64(s - 1))) >> np.int64(s)


# -- quantized model ------------------------------------------------------------------

@dataclass
class QuantLayer:
    w: np.ndarray            # int8 (out, in)
    w_scale: float
    b: np.ndarray            # int32, accumulator scale in_scale * w_scale
    in_scale: float          # activation scale of the layer input
    out_scale: float         # activation scale of the (ReLU) output
    m0: int
    shift: int


@dataclass
class QuantNet:
    in_center: np.ndarray
    in_norm: np.ndarray
    layers: list
    w_out: np.ndarray        # float16
    b_out: np.ndarray        # float16
    y_scale: np.ndarray      # float64 output scaling
    sizes: list

    def __call__(self, inp):
        inp = np.atleast_2d(np.asarray(inp, float))
        a = (inp - self.in_center) / self.in_norm
        s0 = self.layers[0].in_scale if self.layers else 1.0
        q = np.clip(np.rint(a / s0), -INT8_MAX, INT8_MAX).astype(np.int64)
        act = a
        for L in self.layers:
            acc = q @ L.w.astype(np.int64).T + L.b.astype(np.int64)
            if np.any(acc > _I32[1]) or np.any(acc < _I32[0]):
                raise AccumulatorOverflow("int32 accumulator overflow in hidden layer")
            acc = np.maximum(acc, 0)
            q = np.minimum(_requant(acc, L.m0, L.shift), INT8_MAX)
            act = q.astype(float) * L.out_scale
        a16 = act.astype(np.float16).astype(float)
        y = (a16 @ self.w_out.astype(float).T + self.b_out.astype(float)).astype(np.float16)
        return y.astype(float) * self.y_scale


@dataclass
class QuantizedModel:
    model: HybridModel                      # float model: layout, automaton, input features
    A_q: list                               # per mode int32 (d, d)
    B_q: list                               # per mode int32 (d, m)
    a_shift: list                           # per mode row shifts (d,)
    b_shift: list
    nets: list = field(default_factory=list)

    @property
    def n_modes(self):
        return self.model.n_modes

    def physics_matrices(self):
        return [(from_q16(A, sa[:, None]), from_q16(B, sb[:, None]))
                for A, B, sa, sb in zip(self.A_q, self.B_q, self.a_shift, self.b_shift)]

    def physics(self, x, u, z):
        """Fixed-point ``A x + B u`` (Q16.16 operands, 64-bit accumulation)."""
        xq = to_q16(x).astype(np.int64)
        uq = to_q16(u).astype(np.int64)
        out = np.zeros(len(xq))
        for M, sh, v in ((self.A_q[z], self.a_shift[z], xq), (self.B_q[z], self.b_shift[z], uq)):
            if M.size == 0:
                continue
            acc = M.astype(np.int64) @ v
            # each product is below 2**62; flag sums that lose float64 exactness
            if np.any(np.abs(acc) > 2 ** 53):
                raise AccumulatorOverflow("physics accumulator exceeds 53 bits")
            out += acc.astype(float) * 2.0 ** (sh - 2 * Q_FRAC)
        return out

    def field(self, t, x, u, z):
        m = self.model
        dx = self.physics(x, u, z)
        lay = m.layouts[z]
        if lay.nn[1]:
            net = self.nets[m.net_of_mode[z]]
            dx[lay.nn_rows] += net(m.nn_input(x, u, t, z))[0]
        return dx


def _calibration_inputs(model: HybridModel, calib) -> dict:
    """Raw net inputs per net index gathered from observed windows."""
    per_net: dict[int, list] = {}
    windows = getattr(calib, "windows", calib)
    for w in windows:
        u = w.inputs if w.inputs is not None else np.zeros((len(w), model.n_inputs))
        for z in range(model.n_modes):
            if not model.layouts[z].nn[1]:
                continue
            sel = w.modes == z
            if not np.any(sel):
                continue
            inp = model.nn_input(w.states[sel], u[sel], w.times[sel], z)
            per_net.setdefault(model.net_of_mode[z], []).append(inp)
    return {k: np.concatenate(v) for k, v in per_net.items()}


def _quantize_net(net: ResidualNet, samples: np.ndarray) -> QuantNet:
    a = (samples - net.in_center) / net.in_scale
    layers = []
    in_scale = int8_scale(a)
    for W, b in zip(net.W[:-1], net.b[:-1]):
        ws = int8_scale(W)
        z = np.maximum(a @ W.T + b, 0.0)
        out_scale = int8_scale(z)
        bq = np.rint(b / (in_scale * ws))
        if np.any(np.abs(bq) > _I32[1]):
            raise Overflow("bias outside the int32 range")
        m0, sh = requant_multiplier(in_scale * ws / out_scale)
        layers.append(QuantLayer(quantize_int8(W, ws), ws, bq.astype(np.int32), in_scale,
                                 out_scale, m0, sh))
        a, in_scale = z, out_scale
    return QuantNet(net.in_center.copy(), net.in_scale.copy(), layers,
                    net.W[-1].astype(np.float16), net.b[-1].astype(np.float16),
                    net.out_scale.copy(), list(net.sizes))


def quantize(model: HybridModel, calib, allow_scaling: bool = True) -> QuantizedModel:
    """Post-training quantization with activation ranges from ``calib``
    (a Dataset or a list of Trajectory windows)."""
    windows = getattr(calib, "windows", calib)
    if not windows:
        raise ValueError("calibration set is empty")
    A_q, B_q, a_sh, b_sh = [], [], [], []
    for A, B in model.physics_matrices():
        sa = row_shifts(A, allow_scaling)
        sb = row_shifts(B, allow_scaling)
        A_q.append(to_q16(A, sa[:, None]))
        B_q.append(to_q16(B, sb[:, None]))
        a_sh.append(sa)
        b_sh.append(sb)
    samples = _calibration_inputs(model, windows)
    nets = []
    for i, net in enumerate(model.nets):
        if i not in samples:
            samples[i] = np.atleast_2d(net.in_center)
        nets.append(_quantize_net(net, samples[i]))
    return QuantizedModel(model.copy(), A_q, B_q, a_sh, b_sh, nets)


def quantized_infer(qm: QuantizedModel, schedule: ModeSchedule, x0, cfg: SolverConfig | None = None,
                    u=None, t_eval=None) -> Trajectory:
    """Fixed-step RK4 simulation of the quantized model."""
    cfg = cfg or SolverConfig("rk4")
    if cfg.method != "rk4":
        raise ValueError("quantized inference uses fixed-step RK4 only")
    return integrate_schedule(qm.field, schedule, x0, cfg, u, t_eval, n_inputs=qm.model.n_inputs)


def relative_l2(a: Trajectory, b: Trajectory) -> float:
    """``||a - b|| / ||b||`` over all samples and channels."""
    if a.states.shape != b.states.shape:
        raise ValueError("trajectories differ in shape")
    den = np.linalg.norm(b.states)
    num = np.linalg.norm(a.states - b.states)
    return float(num / den) if den > 0 else float(num)
