"""Per-mode vector fields: linear physics term plus neural residual.

``dx/dt = scatter(phys rows, A_z(theta) x + B_z(theta) u) + scatter(nn rows, f_nn)``

Physics matrices come from per-template constructor functions of the named
physical parameters. Their derivatives with respect to the parameters are
obtained by complex-step differentiation, which is exact to rounding for the
rational expressions used by circuit templates; constructor functions must
therefore be written with complex-safe arithmetic (no abs, no comparisons).
"""
from __future__ import annotations

import copy
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .automaton import TransitionMap, dab_map, single_switch_map
from .errors import DimensionMismatch
from .mlp import ResidualNet

_CSTEP = 1e-30


@dataclass
class PhysParams:
    """Named physical parameters.

    Parameters flagged ``positive`` are optimized in log space, so any
    unconstrained update keeps them strictly positive.
    """

    names: tuple[str, ...]
    values: np.ndarray
    positive: np.ndarray
    nominal: np.ndarray = None
    units: tuple[str, ...] = None

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = np.asarray(self.values, dtype=float).copy()
        self.positive = np.asarray(self.positive, dtype=bool).copy()
        self.nominal = self.values.copy() if self.nominal is None else np.asarray(self.nominal, float).copy()
        if self.units is None:
            self.units = ("",) * len(self.names)
        n = len(self.names)
        if not (self.values.shape == self.positive.shape == self.nominal.shape == (n,)):
            raise DimensionMismatch("parameter arrays do not match names")
        if np.any(self.values[self.positive] <= 0):
            raise ValueError("positive parameters must be > 0")

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.values)))

    def free(self) -> np.ndarray:
        return np.where(self.positive, np.log(np.where(self.positive, self.values, 1.0)), self.values)

    def set_free(self, phi):
        phi = np.asarray(phi, float)
        self.values = np.where(self.positive, np.exp(phi), phi)

    def dvalue_dfree(self) -> np.ndarray:
        return np.where(self.positive, self.values, 1.0)

    def with_values(self, **updates) -> PhysParams:
        p = copy.deepcopy(self)
        for k, v in updates.items():
            p.values[p.names.index(k)] = v
        return p

    def copy(self) -> PhysParams:
        return copy.deepcopy(self)


@dataclass(frozen=True)
class StateSpaceTemplate:
    """Matrix constructors ``theta -> (A_z, B_z)`` for every mode."""

    name: str
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    n_modes: int
    defaults: PhysParams
    build: Callable[[Mapping[str, complex], int], tuple[list, list]]
    transition_map: TransitionMap | None = None
    options: dict = field(default_factory=dict)

    @property
    def n_states(self):
        return len(self.state_names)

    @property
    def n_inputs(self):
        return len(self.input_names)

    def _named(self, values):
        return dict(zip(self.defaults.names, values))

    def matrices(self, values, z: int) -> tuple[np.ndarray, np.ndarray]:
        A, B = self.build(self._named(np.asarray(values, float)), z)
        A = np.array(A, dtype=float).reshape(self.n_states, self.n_states)
        B = np.array(B, dtype=float).reshape(self.n_states, self.n_inputs)
        return A, B

    def matrix_derivatives(self, values, z: int) -> tuple[np.ndarray, np.ndarray]:
        """``dA/dtheta`` of shape (p, d, d) and ``dB/dtheta`` of shape (p, d, m)."""
        values = np.asarray(values, float)
        p, d, m = len(values), self.n_states, self.n_inputs
        dA = np.zeros((p, d, d))
        dB = np.zeros((p, d, m))
        for j in range(p):
            v = values.astype(complex)
            v[j] += 1j * _CSTEP
            A, B = self.build(self._named(v), z)
            dA[j] = np.imag(np.array(A, dtype=complex).reshape(d, d)) / _CSTEP
            dB[j] = np.imag(np.array(B, dtype=complex).reshape(d, m)) / _CSTEP
        return dA, dB


# -- built-in templates --------------------------------------------------------

def _boost_build(p, z):
    L, C, R = p["L"], p["C"], p["R"]
    if z == 0:   # switch on: inductor charges from the source, capacitor feeds the load
        A = [[0.0, 0.0], [0.0, -1.0 / (R * C)]]
    else:        # switch off: inductor discharges through the diode into the output
        A = [[0.0, -1.0 / L], [1.0 / C, -1.0 / (R * C)]]
    B = [[1.0 / L], [0.0]]
    return A, B


def _buck_build(p, z):
    L, C, R = p["L"], p["C"], p["R"]
    A = [[0.0, -1.0 / L], [1.0 / C, -1.0 / (R * C)]]
    B = [[1.0 / L], [0.0]] if z == 0 else [[0.0], [0.0]]
    return A, B


_DAB_SIGNS = ((1, 1), (1, -1), (-1, 1), (-1, -1))


def _dab_build(p, z):
    L, n, R = p["L_lk"], p["n"], p["R_s"]
    s1, s2 = _DAB_SIGNS[z]
    return [[-R / L]], [[s1 / L, -s2 / (n * L)]]


def boost_template(L=200e-6, C=20e-6, R=20.0) -> StateSpaceTemplate:
    params = PhysParams(("L", "C", "R"), [L, C, R], [True, True, True], units=("H", "F", "ohm"))
    return StateSpaceTemplate("boost", ("i_L", "v_C"), ("V_in",), 2, params, _boost_build,
                              single_switch_map())


def buck_template(L=10e-6, C=94e-6, R=0.5) -> StateSpaceTemplate:
    params = PhysParams(("L", "C", "R"), [L, C, R], [True, True, True], units=("H", "F", "ohm"))
    return StateSpaceTemplate("buck", ("i_L", "v_C"), ("V_in",), 2, params, _buck_build,
                              single_switch_map())


def dab_reduced_template(L_lk=2e-6, n=1.0, R_s=0.05) -> StateSpaceTemplate:
    """Leakage-current model of a dual active bridge.

    Modes are the four (primary, secondary) bridge polarities; ``R_s`` is the
    lumped series resistance of the current path.
    """
    params = PhysParams(("L_lk", "n", "R_s"), [L_lk, n, R_s], [True, True, True],
                        units=("H", "", "ohm"))
    return StateSpaceTemplate("dab_reduced", ("i_lk",), ("V_1", "V_2"), 4, params, _dab_build,
                              dab_map())


def generic_template(As: Sequence, Bs: Sequence, transition_map: TransitionMap | None = None,
                     state_names=None, input_names=None) -> StateSpaceTemplate:
    """Template whose parameters are the matrix entries themselves."""
    As = [np.atleast_2d(np.asarray(a, float)) for a in As]
    Bs = [np.atleast_2d(np.asarray(b, float)) for b in Bs]
    if len(As) != len(Bs) or not As:
        raise DimensionMismatch("need one (A, B) pair per mode")
    d, m = As[0].shape[0], Bs[0].shape[1]
    for A, B in zip(As, Bs):
        if A.shape != (d, d) or B.shape != (d, m):
            raise DimensionMismatch("generic matrices have inconsistent shapes")
    Z = len(As)
    names, values = [], []
    for z in range(Z):
        for i in range(d):
            for j in range(d):
                names.append(f"A{z}_{i}_{j}")
                values.append(As[z][i, j])
        for i in range(d):
            for j in range(m):
                names.append(f"B{z}_{i}_{j}")
                values.append(Bs[z][i, j])
    per_mode = d * d + d * m

    def build(p, z):
        v = [p[k] for k in names[z * per_mode:(z + 1) * per_mode]]
        A = [v[i * d:(i + 1) * d] for i in range(d)]
        B = [v[d * d + i * m:d * d + (i + 1) * m] for i in range(d)]
        return A, B

    params = PhysParams(tuple(names), values, [False] * len(names))
    return StateSpaceTemplate(
        "generic",
        tuple(state_names or (f"x{i + 1}" for i in range(d))),
        tuple(input_names or (f"u{j + 1}" for j in range(m))),
        Z, params, build, transition_map,
        options={"n_states": d, "n_inputs": m, "n_modes": Z})


def builtin_templates() -> dict:
    """Ready templates; ``generic`` is a factory taking per-mode matrices."""
    return {
        "boost": boost_template(),
        "buck": buck_template(),
        "dab_reduced": dab_reduced_template(),
        "generic": generic_template,
    }


def make_template(name: str, n_states=None, n_inputs=None, n_modes=None, transition_map=None):
    """Template by name; generic templates are created with zero matrices."""
    if name == "boost":
        return boost_template()
    if name == "buck":
        return buck_template()
    if name == "dab_reduced":
        return dab_reduced_template()
    if name == "generic":
        return generic_template([np.zeros((n_states, n_states))] * n_modes,
                                [np.zeros((n_states, n_inputs))] * n_modes, transition_map)
    raise KeyError(f"unknown template {name!r}")


# -- composition --------------------------------------------------------------

@dataclass(frozen=True)
class CompositionLayout:
    """State rows receiving the physics term and the neural term.

    Each slice is ``(offset, length)``; the implied trailing pads make up the
    rest of the state vector. A zero length disables that term.
    """

    phys: tuple[int, int]
    nn: tuple[int, int]

    def validate(self, d: int):
        for off, n in (self.phys, self.nn):
            if off < 0 or n < 0 or off + n > d:
                raise DimensionMismatch(f"slice ({off}, {n}) does not fit state dimension {d}")

    @property
    def phys_rows(self) -> slice:
        return slice(self.phys[0], self.phys[0] + self.phys[1])

    @property
    def nn_rows(self) -> slice:
        return slice(self.nn[0], self.nn[0] + self.nn[1])

    def phys_mask(self, d: int) -> np.ndarray:
        m = np.zeros(d)
        m[self.phys_rows] = 1.0
        return m

    @classmethod
    def for_scenario(cls, scenario: str, d: int, nn_rows: tuple[int, int] | None = None):
        if scenario == "white":
            return cls((0, d), (0, 0))
        if scenario == "gray":
            return cls((0, d), nn_rows if nn_rows is not None else (0, d))
        if scenario == "black":
            return cls((0, 0), (0, d))
        raise ValueError(f"unknown scenario {scenario!r}")


class HybridModel:
    """Per-mode physics-embedded vector fields plus the discrete automaton.

    ``nets`` holds the residual networks; ``net_of_mode[z]`` selects the one
    used in mode ``z`` (one per mode normally, a single shared one for the
    no-automaton ablation). The residual input is the state, optionally
    followed by the inputs, the normalized carrier time ``(t mod T)/T`` and
    a per-mode feature vector.
    """

    def __init__(self, template: StateSpaceTemplate, phys: PhysParams | None = None,
                 layouts: Sequence[CompositionLayout] | CompositionLayout | None = None,
                 nets: Sequence[ResidualNet] = (), net_of_mode: Sequence[int] | None = None,
                 transition_map: TransitionMap | None = None, pwm=None,
                 use_input: bool = False, time_period: float | None = None,
                 mode_features=None):
        self.template = template
        self.phys = (phys or template.defaults).copy()
        if tuple(self.phys.names) != tuple(template.defaults.names):
            raise DimensionMismatch("parameter names do not match the template")
        Z, d = template.n_modes, template.n_states
        if layouts is None:
            layouts = CompositionLayout((0, d), (0, 0))
        if isinstance(layouts, CompositionLayout):
            layouts = [layouts] * Z
        self.layouts = list(layouts)
        if len(self.layouts) != Z:
            raise DimensionMismatch("need one layout per mode")
        for lay in self.layouts:
            lay.validate(d)
        self.nets = [n for n in nets]
        if net_of_mode is None:
            net_of_mode = list(range(Z)) if len(self.nets) == Z else [0] * Z
        self.net_of_mode = tuple(int(i) for i in net_of_mode)
        self.transition_map = transition_map if transition_map is not None else template.transition_map
        self.pwm = list(pwm) if pwm is not None else None
        self.use_input = bool(use_input)
        self.time_period = time_period
        self.mode_features = None if mode_features is None else np.asarray(mode_features, float)
        if self.transition_map is not None and self.transition_map.n_modes > Z:
            raise DimensionMismatch("transition map references unknown modes")
        for z, lay in enumerate(self.layouts):
            if lay.nn[1] == 0:
                continue
            if not self.nets:
                raise DimensionMismatch(f"mode {z} has neural rows but no network")
            net = self.nets[self.net_of_mode[z]]
            if net.n_out != lay.nn[1]:
                raise DimensionMismatch(f"network output width {net.n_out} != {lay.nn[1]} rows")
            if net.n_in != self.nn_input_width:
                raise DimensionMismatch(f"network input width {net.n_in} != {self.nn_input_width}")
        self._mats_key = None
        self._mats = None

    # -- shape helpers
    @property
    def n_modes(self):
        return self.template.n_modes

    @property
    def n_states(self):
        return self.template.n_states

    @property
    def n_inputs(self):
        return self.template.n_inputs

    @property
    def nn_input_width(self):
        q = 0 if self.mode_features is None else self.mode_features.shape[1]
        return (self.n_states + (self.n_inputs if self.use_input else 0)
                + (1 if self.time_period else 0) + q)

    @property
    def has_residual(self):
        return any(lay.nn[1] > 0 for lay in self.layouts)

    @property
    def has_physics(self):
        return any(lay.phys[1] > 0 for lay in self.layouts)

    def net_for(self, z):
        return self.nets[self.net_of_mode[z]] if self.layouts[z].nn[1] else None

    def copy(self) -> HybridModel:
        m = copy.copy(self)
        m.phys = self.phys.copy()
        m.nets = [n.copy() for n in self.nets]
        m.layouts = list(self.layouts)
        m._mats_key = None
        m._mats = None
        return m

    # -- physics
    def physics_matrices(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Row-masked ``(A_z, B_z)`` for every mode, cached on parameter values."""
        key = self.phys.values.tobytes()
        if key != self._mats_key:
            mats = []
            for z in range(self.n_modes):
                A, B = self.template.matrices(self.phys.values, z)
                mask = self.layouts[z].phys_mask(self.n_states)[:, None]
                mats.append((A * mask, B * mask))
            self._mats, self._mats_key = mats, key
        return self._mats

    def physics_derivatives(self):
        """Row-masked ``dA/dtheta``, ``dB/dtheta`` per mode."""
        out = []
        for z in range(self.n_modes):
            dA, dB = self.template.matrix_derivatives(self.phys.values, z)
            mask = self.layouts[z].phys_mask(self.n_states)[None, :, None]
            out.append((dA * mask, dB * mask))
        return out

    # -- flat parameter vector: [free physics params, net 0, net 1, ...]
    def param_slices(self) -> dict:
        s = {"phys": slice(0, len(self.phys))}
        o = len(self.phys)
        for i, n in enumerate(self.nets):
            s[f"net{i}"] = slice(o, o + n.n_params)
            o += n.n_params
        s["nn"] = slice(len(self.phys), o)
        return s

    @property
    def n_params(self):
        return len(self.phys) + sum(n.n_params for n in self.nets)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.phys.free()] + [n.theta for n in self.nets])

    def set_params(self, vec):
        vec = np.asarray(vec, float)
        if vec.shape != (self.n_params,):
            raise DimensionMismatch("parameter vector has the wrong length")
        sl = self.param_slices()
        self.phys.set_free(vec[sl["phys"]])
        for i, n in enumerate(self.nets):
            n.set_theta(vec[sl[f"net{i}"]])

    # -- residual input
    def nn_input(self, x, u, t, z):
        """Raw residual-net input for one mode; ``x``, ``u`` may be batched."""
        x = np.asarray(x, float)
        parts = [x]
        batch = x.shape[:-1]
        if self.use_input:
            parts.append(np.broadcast_to(np.asarray(u, float), batch + (self.n_inputs,)))
        if self.time_period:
            tf = np.mod(np.asarray(t, float) / self.time_period, 1.0)
            parts.append(np.broadcast_to(tf, batch)[..., None])
        if self.mode_features is not None:
            parts.append(np.broadcast_to(self.mode_features[z], batch + (self.mode_features.shape[1],)))
        return np.concatenate(parts, axis=-1) if len(parts) > 1 else x


# -- model construction ----------------------------------------------------------

def make_model(template: StateSpaceTemplate, scenario: str = "gray", hidden=(32,),
               nn_rows: tuple[int, int] | None = None, rng=None, phys: PhysParams | None = None,
               shared: bool = False, use_input: bool | None = None, time_period=None,
               gate_features: bool = False, pwm=None, scales: Mapping | None = None) -> HybridModel:
    """Assemble a model for one Sim-to-Real scenario.

    ``scales`` may hold ``x_center``, ``x_scale``, ``u_center``, ``u_scale``
    and ``dx_scale`` (per state); they fix the residual nets' input and
    output normalization. ``gate_features`` appends the switch word of the
    current mode to the net input (used with ``shared`` for the ablation
    without per-mode modules).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    d, m, Z = template.n_states, template.n_inputs, template.n_modes
    layout = CompositionLayout.for_scenario(scenario, d, nn_rows)
    if use_input is None:
        use_input = scenario == "black"
    scales = dict(scales or {})
    mode_features = None
    if gate_features:
        words = template.transition_map.word_of_mode()
        mode_features = np.array([words[z] for z in range(Z)], float)
    nets = []
    if layout.nn[1]:
        rows = layout.nn_rows
        center = [np.asarray(scales.get("x_center", np.zeros(d)), float)]
        scale = [np.asarray(scales.get("x_scale", np.ones(d)), float)]
        if use_input:
            center.append(np.asarray(scales.get("u_center", np.zeros(m)), float))
            scale.append(np.asarray(scales.get("u_scale", np.ones(m)), float))
        if time_period:
            center.append(np.array([0.5]))
            scale.append(np.array([0.5]))
        if mode_features is not None:
            center.append(np.full(mode_features.shape[1], 0.5))
            scale.append(np.full(mode_features.shape[1], 0.5))
        in_center = np.concatenate(center)
        in_scale = np.concatenate(scale)
        out_scale = np.asarray(scales.get("dx_scale", np.ones(d)), float)[rows]
        sizes = [in_center.size, *hidden, layout.nn[1]]
        n_nets = 1 if shared else Z
        nets = [ResidualNet.initialize(sizes, rng, in_center, in_scale, out_scale)
                for _ in range(n_nets)]
    return HybridModel(template, phys, layout, nets, [0] * Z if shared else None,
                       template.transition_map, pwm, use_input, time_period, mode_features)


# -- single-point evaluation --------------------------------------------------------

def _check_xu(model, x, u):
    x = np.asarray(x, float)
    u = np.zeros(model.n_inputs) if u is None else np.asarray(u, float)
    if x.shape != (model.n_states,) or u.shape != (model.n_inputs,):
        raise DimensionMismatch(f"expected x{(model.n_states,)} and u{(model.n_inputs,)}, "
                                f"got {x.shape} and {u.shape}")
    return x, u


def f_phy(x, u, theta, z, template: StateSpaceTemplate):
    """Unmasked physics term ``A_z(theta) x + B_z(theta) u``."""
    A, B = template.matrices(theta, z)
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.shape != (A.shape[0],) or u.shape != (B.shape[1],):
        raise DimensionMismatch("state/input size does not match template")
    return A @ x + B @ u


def f_nn(x, t, net: ResidualNet, u=None, model: HybridModel | None = None, z: int = 0):
    """Residual-net output; with ``model`` the full feature vector is assembled."""
    inp = model.nn_input(x, u, t, z) if model is not None else np.asarray(x, float)
    return net(inp)


def vector_field(x, u, t, model: HybridModel, z: int):
    x, u = _check_xu(model, x, u)
    if not 0 <= z < model.n_modes:
        raise DimensionMismatch(f"mode {z} not in model")
    A, B = model.physics_matrices()[z]
    dx = A @ x + B @ u
    lay = model.layouts[z]
    if lay.nn[1]:
        dx[lay.nn_rows] += model.net_for(z)(model.nn_input(x, u, t, z))
    return dx


def jac_x(x, u, t, model: HybridModel, z: int):
    """Exact state Jacobian of :func:`vector_field` (ReLU derivative 0 at 0)."""
    x, u = _check_xu(model, x, u)
    A, _ = model.physics_matrices()[z]
    J = A.copy()
    lay = model.layouts[z]
    if lay.nn[1]:
        Jn = model.net_for(z).jacobian(model.nn_input(x, u, t, z))
        J[lay.nn_rows] += Jn[:, :model.n_states]
    return J
