"""Adam, physics pre-training, joint training, hyperparameter search and the
staged training pipeline.

Training data are :class:`~penode.gradients.GridBatch` objects (one row per
window). Parameters are optimized as the model's flat vector, so physics
parameters flagged positive are updated in log space and stay positive.
"""
from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dynamics import CompositionLayout, HybridModel, make_model
from .errors import Diverged, NonFiniteGradient
from .gradients import ENGINES, GridBatch, LossReport, evaluate_loss, predict

log = logging.getLogger(__name__)

# Hyperparameter search space: learning rate and L2 log-uniform, the rest discrete.
SEARCH_SPACE = {
    "lr": ("loguniform", 1e-5, 1e-2),
    "batch_size": ("choice", (16, 32, 64, 128, 256)),
    "layers": ("int", 1, 4),
    "neurons": ("logint", 16, 256),
    "l2": ("loguniform", 1e-6, 1e-3),
}


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = 15
    iterations: int = 1500          # cap on optimizer steps per joint-training run
    lr: float = 1e-3
    batch_size: int = 32
    layers: int = 1
    neurons: int = 32
    l2: float = 1e-5
    engine: str = "adjoint"
    scenario: str = "gray"
    refine_tol: float = 1e-4        # relative validation improvement
    refine_rounds: int = 3
    # physics pre-training
    pretrain_lr: float = 1e-2
    pretrain_epochs: int = 300
    pretrain_patience: int = 30
    anchor: float = 0.0             # optional pull of physics params toward their start values
    search_budget: int = 0
    search_epochs: int = 100
    nn_rows: tuple | None = None
    use_input: bool | None = None
    shared_net: bool = False        # single residual net for all modes
    plateau: int = 0                # epochs without improvement before the lr drops (0: never)
    plateau_factor: float = 0.1
    max_drops: int = 2
    lr_schedule: str = "constant"   # "cosine": decay to zero over max_epochs
    gate_features: bool = False
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown gradient engine {self.engine!r}")
        if self.scenario not in ("white", "gray", "black"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.nn_rows is not None:
            self.nn_rows = tuple(int(v) for v in self.nn_rows)

    @property
    def hidden(self) -> tuple[int, ...]:
        return (int(self.neurons),) * int(self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["nn_rows"] is not None:
            d["nn_rows"] = list(d["nn_rows"])
        return d

    @classmethod
    def from_dict(cls, d) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training keys {sorted(extra)}")
        return cls(**d)


# -- optimizer ---------------------------------------------------------------------

@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n, lr=1e-3, **kw) -> OptimState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(opt: OptimState, params, grads):
    """One bias-corrected Adam update; mutates the moments in ``opt``."""
    params = np.asarray(params, float)
    g = np.asarray(grads, float)
    if params.shape != g.shape or g.shape != opt.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    mhat = opt.m / (1.0 - opt.beta1 ** opt.step)
    vhat = opt.v / (1.0 - opt.beta2 ** opt.step)
    return params - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)


# -- helpers ---------------------------------------------------------------------------

def physics_only(model: HybridModel) -> HybridModel:
    """White-box copy of ``model`` (residual rows switched off)."""
    d = model.n_states
    layouts = [CompositionLayout(lay.phys if lay.phys[1] else (0, d), (0, 0)) for lay in model.layouts]
    return HybridModel(model.template, model.phys, layouts, [], None, model.transition_map,
                       model.pwm, False, None, None)


def regularized_gradient(model, batch, cfg: TrainConfig, anchor_to=None):
    """Loss report and gradient including the L2 penalty on the residual nets."""
    report, g, _ = ENGINES[cfg.engine](model, batch)
    theta = model.get_params()
    nn = model.param_slices()["nn"]
    pen = cfg.l2 * float(np.dot(theta[nn], theta[nn]))
    g = g.copy()
    g[nn] += 2.0 * cfg.l2 * theta[nn]
    if cfg.anchor and anchor_to is not None:
        ph = model.param_slices()["phys"]
        diff = theta[ph] - anchor_to
        pen += cfg.anchor * float(np.dot(diff, diff))
        g[ph] += 2.0 * cfg.anchor * diff
    report = LossReport(report.mse, report.per_channel, pen)
    return report, g


def _loss_floor(batch: GridBatch) -> float:
    # divergence is judged relative to the data power when the start is already exact
    return 1e-6 * float(np.mean(batch.obs ** 2)) + 1e-300


def stage_rng(seed: int, stage: str, rnd: int = 0) -> np.random.Generator:
    """Independent generator per pipeline stage, so a resumed run replays
    later stages exactly."""
    code = int.from_bytes(stage.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([int(seed), code, int(rnd)])


# -- physics pre-training --------------------------------------------------------------

@dataclass
class PretrainReport:
    values: np.ndarray
    history: list
    best_loss: float
    fisher_eigvals: np.ndarray
    rank: int
    nonidentifiable: list = field(default_factory=list)


def fisher_information(model: HybridModel, batch: GridBatch, rel_step: float = 1e-6):
    """Gauss-Newton information matrix ``J^T J`` of the predictions with
    respect to the free physics parameters (central differences)."""
    base = physics_only(model)
    p0 = base.phys.free()
    cols = []
    for i in range(p0.size):
        step = rel_step * max(1.0, abs(p0[i]))
        out = []
        for s in (step, -step):
            m = base.copy()
            v = p0.copy()
            v[i] += s
            m.phys.set_free(v)
            out.append(predict(m, batch).ravel())
        cols.append((out[0] - out[1]) / (2 * step))
    J = np.stack(cols, axis=1)
    return J.T @ J


def identifiability(model: HybridModel, batch: GridBatch, rtol: float = 1e-8):
    """Numerical rank of the information matrix and the parameter groups
    spanning its (near) null space."""
    F = fisher_information(model, batch)
    w, V = np.linalg.eigh(F)
    top = max(w[-1], 0.0)
    small = w <= rtol * top
    names = model.phys.names
    groups = []
    for k in np.flatnonzero(small):
        vec = V[:, k]
        members = [names[i] for i in np.flatnonzero(np.abs(vec) > 0.1 * np.abs(vec).max())]
        groups.append(members)
    return w, int(np.sum(~small)), groups


def pretrain_physics(model: HybridModel, train: GridBatch, cfg: TrainConfig,
                     check_identifiability: bool = True) -> PretrainReport:
    """Fit the physics parameters alone (residual off) by full-batch Adam.

    Returns the arg-min snapshot; ``model`` itself is not modified.
    """
    work = physics_only(model)
    p = work.phys.free().copy()
    start = p.copy()
    opt = OptimState.create(p.size, cfg.pretrain_lr)
    best, best_p = math.inf, p.copy()
    first = None
    history = []
    stale = 0
    for epoch in range(cfg.pretrain_epochs):
        work.phys.set_free(p)
        try:
            report, g, _ = ENGINES[cfg.engine](work, train)
        except NonFiniteGradient as exc:
            raise Diverged(f"non-finite gradient in physics pre-training at epoch {epoch}") from exc
        g = g[: p.size]
        if cfg.anchor:
            g = g + 2.0 * cfg.anchor * (p - start)
        loss = report.mse
        if first is None:
            first = loss
        if not math.isfinite(loss) or loss > 1e3 * max(first, _loss_floor(train)):
            raise Diverged(f"physics pre-training diverged at epoch {epoch} (loss {loss!r})")
        history.append(loss)
        if loss < best:
            best, best_p = loss, p.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.pretrain_patience:
                break
        p = adam_step(opt, p, g)
    work.phys.set_free(best_p)
    if check_identifiability:
        w, rank, groups = identifiability(work, train)
    else:
        w, rank, groups = np.array([]), len(best_p), []
    if groups:
        log.warning("parameters not identifiable from the data: %s", groups)
    return PretrainReport(work.phys.values.copy(), history, best, w, rank, groups)


# -- joint training -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    per_channel: list
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    model: HybridModel
    best_val: float
    best_epoch: int
    history: list
    steps: int


def joint_train(model: HybridModel, train: GridBatch, val: GridBatch, cfg: TrainConfig,
                rng: np.random.Generator, callback: Callable | None = None) -> TrainResult:
    """Adam on all parameters with early stopping on validation MSE.

    Returns the best-validation snapshot (``model`` is left untouched).
    """
    work = model.copy()
    theta = work.get_params()
    anchor_to = theta[work.param_slices()["phys"]].copy()
    opt = OptimState.create(theta.size, cfg.lr)
    best_val = evaluate_loss(work, val).mse
    best_theta, best_epoch = theta.copy(), 0
    init_train = None
    history = []
    t_start = time.perf_counter()
    W = train.n_windows
    bs = max(1, min(int(cfg.batch_size), W))
    steps = 0
    last_drop, drops = 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(W)
        tot, tot_ch, n = 0.0, 0.0, 0
        for s in range(0, W, bs):
            if steps >= cfg.iterations:
                break
            idx = np.sort(order[s:s + bs])
            sub = train.subset(idx)
            work.set_params(theta)
            try:
                report, g = regularized_gradient(work, sub, cfg, anchor_to)
            except NonFiniteGradient as exc:
                raise Diverged(f"non-finite gradient at epoch {epoch}") from exc
            if init_train is None:
                init_train = report.mse
            if not math.isfinite(report.mse) or report.mse > 1e3 * max(init_train, _loss_floor(sub)):
                raise Diverged(f"training loss blew up at epoch {epoch} ({report.mse!r})")
            theta = adam_step(opt, theta, g)
            steps += 1
            tot += report.mse * idx.size
            tot_ch = tot_ch + report.per_channel * idx.size
            n += idx.size
        if n == 0:
            break
        work.set_params(theta)
        val_mse = evaluate_loss(work, val).mse
        if not math.isfinite(val_mse):
            raise Diverged(f"validation loss not finite at epoch {epoch}")
        rec = EpochRecord(epoch, tot / n, val_mse, list(np.asarray(tot_ch) / n), opt.lr,
                          time.perf_counter() - t_start)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if val_mse < best_val:
            best_val, best_theta, best_epoch = val_mse, theta.copy(), epoch
        stale = epoch - max(best_epoch, last_drop)
        if cfg.plateau and stale >= cfg.plateau and drops < cfg.max_drops:
            # restart from the best iterate with a smaller step
            theta = best_theta.copy()
            opt.lr *= cfg.plateau_factor
            drops, last_drop = drops + 1, epoch
        elif stale >= cfg.patience:
            break
        if steps >= cfg.iterations:
            break
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.max_epochs)) * cfg.plateau_factor ** drops
    work.set_params(best_theta)
    return TrainResult(work, best_val, best_epoch, history, steps)


# -- hyperparameter search ------------------------------------------------------------

class RandomSearch:
    """Independent draws from the search space."""

    def __init__(self, space=None):
        self.space = dict(space or SEARCH_SPACE)

    def propose(self, rng: np.random.Generator, trials: Sequence) -> dict:
        out = {}
        for key, spec in self.space.items():
            kind = spec[0]
            if kind == "loguniform":
                out[key] = float(math.exp(rng.uniform(math.log(spec[1]), math.log(spec[2]))))
            elif kind == "choice":
                out[key] = spec[1][int(rng.integers(len(spec[1])))]
            elif kind == "int":
                out[key] = int(rng.integers(spec[1], spec[2] + 1))
            elif kind == "logint":
                v = math.exp(rng.uniform(math.log(spec[1]), math.log(spec[2] + 1)))
                out[key] = int(min(spec[2], max(spec[1], math.floor(v))))
            else:
                raise ValueError(f"unknown search dimension kind {kind!r}")
        return out


@dataclass
class Trial:
    params: dict
    val_loss: float


def hyperparam_search(objective: Callable[[dict], float], budget: int, rng: np.random.Generator,
                      strategy=None) -> tuple[dict, list[Trial]]:
    """Minimize ``objective`` over ``budget`` proposals; returns the best
    parameters and the trial log. Diverging trials score ``inf``."""
    strategy = strategy or RandomSearch()
    trials: list[Trial] = []
    for _ in range(max(1, int(budget))):
        params = strategy.propose(rng, trials)
        try:
            loss = float(objective(params))
        except Diverged:
            loss = math.inf
        trials.append(Trial(params, loss))
    best = min(trials, key=lambda t: (t.val_loss, trials.index(t)))
    return best.params, trials


# -- pipeline ------------------------------------------------------------------------------

def build_model(template, cfg: TrainConfig, rng, phys=None, scales=None, pwm=None) -> HybridModel:
    return make_model(template, cfg.scenario, hidden=cfg.hidden, nn_rows=cfg.nn_rows, rng=rng,
                      phys=phys, shared=cfg.shared_net, use_input=cfg.use_input,
                      gate_features=cfg.gate_features, pwm=pwm, scales=scales)


def data_scales(batch: GridBatch) -> dict:
    """Normalization constants for residual nets from training data."""
    X = np.concatenate([batch.x0, batch.obs.reshape(-1, batch.obs.shape[-1])])
    dt = batch.h * batch.substeps
    full = np.concatenate([batch.x0[:, None], batch.obs], axis=1)
    dX = np.diff(full, axis=1).reshape(-1, X.shape[1]) / dt

    def safe(s):
        s = np.asarray(s, float)
        return np.where(s > 0, s, 1.0)

    return {"x_center": X.mean(axis=0), "x_scale": safe(X.std(axis=0)),
            "u_center": batch.u.mean(axis=0), "u_scale": safe(batch.u.std(axis=0)),
            "dx_scale": safe(dX.std(axis=0))}


@dataclass
class PipelineState:
    """Everything needed to resume the pipeline after a completed stage."""
    stage: str = "start"
    round: int = 0
    config: dict = field(default_factory=dict)
    phys_values: list | None = None
    best_val: float | None = None
    history: list = field(default_factory=list)
    model: HybridModel | None = None


def run_pipeline(template, train: GridBatch, val: GridBatch, cfg: TrainConfig, *,
                 state: PipelineState | None = None, checkpoint: Callable | None = None,
                 epoch_log: Callable | None = None, pwm=None, scales=None) -> PipelineState:
    """Physics pre-training, hyperparameter search, joint training and
    refinement rounds. ``checkpoint(state)`` is called after every stage;
    passing a saved state back in resumes from it."""
    state = state or PipelineState(config=cfg.to_dict())
    scales = scales or data_scales(train)
    stages = ["start", "pretrain", "round"]

    if state.stage == "start":
        phys = template.defaults.copy()
        if cfg.scenario != "black":
            probe = build_model(template, replace(cfg, scenario="white"), stage_rng(cfg.seed, "init"), phys, scales, pwm)
            rep = pretrain_physics(probe, train, cfg)
            phys.values = rep.values.copy()
            state.history.append({"stage": "pretrain", "loss": rep.best_loss, "rank": rep.rank,
                                  "nonidentifiable": rep.nonidentifiable})
        state.phys_values = phys.values.tolist()
        state.stage = "pretrain"
        if checkpoint:
            checkpoint(state)

    phys = template.defaults.copy()
    phys.values = np.array(state.phys_values, float)
    while state.stage in stages and (state.round < max(1, cfg.refine_rounds)):
        rnd = state.round
        base = TrainConfig.from_dict(state.config)
        if cfg.search_budget > 0 and cfg.scenario != "white":
            start_model = state.model

            def objective(params, rnd=rnd, start_model=start_model):
                tcfg = replace(base, **params, max_epochs=cfg.search_epochs)
                m = _round_model(template, tcfg, rnd, phys, scales, pwm, start_model)
                return joint_train(m, train, val, tcfg, stage_rng(cfg.seed, "trial", rnd)).best_val

            best, trials = hyperparam_search(objective, cfg.search_budget, stage_rng(cfg.seed, "search", rnd))
            base = replace(base, **best)
            state.config = base.to_dict()
            state.history.append({"stage": "search", "round": rnd, "best": best,
                                  "trials": [{"params": t.params, "val": t.val_loss} for t in trials]})
        model = _round_model(template, base, rnd, phys, scales, pwm, state.model)
        res = joint_train(model, train, val, base, stage_rng(cfg.seed, "joint", rnd), epoch_log)
        state.history.append({"stage": "joint", "round": rnd, "best_val": res.best_val,
                              "best_epoch": res.best_epoch, "steps": res.steps})
        prev = state.best_val
        improved = prev is None or res.best_val < prev
        if improved:
            state.model = res.model
            state.best_val = res.best_val
        state.round += 1
        done = (prev is not None and (prev - res.best_val) < cfg.refine_tol * abs(prev))
        if done or state.round >= cfg.refine_rounds:
            state.stage = "done"
        else:
            state.stage = "round"
        if checkpoint:
            checkpoint(state)
    return state


def _round_model(template, cfg, rnd, phys, scales, pwm, previous):
    """Fresh network when the architecture changed, else continue from the
    previous round's best model."""
    if previous is not None and _arch(previous) == (cfg.hidden, cfg.scenario):
        return previous.copy()
    return build_model(template, cfg, stage_rng(cfg.seed, "init", rnd), phys, scales, pwm)


def _arch(model: HybridModel):
    if not model.nets:
        return ((), "white") if model.has_physics else ((), "black")
    sizes = tuple(model.nets[0].sizes[1:-1])
    return sizes, ("gray" if model.has_physics else "black")


def refine(model: HybridModel, train: GridBatch, val: GridBatch, cfg: TrainConfig,
           retrain: Callable | None = None) -> HybridModel:
    """Repeat training rounds until the relative validation improvement is
    below ``cfg.refine_tol`` or ``cfg.refine_rounds`` rounds have run.

    ``retrain(model, round)`` returns a new candidate model; by default it
    continues joint training from the current best.
    """
    if cfg.refine_rounds <= 0:
        return model
    best = model
    best_val = evaluate_loss(model, val).mse
    for rnd in range(cfg.refine_rounds):
        if retrain is None:
            cand = joint_train(best, train, val, cfg, stage_rng(cfg.seed, "refine", rnd)).model
        else:
            cand = retrain(best, rnd)
        val_loss = evaluate_loss(cand, val).mse
        gain = best_val - val_loss
        if val_loss < best_val:
            best, best_val = cand, val_loss
        if gain < cfg.refine_tol * abs(best_val + max(gain, 0.0)):
            break
    return best
