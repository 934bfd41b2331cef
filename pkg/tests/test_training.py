import math

import numpy as np
import pytest

from penode import (HybridModel, PhysParams, StateSpaceTemplate, buck_template, make_model,
                    single_switch_map)
from penode.errors import Diverged
from penode.gradients import GridBatch, predict
from penode.training import (OptimState, PipelineState, RandomSearch, TrainConfig, adam_step,
                             build_model, data_scales, hyperparam_search, identifiability,
                             joint_train, pretrain_physics, refine, run_pipeline, stage_rng)

T = 1e-5


def buck_batch(model, n_windows=6, samples=20, periods=2, seed=0):
    """Windows of exact RK4 data: gate ON for the first 40% of each period."""
    rng = np.random.default_rng(seed)
    n = samples * periods
    on = (np.arange(n) % samples) < int(0.4 * samples)
    modes = np.tile(np.where(on, 0, 1), (n_windows, 1))
    x0 = np.column_stack([rng.uniform(0.5, 2.0, n_windows), rng.uniform(3.0, 6.0, n_windows)])
    u = rng.uniform(10.0, 14.0, (n_windows, 1))
    b = GridBatch(T / samples, 1, np.zeros(n_windows), x0, u, modes, np.zeros((n_windows, n, 2)))
    b.obs = predict(model, b)
    return b


# -- optimizer -----------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    opt = OptimState.create(3, lr=0.1)
    p = adam_step(opt, np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    np.testing.assert_allclose(p, [-0.1, 0.1, -0.1], rtol=1e-4)
    assert opt.step == 1


def test_adam_constant_gradient_moves_linearly():
    opt = OptimState.create(2, lr=0.01)
    p = np.zeros(2)
    g = np.array([3.0, -4.0])
    for _ in range(50):
        p = adam_step(opt, p, g)
    np.testing.assert_allclose(p, [-0.5, 0.5], rtol=1e-6)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(OptimState.create(2), np.zeros(2), np.zeros(3))


# -- configuration -------------------------------------------------------------

def test_train_config_roundtrip_and_validation():
    cfg = TrainConfig(nn_rows=[0, 1], neurons=8, layers=2)
    assert cfg.hidden == (8, 8)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    with pytest.raises(ValueError):
        TrainConfig(engine="forward")
    with pytest.raises(ValueError):
        TrainConfig(scenario="grey")


def test_stage_rng_independent_and_reproducible():
    a = stage_rng(3, "joint", 1).random(4)
    np.testing.assert_array_equal(a, stage_rng(3, "joint", 1).random(4))
    assert not np.array_equal(a, stage_rng(3, "joint", 2).random(4))
    assert not np.array_equal(a, stage_rng(3, "init", 1).random(4))


# -- physics pre-training ---------------------------------------------------------

def test_pretrain_recovers_inductance():
    truth = make_model(buck_template(), "white")
    batch = buck_batch(truth)
    start = truth.phys.with_values(L=truth.phys.values[0] * 1.2)
    model = make_model(buck_template(), "white", phys=start)
    rep = pretrain_physics(model, batch, TrainConfig(pretrain_lr=1e-2, pretrain_epochs=400,
                                                     pretrain_patience=50))
    assert abs(rep.values[0] / truth.phys.values[0] - 1.0) < 0.02
    assert rep.best_loss < rep.history[0]
    assert rep.rank == 3 and rep.nonidentifiable == []
    # the input model is untouched
    assert model.phys.values[0] == pytest.approx(truth.phys.values[0] * 1.2)


def rc_template():
    def build(p, z):
        tau = p["R"] * p["C"]
        return [[-1.0 / tau]], [[1.0 / tau]]
    params = PhysParams(("R", "C"), [10.0, 1e-6], [True, True])
    tmap = single_switch_map()
    return StateSpaceTemplate("rc", ("v",), ("u",), 2, params, build, tmap)


def test_product_pair_flagged_nonidentifiable():
    model = HybridModel(rc_template())
    b = GridBatch(1e-6, 1, np.zeros(2), np.array([[0.0], [1.0]]), np.array([[1.0], [2.0]]),
                  np.zeros((2, 30), int), np.zeros((2, 30, 1)))
    b.obs = predict(model, b) + 0.01
    w, rank, groups = identifiability(model, b)
    assert rank == 1
    assert groups == [["R", "C"]]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_is_reported():
    truth = make_model(buck_template(), "white")
    batch = buck_batch(truth)
    with pytest.raises(Diverged):
        pretrain_physics(truth, batch, TrainConfig(pretrain_lr=50.0, pretrain_epochs=50),
                         check_identifiability=False)


# -- joint training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def gray_setup():
    truth = make_model(buck_template(), "white")
    train = buck_batch(truth, n_windows=8, seed=1)
    val = buck_batch(truth, n_windows=4, seed=2)
    cfg = TrainConfig(scenario="gray", neurons=8, max_epochs=6, batch_size=4, engine="backprop",
                      lr=1e-3, patience=50)
    return truth, train, val, cfg


def test_joint_train_deterministic(gray_setup):
    truth, train, val, cfg = gray_setup
    runs = []
    for _ in range(2):
        m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
        runs.append(joint_train(m, train, val, cfg, stage_rng(0, "joint")))
    np.testing.assert_array_equal(runs[0].model.get_params(), runs[1].model.get_params())
    assert [r.val_mse for r in runs[0].history] == [r.val_mse for r in runs[1].history]


def test_joint_train_returns_best_snapshot(gray_setup):
    _, train, val, cfg = gray_setup
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    res = joint_train(m, train, val, cfg, stage_rng(0, "joint"))
    vals = [r.val_mse for r in res.history]
    assert res.best_val == pytest.approx(min(vals + [res.best_val]))
    from penode.gradients import evaluate_loss
    assert evaluate_loss(res.model, val).mse == pytest.approx(res.best_val, rel=1e-12)


def test_early_stopping_after_patience(gray_setup):
    _, train, val, cfg = gray_setup
    cfg = TrainConfig(**{**cfg.to_dict(), "lr": 0.0, "patience": 3, "max_epochs": 40})
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    res = joint_train(m, train, val, cfg, stage_rng(0, "joint"))
    # the log-space round trip of the physics parameters may count as one tiny improvement
    assert res.best_epoch <= 1 and len(res.history) == res.best_epoch + 3


def test_iteration_cap(gray_setup):
    _, train, val, cfg = gray_setup
    cfg = TrainConfig(**{**cfg.to_dict(), "iterations": 5})
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    assert joint_train(m, train, val, cfg, stage_rng(0, "joint")).steps == 5


def test_plateau_drops_learning_rate(gray_setup):
    _, train, val, cfg = gray_setup
    cfg = TrainConfig(**{**cfg.to_dict(), "lr": 0.0, "plateau": 2, "max_drops": 1, "patience": 3,
                         "max_epochs": 40})
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    res = joint_train(m, train, val, cfg, stage_rng(0, "joint"))
    # two stale epochs, one drop, then three more before stopping
    assert len(res.history) == res.best_epoch + 5
    assert res.history[-1].lr == 0.0


def test_cosine_schedule(gray_setup):
    _, train, val, cfg = gray_setup
    cfg = TrainConfig(**{**cfg.to_dict(), "lr": 1e-3, "lr_schedule": "cosine", "max_epochs": 4,
                         "patience": 10})
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    lrs = [r.lr for r in joint_train(m, train, val, cfg, stage_rng(0, "joint")).history]
    # epoch e runs at lr * (1 + cos(pi (e - 1) / E)) / 2
    np.testing.assert_allclose(lrs, [1e-3, 1e-3 * (2 + 2 ** 0.5) / 4, 5e-4, 1e-3 * (2 - 2 ** 0.5) / 4],
                               rtol=1e-12)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_refine_edge_cases(gray_setup):
    _, train, val, cfg = gray_setup
    m = build_model(buck_template(), cfg, stage_rng(0, "init"), scales=data_scales(train))
    assert refine(m, train, val, TrainConfig(**{**cfg.to_dict(), "refine_rounds": 0})) is m
    calls = []

    def retrain(model, rnd):
        calls.append(rnd)
        out = model.copy()
        out.set_params(model.get_params() * 0.999)
        return out

    refine(m, train, val, TrainConfig(**{**cfg.to_dict(), "refine_rounds": 5, "refine_tol": 1e9}),
           retrain)
    assert calls == [0]


# -- hyperparameter search -------------------------------------------------------------

def test_random_search_respects_space():
    rs = RandomSearch()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rs.propose(rng, [])
        assert 1e-5 <= p["lr"] <= 1e-2 and p["batch_size"] in (16, 32, 64, 128, 256)
        assert 1 <= p["layers"] <= 4
        assert 16 <= p["neurons"] <= 256


def test_hyperparam_search_picks_minimum_and_scores_divergence():
    space = {"x": ("int", 0, 9)}

    def objective(p):
        if p["x"] == 0:
            raise Diverged("boom")
        return (p["x"] - 4) ** 2

    best, trials = hyperparam_search(objective, 40, np.random.default_rng(1), RandomSearch(space))
    assert best == {"x": 4}
    assert all(math.isinf(t.val_loss) for t in trials if t.params["x"] == 0)


# -- pipeline -------------------------------------------------------------------------------

def test_pipeline_resume_matches_uninterrupted(gray_setup):
    _, train, val, cfg = gray_setup
    cfg = TrainConfig(**{**cfg.to_dict(), "refine_rounds": 2, "pretrain_epochs": 20,
                         "max_epochs": 3})
    full = run_pipeline(buck_template(), train, val, cfg)
    saved = []
    run_pipeline(buck_template(), train, val, cfg,
                 checkpoint=lambda s: saved.append(PipelineState(**{**s.__dict__,
                                                                    "model": s.model and s.model.copy()})))
    assert [s.stage for s in saved] == ["pretrain", "round", "done"]
    resumed = run_pipeline(buck_template(), train, val, cfg, state=saved[1])
    assert resumed.stage == "done"
    np.testing.assert_array_equal(resumed.model.get_params(), full.model.get_params())
