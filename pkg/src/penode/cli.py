"""Command-line entry point: ``penode <command> [options]``.

Commands: generate, train, eval, bench, export, import, conformance.
Exit codes: 0 success, 2 configuration, 3 data, 4 numeric failure,
5 file/I-O, 1 anything else raised by the library.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .automaton import build_schedule, gate_word
from .datasets import (Dataset, OperatingPoint, PlantSpec, averaged_equilibrium, cluster_by_switching,
                       denoise, generate, read_dataset, split, subsample, write_dataset)
from .deploy import prune_magnitude, quantize, quantized_infer, relative_l2
from .dynamics import HybridModel, make_template
from .errors import ConfigError, DataError, NumericError, PenodeError
from .gradients import GridBatch, evaluate_loss, predict
from .modelfile import export_model, import_model
from .solvers import SolverConfig, dopri5_integrate, event_driven_solve, hybrid_integrate
from .training import PipelineState, TrainConfig, physics_only, run_pipeline

log = logging.getLogger("penode")


# -- shared helpers -------------------------------------------------------------------

def sample_conditions(cond: dict, seed: int) -> list[OperatingPoint]:
    rng = np.random.default_rng(cond.get("seed", seed))
    n = int(cond.get("n_conditions", 1))
    out = []
    for _ in range(n):
        inputs = tuple(rng.uniform(lo, hi) for lo, hi in cond["inputs"])
        duties = tuple(rng.uniform(lo, hi) for lo, hi in cond["duty"])
        phases = tuple(rng.uniform(lo, hi) for lo, hi in cond.get("phase", [])) or (0.0,) * len(duties)
        out.append(OperatingPoint(inputs, duties, phases))
    return out


def plant_from(cfg: dict, seed_offset: int = 0) -> PlantSpec:
    p = dict(cfg["plant"])
    noise = p.pop("noise", 0.0)
    return PlantSpec(noise=tuple(noise) if isinstance(noise, list) else noise,
                     seed=int(cfg["seed"]) + seed_offset, **p)


def sim_template(cfg: dict):
    """Nominal (simulator) template the model starts from."""
    name = cfg["model"].get("template", cfg["plant"]["template"])
    tpl = make_template(name)
    params = cfg["model"].get("params", {})
    for k in params:
        if k not in tpl.defaults.names:
            raise ConfigError(f"model.params: template {name!r} has no parameter {k!r}")
    if params:
        tpl.defaults.values[:] = tpl.defaults.with_values(**params).values
        tpl.defaults.nominal[:] = tpl.defaults.values
    return tpl


def batch_of(ds: Dataset, substeps: int = 1) -> GridBatch:
    if len(ds) == 0:
        raise DataError("empty dataset split")
    try:
        return GridBatch.from_windows(ds.windows, substeps)
    except PenodeError:
        raise
    except Exception as exc:
        raise DataError(f"cannot batch windows: {exc}") from exc


def preprocess(ds: Dataset, pre: dict):
    """Denoise, split (cluster-stratified) and subsample. Returns the three
    splits, the raw test split and the split indices."""
    idx = list(range(len(ds)))
    for i, w in enumerate(ds.windows):
        w.info["index"] = i
    tr, va, te = split(ds, tuple(pre["ratios"]), pre["split_seed"])
    if pre.get("fraction", 1.0) < 1.0:
        tr = subsample(tr, pre["fraction"], pre["split_seed"])
    method = pre.get("denoise", "median")

    def clean(d):
        if method == "none":
            return d
        w = [denoise(x, pre.get("window", 3), method) for x in d.windows]
        return Dataset(w, d.metadata, d.tags)

    indices = {name: [w.info["index"] for w in d.windows] for name, d in (("train", tr), ("val", va), ("test", te))}
    del idx
    return clean(tr), clean(va), te, indices


def _train_config(cfg: dict, args) -> TrainConfig:
    t = dict(cfg["train"])
    if getattr(args, "scenario", None):
        t["scenario"] = args.scenario
    if getattr(args, "engine", None):
        t["engine"] = args.engine
    if getattr(args, "no_ea", False):
        t["shared_net"] = True
        t["gate_features"] = True
    t["seed"] = int(cfg["seed"])
    try:
        return TrainConfig.from_dict(t)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands -----------------------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path, args=None) -> Path:
    plant = plant_from(cfg)
    conds = sample_conditions(cfg["conditions"], cfg["seed"])
    ds = generate(plant, conds, cfg["conditions"].get("n_windows", 100))
    write_dataset(ds, out / "data")
    n_ood = 0
    if "ood" in cfg:
        ood_plant = plant_from(cfg, seed_offset=1_000_003)
        oc = sample_conditions(cfg["ood"], cfg["seed"] + 1)
        od = generate(ood_plant, oc, cfg["ood"].get("n_windows", 50))
        write_dataset(od, out / "ood")
        n_ood = len(od)
    cfgmod.write_stamp(out, cfg, "generate", {"n_windows": len(ds), "n_ood": n_ood})
    log.info("wrote %d windows (%d out-of-domain) to %s", len(ds), n_ood, out)
    return out


def _save_checkpoint(run: Path, state: PipelineState, template):
    ck = run / "checkpoint"
    ck.mkdir(parents=True, exist_ok=True)
    if state.model is not None:
        export_model(state.model, ck / "model.pen")
    doc = {"stage": state.stage, "round": state.round, "config": state.config,
           "phys_values": state.phys_values, "best_val": state.best_val,
           "history": json.loads(json.dumps(state.history, default=float)),
           "has_model": state.model is not None}
    tmp = ck / "state.yaml.tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    tmp.replace(ck / "state.yaml")


def _load_checkpoint(run: Path):
    ck = run / "checkpoint" / "state.yaml"
    if not ck.exists():
        return None
    with open(ck) as fh:
        doc = yaml.safe_load(fh)
    model = import_model(run / "checkpoint" / "model.pen") if doc.pop("has_model") else None
    return PipelineState(model=model, **doc)


class _StopAfter(Exception):
    pass


def cmd_train(cfg: dict, data_dir: Path, out: Path, args=None) -> Path:
    tcfg = _train_config(cfg, args)
    ds = read_dataset(data_dir)
    tr, va, te, indices = preprocess(ds, cfg["preprocess"])
    btr, bva, bte = (batch_of(d, tcfg.substeps) for d in (tr, va, te))
    template = sim_template(cfg)
    resume = bool(getattr(args, "resume", False))
    state = _load_checkpoint(out) if resume else None
    if state is not None and state.stage == "done":
        log.info("run already complete")
    cfgmod.write_stamp(out, cfg, "train", {"data": str(data_dir), "scenario": tcfg.scenario,
                                           "engine": tcfg.engine})
    with open(out / "split.yaml", "w") as fh:
        yaml.safe_dump({"data": str(data_dir), **indices}, fh)
    log_path = out / "epoch_log.csv"
    d = btr.obs.shape[-1]
    header = ["round", "epoch", "train_mse", "val_mse"] + [f"mse_x{i + 1}" for i in range(d)] + ["lr", "wall_time"]
    start_round = state.round if state is not None else 0
    rows = []
    if resume and log_path.exists():
        with open(log_path) as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) < start_round]
    _write_csv(log_path, header, rows)
    log_fh = open(log_path, "a", newline="")
    writer = csv.writer(log_fh, lineterminator="\n")
    current = {"round": start_round}
    stop_after = getattr(args, "stop_after", None)
    n_ck = {"n": 0}

    def on_epoch(rec):
        writer.writerow([current["round"], rec.epoch, repr(rec.train_mse), repr(rec.val_mse)]
                        + [repr(float(v)) for v in rec.per_channel] + [repr(rec.lr), f"{rec.wall_time:.3f}"])
        log_fh.flush()

    def on_checkpoint(st):
        _save_checkpoint(out, st, template)
        current["round"] = st.round
        n_ck["n"] += 1
        if stop_after is not None and n_ck["n"] >= stop_after:
            raise _StopAfter()

    try:
        state = run_pipeline(template, btr, bva, tcfg, state=state, checkpoint=on_checkpoint,
                             epoch_log=on_epoch)
    except _StopAfter:
        log.info("stopped after %d checkpoint(s) as requested", n_ck["n"])
        return out
    except PenodeError as exc:
        stage = "pipeline"
        ck = _load_checkpoint(out)
        if ck is not None:
            stage = f"after stage {ck.stage!r} (round {ck.round})"
        exc.args = (f"[train {stage}] {exc}",)
        raise
    finally:
        log_fh.close()
    model = state.model
    export_model(model, out / "model.pen")
    phys_only = HybridModel(template, template.defaults.copy())
    phys_only.phys.values = np.array(state.phys_values, float)
    metrics = {
        "scenario": tcfg.scenario,
        "train_mse": evaluate_loss(model, btr).mse,
        "val_mse": evaluate_loss(model, bva).mse,
        "test_mse": evaluate_loss(model, bte).mse,
        "test_per_channel": evaluate_loss(model, bte).per_channel.tolist(),
        "physics_only_test_mse": evaluate_loss(phys_only, bte).mse,
        "phys": model.phys.as_dict(),
        "pretrained_phys": phys_only.phys.as_dict(),
        "n_params": int(model.n_params),
        "hidden_neurons": int(sum(n.hidden_neurons for n in model.nets)),
        "history": json.loads(json.dumps(state.history, default=float)),
    }
    with open(out / "metrics.yaml", "w") as fh:
        yaml.safe_dump(metrics, fh, sort_keys=True)
    return out


def _load_split(split_file, name, ds):
    with open(split_file) as fh:
        sp = yaml.safe_load(fh)
    if name not in sp:
        raise ConfigError(f"split {name!r} not in {split_file}")
    return ds.select(sp[name])


def cmd_eval(cfg: dict, model_path: Path, data_dir: Path, out: Path, args=None) -> dict:
    model = import_model(model_path)
    if not isinstance(model, HybridModel):
        raise DataError("eval expects a float model file")
    ds = read_dataset(data_dir)
    if args is not None and getattr(args, "split_file", None):
        ds = _load_split(args.split_file, args.split, ds)
    out.mkdir(parents=True, exist_ok=True)
    sets = {"in_domain": ds}
    ood_dir = getattr(args, "ood", None) if args is not None else None
    if ood_dir:
        sets["out_of_domain"] = read_dataset(ood_dir)
    plots = cfg["eval"]["plots"] and not (args is not None and getattr(args, "no_plots", False))
    metrics = {}
    for name, d in sets.items():
        b = batch_of(d)
        rep = evaluate_loss(model, b)
        metrics[name] = {"mse": rep.mse, "per_channel": rep.per_channel.tolist(), "n_windows": len(d)}
        pred = predict(model, b)
        for k in range(min(cfg["eval"]["max_trajectories"], len(d))):
            w = d.windows[k]
            full = np.vstack([b.x0[k], pred[k]])
            dcol = w.states.shape[1]
            header = ["t"] + [f"x{i + 1}_obs" for i in range(dcol)] + [f"x{i + 1}_pred" for i in range(dcol)]
            rows = [[repr(float(w.times[i]))] + [repr(float(v)) for v in w.states[i]]
                    + [repr(float(v)) for v in full[i]] for i in range(len(w))]
            _write_csv(out / f"{name}_traj_{k:03d}.csv", header, rows)
            if plots:
                _plot(out / f"{name}_traj_{k:03d}.svg", w.times, w.states, full, model.template.state_names)
    with open(out / "metrics.yaml", "w") as fh:
        yaml.safe_dump(metrics, fh, sort_keys=True)
    cfgmod.write_stamp(out, cfg, "eval", {"model": str(model_path), "data": str(data_dir)})
    return metrics


def _plot(path, t, obs, pred, names):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    d = obs.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(6, 2.2 * d), sharex=True, squeeze=False)
    for i in range(d):
        ax = axes[i, 0]
        ax.plot(t * 1e6, obs[:, i], ".", ms=2, label="observed")
        ax.plot(t * 1e6, pred[:, i], "-", lw=1, label="model")
        ax.set_ylabel(names[i] if i < len(names) else f"x{i + 1}")
    axes[-1, 0].set_xlabel("t [us]")
    axes[0, 0].legend(loc="best", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def bench_rows(cfg: dict) -> list[list]:
    """Wall time and error at the switching instants for each solver setting,
    against dopri5 at rtol 1e-12."""
    b = cfg["bench"]
    name = b.get("template", cfg["plant"]["template"])
    tpl = make_template(name)
    model = HybridModel(tpl)
    period = b.get("period", cfg["plant"]["period"])
    duty = b.get("duty", [0.4] * (2 if name == "dab_reduced" else 1))
    phase = b.get("phase", [0.0, 0.25][: len(duty)] if name == "dab_reduced" else [0.0])
    inputs = np.array(b.get("inputs", [24.0] * tpl.n_inputs), float)
    op = OperatingPoint(tuple(inputs), tuple(duty), tuple(phase))
    specs = op.pwm(period)
    t_end = b["periods"] * period
    sched = build_schedule(0.0, t_end, tpl.transition_map(0, gate_word(0.0, specs)), specs, tpl.transition_map)
    x0 = averaged_equilibrium(tpl, tpl.defaults.values, specs, inputs) * 0.5
    t_ev = np.array(sched.times + [sched.horizon_end])
    scale = max(1.0, float(np.max(np.abs(x0))))
    ref = hybrid_integrate(model, sched, x0, SolverConfig("dopri5", rtol=1e-12, atol=1e-12 * scale), inputs)

    def err(tr):
        pos = np.searchsorted(tr.times, t_ev - 1e-12 * t_end)
        xs = tr.states[pos]
        xr = ref.states[np.searchsorted(ref.times, t_ev - 1e-12 * t_end)]
        return float(np.max(np.linalg.norm(xs - xr, axis=1) / np.maximum(np.linalg.norm(xr, axis=1), 1e-300)))

    def timed(fn):
        best = None
        for _ in range(b.get("repeats", 1)):
            t0 = time.perf_counter()
            tr = fn()
            dt = time.perf_counter() - t0
            best = dt if best is None else min(best, dt)
        return tr, best

    rows = []
    n_ev = len(sched.records) - 1
    for steps in b["rk4_steps"]:
        tr, dt = timed(lambda: hybrid_integrate(model, sched, x0, SolverConfig("rk4", h=period / steps), inputs))
        rows.append(["rk4", f"h=T/{steps}", f"{dt:.6f}", repr(err(tr)), n_ev])
    for rtol in b["dopri5_rtol"]:
        c = SolverConfig("dopri5", rtol=rtol, atol=rtol * 1e-3 * scale)
        tr, dt = timed(lambda: hybrid_integrate(model, sched, x0, c, inputs))
        rows.append(["dopri5", f"rtol={rtol:g}", f"{dt:.6f}", repr(err(tr)), n_ev])
    tr, dt = timed(lambda: event_driven_solve(model, sched, x0, inputs))
    rows.append(["event_driven", "exact", f"{dt:.6f}", repr(err(tr)), n_ev])
    return rows


BENCH_HEADER = ["solver", "setting", "wall_time_s", "rel_error", "n_events"]


def cmd_bench(cfg: dict, out: Path, args=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_rows(cfg)
    _write_csv(out / "bench.csv", BENCH_HEADER, rows)
    cfgmod.write_stamp(out, cfg, "bench")
    return out / "bench.csv"


def cmd_export(cfg: dict, model_path: Path, out_file: Path, args=None) -> Path:
    model = import_model(model_path)
    if not isinstance(model, HybridModel):
        raise DataError("export expects a float model as input")
    sparsity = getattr(args, "sparsity", None)
    sparsity = cfg["deploy"]["sparsity"] if sparsity is None else sparsity
    if sparsity:
        model.nets = [prune_magnitude(n, sparsity) for n in model.nets]
    obj = model
    if args is not None and getattr(args, "quantize", False):
        if not getattr(args, "calib", None):
            raise ConfigError("--quantize needs --calib DATASET")
        calib = read_dataset(args.calib)
        calib = calib.select(range(min(len(calib), cfg["deploy"]["calib_windows"])))
        obj = quantize(model, calib)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    return export_model(obj, out_file)


def describe_model(obj) -> dict:
    from .deploy import QuantizedModel
    quant = isinstance(obj, QuantizedModel)
    m = obj.model if quant else obj
    return {"kind": "quantized" if quant else "float", "template": m.template.name,
            "n_modes": m.n_modes, "n_states": m.n_states, "n_inputs": m.n_inputs,
            "phys": m.phys.as_dict(), "nets": [n.sizes for n in m.nets],
            "layouts": [[list(l.phys), list(l.nn)] for l in m.layouts]}


def cmd_import(cfg: dict, model_path: Path, out: Path | None = None, args=None) -> dict:
    info = describe_model(import_model(model_path))
    text = json.dumps(info, indent=2, sort_keys=True)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    else:
        print(text)
    return info


def conformance(model: HybridModel, qm, windows, periods: int, period: float):
    """Relative L2 error of quantized against float RK4 for each window's
    operating condition."""
    results = []
    for w in windows:
        cond = w.info.get("condition")
        if cond is None:
            raise DataError("calibration windows need their operating condition")
        op = OperatingPoint(**cond)
        specs = op.pwm(period)
        dt = w.times[1] - w.times[0]
        t_end = w.times[0] + periods * period
        sched = build_schedule(w.times[0], t_end, int(w.modes[0]), specs, model.transition_map)
        c = SolverConfig("rk4", h=dt)
        t_eval = w.times[0] + dt * np.arange(int(round(periods * period / dt)) + 1)
        u = np.asarray(op.inputs, float)
        f = hybrid_integrate(model, sched, w.states[0], c, u, t_eval)
        q = quantized_infer(qm, sched, w.states[0], c, u, t_eval)
        results.append(relative_l2(q, f))
    return results


def cmd_conformance(cfg: dict, model_path: Path, calib_dir: Path, out: Path, args=None) -> dict:
    from .deploy import QuantizedModel
    obj = import_model(model_path)
    calib = read_dataset(calib_dir)
    calib = calib.select(range(min(len(calib), cfg["deploy"]["calib_windows"])))
    if isinstance(obj, QuantizedModel):
        qm, model = obj, obj.model
    else:
        model = obj
        qm = quantize(model, calib)
    period = float(calib.metadata.get("plant", {}).get("period", cfg["plant"]["period"]))
    errs = conformance(model, qm, calib.windows, cfg["deploy"]["conformance_periods"], period)
    budget = cfg["deploy"]["budget"]
    report = {"max_rel_l2": max(errs), "mean_rel_l2": float(np.mean(errs)), "budget": budget,
              "pass": bool(max(errs) < budget), "per_window": errs}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "conformance.yaml", "w") as fh:
        yaml.safe_dump(report, fh, sort_keys=True)
    cfgmod.write_stamp(out, cfg, "conformance", {"model": str(model_path)})
    if not report["pass"]:
        raise NumericError(f"quantized model exceeds the conformance budget "
                           f"({report['max_rel_l2']:.4g} >= {budget})")
    return report


# -- argument parsing ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="output directory (or file for export)")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p = argparse.ArgumentParser(prog="penode", parents=[common],
                                description="Physics-embedded neural ODEs for switched converters")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a synthetic plant dataset")
    t = sub.add_parser("train", parents=[common], help="run the staged training pipeline")
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--scenario", choices=["white", "gray", "black"])
    t.add_argument("--engine", choices=["adjoint", "backprop"])
    t.add_argument("--no-ea", action="store_true", help="single shared residual net for all modes")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    e = sub.add_parser("eval", parents=[common], help="evaluate a model file on a dataset")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ood", type=Path, help="out-of-domain dataset directory")
    e.add_argument("--split-file", type=Path, help="split.yaml written by train")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--no-plots", action="store_true")
    sub.add_parser("bench", parents=[common], help="compare solver cost and accuracy")
    x = sub.add_parser("export", parents=[common], help="re-export, prune or quantize a model")
    x.add_argument("--model", type=Path, required=True)
    x.add_argument("--quantize", action="store_true")
    x.add_argument("--calib", type=Path)
    x.add_argument("--sparsity", type=float)
    i = sub.add_parser("import", parents=[common], help="validate a model file and print a summary")
    i.add_argument("--model", type=Path, required=True)
    c = sub.add_parser("conformance", parents=[common], help="quantized vs float inference check")
    c.add_argument("--model", type=Path, required=True)
    c.add_argument("--calib", type=Path, required=True)
    return p


def _limit_threads(n):
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    _limit_threads(args.threads)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = cfgmod.load(args.config, overrides)
    out = args.out
    cmd = args.command
    if cmd == "generate":
        cmd_generate(cfg, out or Path("data"), args)
    elif cmd == "train":
        cmd_train(cfg, args.data, out or Path("run"), args)
    elif cmd == "eval":
        m = cmd_eval(cfg, args.model, args.data, out or Path("eval"), args)
        print(json.dumps({k: v["mse"] for k, v in m.items()}))
    elif cmd == "bench":
        path = cmd_bench(cfg, out or Path("bench"), args)
        print(path.read_text(), end="")
    elif cmd == "export":
        cmd_export(cfg, args.model, out or args.model.with_suffix(".export.pen"), args)
    elif cmd == "import":
        cmd_import(cfg, args.model, out, args)
    elif cmd == "conformance":
        r = cmd_conformance(cfg, args.model, args.calib, out or Path("conformance"), args)
        print(f"max relative L2 error {r['max_rel_l2']:.3e} (budget {r['budget']})")
    return 0


def main(argv=None) -> int:
    try:
        code = run(argv)
    except PenodeError as exc:
        print(f"penode: error: {exc}", file=sys.stderr)
        code = exc.exit_code
    except OSError as exc:
        print(f"penode: I/O error: {exc}", file=sys.stderr)
        code = 5
    return code


if __name__ == "__main__":
    sys.exit(main())
