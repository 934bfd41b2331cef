import csv
import subprocess
import sys

import numpy as np
import pytest
import yaml

from penode import config as cfgmod
from penode.cli import BENCH_HEADER, main
from penode.errors import ConfigError
from penode.modelfile import import_model

TINY = {
    "seed": 7,
    "plant": {"template": "boost", "params": {"L": 2.2e-4, "C": 2.2e-5, "R": 20.0},
              "r_series": 0.3, "noise": 0.005, "samples_per_period": 20},
    "conditions": {"inputs": [[20.0, 24.0]], "duty": [[0.3, 0.5]], "n_conditions": 4,
                   "n_windows": 20},
    "ood": {"inputs": [[25.0, 30.0]], "duty": [[0.3, 0.5]], "n_conditions": 2, "n_windows": 4},
    "model": {"params": {"L": 2.0e-4, "C": 2.0e-5, "R": 20.0}},
    "train": {"scenario": "gray", "neurons": 8, "batch_size": 8, "max_epochs": 3,
              "pretrain_epochs": 5, "refine_rounds": 1, "lr": 1e-3},
    "eval": {"max_trajectories": 1},
    "bench": {"periods": 20, "rk4_steps": [10], "dopri5_rtol": [1e-6]},
    "deploy": {"calib_windows": 4, "conformance_periods": 2},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "gen")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "gen" / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


# -- configuration ----------------------------------------------------------------------

def test_defaults_validate():
    cfg = cfgmod.load()
    assert cfg["deploy"]["budget"] == 0.02
    assert cfgmod.config_hash(cfg) == cfgmod.config_hash(cfgmod.load())


@pytest.mark.parametrize("bad", [
    {"plant": {"tempo": 1}},
    {"trian": {}},
    {"train": {"learning_rate": 1e-3}},
    {"preprocess": {"ratios": [0.5, 0.2, 0.1]}},
    {"conditions": {"duty": [[0.2, 1.5]]}},
    {"conditions": {"inputs": [[30.0, 20.0]]}},
])
def test_invalid_configs_rejected(tmp_path, bad):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(bad))
    with pytest.raises(ConfigError):
        cfgmod.load(p)


def test_overrides_and_merge():
    cfg = cfgmod.load(None, {"seed": 11})
    assert cfg["seed"] == 11 and cfg["plant"]["period"] == 1e-5


def test_demo_config_is_valid():
    from pathlib import Path
    p = Path(__file__).resolve().parents[1] / "demos" / "configs" / "boost_sim2real.yaml"
    cfg = cfgmod.load(p)
    assert cfg["train"]["scenario"] == "gray"


# -- exit codes --------------------------------------------------------------------------

def test_exit_code_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1\n")
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "g")]) == 2
    p.write_text(yaml.safe_dump({"bogus": 1}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "g")]) == 2


def test_exit_code_data(tmp_path, workdir):
    root, cfg = workdir
    (tmp_path / "empty").mkdir()
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "r")]) == 3


def test_exit_code_numeric(tmp_path, workdir):
    root, _ = workdir
    strict = tmp_path / "strict.yaml"
    strict.write_text(yaml.safe_dump({**TINY, "deploy": {**TINY["deploy"], "budget": 1e-300}}))
    code = main(["conformance", "--config", str(strict), "--model", str(root / "run" / "model.pen"),
                 "--calib", str(root / "gen" / "data"), "--out", str(tmp_path / "c")])
    assert code == 4


def test_exit_code_io(tmp_path, workdir):
    _, cfg = workdir
    assert main(["import", "--config", str(cfg), "--model", str(tmp_path / "missing.pen")]) == 5
    bad = tmp_path / "bad.pen"
    bad.write_bytes(b"nope")
    assert main(["import", "--config", str(cfg), "--model", str(bad)]) == 5


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "penode.cli", "import", "--model",
                        str(tmp_path / "missing.pen")], capture_output=True, text=True)
    assert r.returncode == 5 and "error" in r.stderr


# -- commands --------------------------------------------------------------------------------

def test_generate_is_reproducible(tmp_path, workdir):
    root, cfg = workdir
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    for sub in ("data", "ood"):
        a = sorted((root / "gen" / sub).glob("*.csv"))
        b = sorted((tmp_path / "g" / sub).glob("*.csv"))
        assert [p.name for p in a] == [p.name for p in b] and a
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    stamp = yaml.safe_load((tmp_path / "g" / "run.yaml").read_text())
    assert stamp["seed"] == 7 and len(stamp["config_hash"]) == 16


def test_train_outputs(workdir):
    root, _ = workdir
    run = root / "run"
    model = import_model(run / "model.pen")
    assert model.template.name == "boost"
    with open(run / "epoch_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["round", "epoch", "train_mse", "val_mse"] and len(rows) > 1
    metrics = yaml.safe_load((run / "metrics.yaml").read_text())
    assert np.isfinite(metrics["test_mse"])
    split = yaml.safe_load((run / "split.yaml").read_text())
    assert (len(split["train"]), len(split["val"]), len(split["test"])) == (14, 4, 2)


def test_train_is_deterministic_and_resumable(tmp_path, workdir):
    root, cfg = workdir
    data = str(root / "gen" / "data")
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--data", data, "--out", str(out),
                 "--stop-after", "1"]) == 0
    assert not (out / "model.pen").exists()
    assert main(["train", "--config", str(cfg), "--data", data, "--out", str(out), "--resume"]) == 0
    assert (out / "model.pen").read_bytes() == (root / "run" / "model.pen").read_bytes()


def test_eval_without_plots(tmp_path, workdir):
    root, cfg = workdir
    out = tmp_path / "e"
    assert main(["eval", "--config", str(cfg), "--model", str(root / "run" / "model.pen"),
                 "--data", str(root / "gen" / "data"), "--ood", str(root / "gen" / "ood"),
                 "--split-file", str(root / "run" / "split.yaml"), "--no-plots",
                 "--out", str(out)]) == 0
    m = yaml.safe_load((out / "metrics.yaml").read_text())
    assert m["in_domain"]["n_windows"] == 2 and m["out_of_domain"]["n_windows"] == 4
    assert not list(out.glob("*.svg")) and list(out.glob("*.csv"))


def test_eval_with_plots(tmp_path, workdir):
    root, cfg = workdir
    out = tmp_path / "e"
    assert main(["eval", "--config", str(cfg), "--model", str(root / "run" / "model.pen"),
                 "--data", str(root / "gen" / "ood"), "--out", str(out)]) == 0
    assert list(out.glob("*.svg"))


def test_export_import_roundtrip(tmp_path, workdir, capsys):
    root, cfg = workdir
    src = root / "run" / "model.pen"
    out = tmp_path / "m.pen"
    assert main(["export", "--config", str(cfg), "--model", str(src), "--out", str(out)]) == 0
    assert out.read_bytes() == src.read_bytes()
    q = tmp_path / "q.pen"
    assert main(["export", "--config", str(cfg), "--model", str(src), "--quantize",
                 "--calib", str(root / "gen" / "data"), "--sparsity", "0.25", "--out", str(q)]) == 0
    capsys.readouterr()
    assert main(["import", "--config", str(cfg), "--model", str(q)]) == 0
    assert '"kind": "quantized"' in capsys.readouterr().out
    assert main(["export", "--config", str(cfg), "--model", str(src), "--quantize",
                 "--out", str(q)]) == 2


def test_conformance_command(tmp_path, workdir):
    root, cfg = workdir
    out = tmp_path / "c"
    assert main(["conformance", "--config", str(cfg), "--model", str(root / "run" / "model.pen"),
                 "--calib", str(root / "gen" / "data"), "--out", str(out)]) == 0
    rep = yaml.safe_load((out / "conformance.yaml").read_text())
    assert rep["pass"] and rep["max_rel_l2"] < 0.02 and len(rep["per_window"]) == 4


def test_bench_csv(tmp_path, workdir):
    _, cfg = workdir
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    with open(tmp_path / "b" / "bench.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == BENCH_HEADER
    assert [r[0] for r in rows[1:]] == ["rk4", "dopri5", "event_driven"]
    assert float(rows[-1][3]) < 1e-8
