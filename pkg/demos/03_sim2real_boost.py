"""Sim-to-Real adaptation of a boost converter model, end to end.

The "real" plant differs from the simulator: 10% larger L and C, a series
resistance, and a cubic inductor loss. Starting from the simulator's
nominal parameters, the pipeline first re-fits the physical parameters,
then trains a residual net on the inductor-current row, and finally
quantizes the result for integer inference.

This is a reduced version of demos/configs/boost_sim2real.yaml so it runs
in a couple of minutes. With half the windows and a third of the epochs the
inductance estimate is looser (about 10% here, under 3% with the full
configuration). The full run is
    penode generate --config demos/configs/boost_sim2real.yaml --out runs/gen
    penode train --config demos/configs/boost_sim2real.yaml --data runs/gen/data --out runs/gray

Run: python3 demos/03_sim2real_boost.py  (outputs go to demos/out/sim2real/)
"""
# %%
from pathlib import Path

import numpy as np
import yaml

from penode import config as cfgmod
from penode.cli import batch_of, cmd_eval, cmd_generate, cmd_train, conformance
from penode.datasets import read_dataset
from penode.deploy import quantize
from penode.gradients import evaluate_loss
from penode.modelfile import export_model, import_model

HERE = Path(__file__).parent
OUT = HERE / "out" / "sim2real"
cfg = cfgmod.load(HERE / "configs" / "boost_sim2real.yaml", {
    "conditions": {"n_windows": 100, "n_conditions": 20},
    "ood": {"n_windows": 20, "n_conditions": 10},
    "train": {"max_epochs": 30, "refine_rounds": 0},
})

# %%
cmd_generate(cfg, OUT / "gen")
cmd_train(cfg, OUT / "gen" / "data", OUT / "gray")
m = yaml.safe_load((OUT / "gray" / "metrics.yaml").read_text())
print("plant truth      ", cfg["plant"]["params"])
print("simulator start  ", cfg["model"]["params"])
print("after training   ", {k: float(f"{v:.4g}") for k, v in m["phys"].items()})
print(f"test mse: physics only {m['physics_only_test_mse']:.4g}, gray-box {m['test_mse']:.4g}")

# %% [markdown]
# Out-of-domain check: the source voltage is 25% above anything seen in
# training. The physics term carries the extrapolation.

# %%
model = import_model(OUT / "gray" / "model.pen")
ood = batch_of(read_dataset(OUT / "gen" / "ood"))
print(f"out-of-domain mse {evaluate_loss(model, ood).mse:.4g}")
cmd_eval(cfg, OUT / "gray" / "model.pen", OUT / "gen" / "ood", OUT / "eval")

# %% [markdown]
# Edge deployment: physics matrices to Q16.16, hidden layers to int8, the
# output layer in float16. The quantized model is simulated with integer
# arithmetic and compared with the float model.

# %%
calib = read_dataset(OUT / "gen" / "data").select(range(10))
qm = quantize(model, calib)
errs = conformance(model, qm, calib.windows, periods=10, period=cfg["plant"]["period"])
print(f"quantized vs float, worst relative L2 error {100 * max(errs):.3f}%")
path = export_model(qm, OUT / "gray_q.pen")
print(f"wrote {path} ({path.stat().st_size} bytes)")
