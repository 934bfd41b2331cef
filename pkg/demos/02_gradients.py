"""Two ways to differentiate a switched neural ODE.

The gray-box buck model below is physics plus a small ReLU residual per
mode. Its training loss is differentiated by (1) reverse-mode through every
RK4 stage and (2) the continuous adjoint integrated backwards across the
same switching events. Both are checked against finite differences.

Run: python3 demos/02_gradients.py
"""
# %%
import time

import numpy as np

from penode import PwmSpec, Trajectory, buck_template, build_schedule, make_model
from penode.gradients import (adjoint_gradient, backprop_gradient, batch_from_schedule,
                              evaluate_loss, predict)

T = 1e-5
rng = np.random.default_rng(0)

# %%
model = make_model(buck_template(), "gray", hidden=(16,), rng=rng,
                   scales={"x_center": np.array([10.0, 4.0]), "x_scale": np.array([5.0, 2.0]),
                           "dx_scale": np.array([1e5, 1e4])})
for net in model.nets:
    net.theta[:] = rng.normal(0.0, 0.3, net.n_params)
sched = build_schedule(0.0, 4 * T, 0, [PwmSpec.from_duty(0.4, T)], model.transition_map)
t = np.linspace(0.0, 4 * T, 81)                       # events land on the sample grid
x0, u = np.array([1.0, 2.0]), np.array([12.0])

# synthetic observations: the model's own trajectory plus noise
grid = batch_from_schedule(sched, x0, Trajectory(t, np.zeros((t.size, 2))), u, 1)
obs = np.vstack([x0, predict(model, grid)[0]]) + rng.normal(0.0, 0.1, (t.size, 2))
batch = batch_from_schedule(sched, x0, Trajectory(t, obs), u, 1)
print(f"{model.n_params} parameters, loss {evaluate_loss(model, batch).mse:.4f}")

# %%
for name, engine in (("backprop", backprop_gradient), ("adjoint", adjoint_gradient)):
    t0 = time.perf_counter()
    rep, g, gx0 = engine(model, batch)
    print(f"{name:9s} |grad| = {np.linalg.norm(g):.6f}  ({time.perf_counter() - t0:.3f} s)")
_, gb, _ = backprop_gradient(model, batch)
_, ga, _ = adjoint_gradient(model, batch)
print("max |adjoint - backprop| / max |grad| =", f"{np.max(np.abs(ga - gb)) / np.max(np.abs(gb)):.1e}")

# %% [markdown]
# Finite differences on a few coordinates. Physics parameters live in log
# space, so the first three entries are derivatives w.r.t. log L, log C, log R.

# %%
theta = model.get_params()


def loss_at(th):
    m = model.copy()
    m.set_params(th)
    return evaluate_loss(m, batch).mse


# coordinates 0-2 are physics, the rest residual weights (dead ReLU units have zero gradient)
for k in [0, 1, 2] + list(np.flatnonzero(gb[3:])[::20] + 3):
    e = np.zeros_like(theta)
    e[k] = 1e-6
    fd = (loss_at(theta + e) - loss_at(theta - e)) / 2e-6
    print(f"theta[{k:3d}]  backprop {gb[k]: .8e}  finite difference {fd: .8e}")
