"""Survival curves and quantile grids.

The starting point of everything here: a killed Markov process loses mass
over time, p_t = P(alive at t), and for a branching fraction theta the level
crossings p(t_j) = theta**j define the quantile times the particle system is
supposed to discover on its own.

This script draws the survival curve of the pure-death benchmark (where
t_j = j ln 2 exactly) and of the two-state chain, marks the quantile grid
computed by the exact oracle, and prints the grid against closed forms.
"""

import math

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from fvlab import CtmcModel, pure_death, quantile_times, survival_curve

THETA = 0.5

pure = pure_death(1.0)
two_state = CtmcModel([[-1.5, 1.0], [1.0, -3.0]], [1.0, 0.0])

fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
for ax, (name, model, T) in zip(axes, [("pure death, rate 1", pure, 3.0),
                                       ("two-state chain", two_state, 1.0)]):
    ts, ps = survival_curve(model, T, 301)
    grid = quantile_times(model, THETA, T)
    ax.plot(ts, ps, label="$p_t$")
    for j, tj in enumerate(grid.t_levels, start=1):
        ax.axhline(THETA ** j, color="gray", lw=0.5)
        ax.plot([tj], [THETA ** j], "ro")
        ax.annotate(f"$t_{j}$", (tj, THETA ** j), textcoords="offset points",
                    xytext=(5, 5))
    ax.set_title(f"{name}: $j_{{\\max}}$={grid.j_max}, r={grid.r:.3f}")
    ax.set_xlabel("t")
    print(f"{name}: p_T = {grid.p_T:.6f}, j_max = {grid.j_max}, r = {grid.r:.6f}")
    for j, tj in enumerate(grid.t_levels, start=1):
        print(f"  t_{j} = {tj:.9f}")

print("\npure-death closed form t_j = j ln 2:")
for j in range(1, 5):
    print(f"  j ln 2 = {j * math.log(2):.9f}")

axes[0].set_ylabel("$p_t$")
fig.tight_layout()
fig.savefig("survival_and_quantiles.png", dpi=120)
print("\nwrote survival_and_quantiles.png")
