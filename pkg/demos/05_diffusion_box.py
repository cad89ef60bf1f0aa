"""Particle estimates for a diffusion killed at a box boundary.

Brownian motion started at the origin and killed on leaving [-1, 1], horizon
T = 1.  No exact oracle exists here (the Euler scheme is biased and deaths
are only detected on the step grid), so this is a demonstration of the
engine on a continuous-state model: we report the survival estimate with a
replica-based confidence interval and the estimated mean position of the
survivors.

The grid-induced death ties are handled by the engine's carry-over rule, so
the run is well-defined even when several particles exit in the same step.
"""

import math

import numpy as np

from fvlab import FVConfig, model_from_dict, run_replicas

model = model_from_dict({
    "type": "diffusion",
    "drift": {"name": "zero"},
    "diffusion_coeff": 1.0,
    "step_size": 0.005,
    "initial": {"kind": "point", "x": 0.0},
    "box": [-1.0, 1.0],
})

config = FVConfig(n_particles=2000, horizon=1.0, seed=31415, theta=0.5,
                  model=model, test_functions=("alive", "coord"))
records = run_replicas(config, 60, n_jobs=2)

p_hats = np.array([r.p_hat for r in records])
coords = np.array([r.eta_norm_hat["coord"] for r in records])
half_width = 1.96 * p_hats.std(ddof=1) / math.sqrt(len(records))

print(f"N = {config.n_particles}, horizon T = 1, box [-1, 1], step 0.005")
print(f"survival estimate p_T ~ {p_hats.mean():.4f} +- {half_width:.4f} (95% CI)")
print(f"mean survivor position ~ {coords.mean():+.4f} (symmetry => ~0)")
print(f"resampling counts seen: {sorted(set(r.resample_count for r in records))}")

# eigenfunction decay for this box gives p_T ~ (4/pi) exp(-pi^2 T / 8) up to
# higher modes; the Euler grid bias keeps the estimate slightly above it
series = sum((-1) ** k * 4 / (math.pi * (2 * k + 1))
             * math.exp(-((2 * k + 1) * math.pi / 2) ** 2 / 2)
             for k in range(50))
print(f"continuum reference (Fourier series) = {series:.4f}; the gap is the "
      "documented time-discretization bias")
