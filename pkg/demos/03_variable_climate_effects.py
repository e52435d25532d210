"""
Variable climate effects
========================

The climate coefficients follow a random walk, drawn each sweep by forward
filtering / backward sampling.  Here one coefficient drops by 0.3 halfway
through the record and the trajectory has to find the change.
"""

import numpy as np

from ringclim.design import assemble
from ringclim.fce import SamplerConfig, fit_fce
from ringclim.synth import SynthConfig, simulate
from ringclim.vce import VceOptions, fit_vce, trajectory_frame

cfg = SynthConfig(n_trees=150, n_stands=15, n_years=50, seed=21, theta_path="step",
                  change_index=25, theta_change=(0, 0, -0.3, 0, 0))
data = simulate(cfg)
design = assemble(data.rings, data.climate, data.truth["variables"], n_knots=8,
                  allowed_variables=None)
sampler = SamplerConfig(iterations=1000, burn_in=300, seed=2)

# the fixed-effects fit supplies the prior for the first state
fce = fit_fce(design, sampler)
vce = fit_vce(design, sampler, fce_chain=fce)
traj = trajectory_frame(vce, design)

sd = traj[traj.variable == "SUM-DEF"].set_index("year")
truth = data.truth["theta_path"][:, 2]
print("SUM-DEF trajectory around the change (true step at %d)" % design.years[25])
print(sd.loc[design.years[18]:design.years[32], ["post_mean", "q2.5", "q97.5", "r2_annual"]]
      .assign(truth=truth[18:33]).round(3))

# posterior innovation variances: large for the stepping variable
print("\nposterior mean Sigma_theta diagonal:",
      {v: round(float(x), 4) for v, x in zip(design.variables, vce["sigma_theta"].mean(0))})

# windowed mode pools five years of stand effects per state
win = fit_vce(design, sampler, VceOptions(mode="windowed"), fce_chain=fce)
w = win["theta"].mean(0)[:, 2]
s = vce["theta"].mean(0)[:, 2]
print("\nroughness of the SUM-DEF path: strict %.4f, windowed %.4f"
      % (np.abs(np.diff(s)).mean(), np.abs(np.diff(w)).mean()))
