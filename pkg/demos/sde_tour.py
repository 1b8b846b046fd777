"""
Forward SDE and the probability-flow sampler
============================================

Check the forward marginal against a Monte Carlo simulation, then run
the reverse ODE with an exact Gaussian score and recover the data.
Run with ``python3 demos/sde_tour.py``.
"""

import numpy as np

from voiceprior.prior import SdeConfig, euler_maruyama, forward_marginal, gaussian_score, reverse_ode_sample

# Constant beta = 0.5: mean decays as e^{-t/4}, variance approaches 1 - e^{-t/2}.
cfg = SdeConfig(np.zeros(1), np.ones(1), 0.5, 0.5)
x = euler_maruyama(np.ones(50_000), 1.0, 1e-3, np.random.default_rng(0))
mean, var = forward_marginal(np.ones(1), 1.0, cfg)
print(f"simulated mean {x.mean():.4f} var {x.var():.4f}   closed form {mean[0]:.4f} {var[0]:.4f}")

# Default schedule, 2-d Gaussian data. Start from N(mu, Lambda) and integrate back.
cfg = SdeConfig(np.zeros(2), np.ones(2))
m, v = np.array([0.8, -0.4]), np.array([0.3, 0.9])
for steps in (10, 50, 200):
    s = reverse_ode_sample(gaussian_score(m, v, cfg), None, steps, cfg, np.random.default_rng(1), n_samples=4000)
    print(f"{steps:4d} steps: mean {np.round(s.mean(0), 3)}  var {np.round(s.var(0), 3)}  (target {m}, {v})")
