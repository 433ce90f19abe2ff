"""How fast does the TV-CSL second stage converge when the nuisances are slow?

The propensity is the exact one, while the outcome and effect nuisances
are perturbed by errors of size n^(-1/4). An orthogonal score should still
recover beta near the n^(-1/2) rate. Run with
``python demos/oracle_rate.py [reps]`` (default 5 replications, a few
minutes).
"""

import sys

import numpy as np

from staggercox import Nuisances, SimConfig, generate, tvcsl_fit
from staggercox.simulate import HazardSpec, true_event_time_propensity

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 5
spec = HazardSpec()
sizes = [500, 1000, 2000, 4000]
errors = []
for n in sizes:
    h = n ** -0.25
    nz = Nuisances(lambda X, t: true_event_time_propensity(spec, X, t),
                   lambda X, h=h: spec.eta0(X) + h * (X[:, 0] + 0.5),
                   lambda X, h=h: spec.tau(X) + h * (X[:, 1] - 0.3))
    errs = []
    for r in range(reps):
        data, _ = generate(SimConfig(n=n, seed=1000 * n + r))
        errs.append(np.linalg.norm(tvcsl_fit(data, nuisances=nz, hte_intercept=False).beta - 1))
    errors.append(np.mean(errs))
    print(f"n = {n:5d}: mean error {errors[-1]:.3f}")

slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
print(f"log-log slope {slope:.2f} (-0.5 is the parametric rate, -0.25 the nuisance rate)")
