"""Dev scratch: simulate -> censor -> fit_map; check recovery and timing."""
import sys
import time

import numpy as np

from asbiopsy.inference.engine import ThetaLayout
from asbiopsy.inference.fitting import FitConfig, fit_map
from asbiopsy.inference.types import Dataset
from asbiopsy.model import default_true_params
from asbiopsy.simulation import CohortConfig, apply_censoring, sample_cohort
from asbiopsy.errors import InferenceError

n = int(sys.argv[1]) if len(sys.argv) > 1 else 150
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 7

truth = default_true_params()
cfg = CohortConfig(n_patients=n, seed=seed)
t0 = time.time()
patients = sample_cohort(truth, cfg)
records = apply_censoring(patients, np.random.default_rng(seed + 1), cfg.horizon)
print(f"simulated {n} patients in {time.time()-t0:.1f}s; "
      f"{sum(r.progressed for r in records)} detected progressions")

ds = Dataset(records, cfg.horizon)
fit_cfg = FitConfig(psa_spline=truth.psa_spline, baseline_spline=truth.baseline_spline,
                    tolerance=1e-8, compute_curvature=True)
t0 = time.time()
try:
    fit = fit_map(ds, fit_cfg)
except InferenceError as e:
    print("FIT ERROR:", e)
    fit = e.state
dt = time.time() - t0
di = fit.diagnostics
print(f"fit in {dt:.1f}s: restarts={di['restarts']} iters={di['iterations']} "
      f"obj={di['objective']:.2f} grad={di['grad_norm']:.2e} "
      f"scaled={di['grad_norm_scaled']:.2e} converged={di['converged']} "
      f"mode_failures={di['mode_failures']}")

layout = ThetaLayout(truth.baseline_spline.n_basis)
th_true = layout.pack(truth)
th_hat = layout.pack(fit.params_hat)
se = np.sqrt(np.diag(fit.curvature))
names = layout.names()
print(f"{'param':22s} {'true':>9s} {'hat':>9s} {'se':>8s}  z")
nok = 0
check = list(range(17))
for k in check:
    z = (th_hat[k] - th_true[k]) / max(se[k], 1e-12)
    ok = abs(z) <= 2.0
    nok += ok
    print(f"{names[k]:22s} {th_true[k]:9.4f} {th_hat[k]:9.4f} {se[k]:8.4f} {z:+6.2f} {'' if ok else '  <-- out'}")
print(f"recovered {nok}/{len(check)} within 2 SE")
sd_true = np.sqrt(np.diag(truth.re_covariance))
sd_hat = np.sqrt(np.diag(fit.params_hat.re_covariance))
print("D sd true:", np.round(sd_true, 3))
print("D sd hat :", np.round(sd_hat, 3))
