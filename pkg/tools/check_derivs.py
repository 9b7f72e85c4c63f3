"""Dev scratch: finite-difference audit of the likelihood engine."""
import numpy as np

from asbiopsy.model import default_true_params, PatientRecord
from asbiopsy.inference.engine import (
    LikelihoodEngine, PackedDesign, ThetaLayout, ThetaView, t3_derivs,
)
from asbiopsy.inference.fitting import _d_inverse

rng = np.random.default_rng(0)
params = default_true_params()
layout = ThetaLayout(params.baseline_spline.n_basis)

# --- t3 scalar derivatives ---
y, m0, s0 = 2.3, 1.9, np.log(0.2)


def t3l(m, s):
    z = (y - m) * np.exp(-s)
    return t3_derivs(z, np.exp(-s), 0)["l"]


z0 = (y - m0) * np.exp(-s0)
d = t3_derivs(z0, np.exp(-s0), 3)
h = 1e-3
fd = {
    "l1": (t3l(m0 + 1e-6, s0) - t3l(m0 - 1e-6, s0)) / (2e-6),
    "ls": (t3l(m0, s0 + h) - t3l(m0, s0 - h)) / (2 * h),
    "l2": (t3l(m0 + h, s0) - 2 * t3l(m0, s0) + t3l(m0 - h, s0)) / h**2,
    "l3": (t3l(m0 + 2*h, s0) - 2*t3l(m0 + h, s0) + 2*t3l(m0 - h, s0) - t3l(m0 - 2*h, s0)) / (2 * h**3),
    "l1s": (t3l(m0 + h, s0 + h) - t3l(m0 + h, s0 - h) - t3l(m0 - h, s0 + h) + t3l(m0 - h, s0 - h)) / (4 * h**2),
}
fd["l2s"] = ((t3l(m0 + h, s0 + h) - 2 * t3l(m0, s0 + h) + t3l(m0 - h, s0 + h))
             - (t3l(m0 + h, s0 - h) - 2 * t3l(m0, s0 - h) + t3l(m0 - h, s0 - h))) / (2 * h**3)
for k, v in fd.items():
    print(f"t3 {k}: analytic={d[k]:.8f} fd={v:.8f} diff={abs(d[k]-v):.2e}")

# --- patients ---
def mk_patient(i, interval):
    age = 70 + rng.normal(0, 4)
    psa = [(t, float(max(0.0, 2 ** (2.5 + 0.1 * t + rng.normal(0, .3)) - 1))) for t in (0, .5, 1, 1.8, 2.5)]
    dre = [(t, bool(rng.random() < .2)) for t in (0, 1, 2)]
    l, r = (1.0, 3.0) if interval else (2.5, np.inf)
    return PatientRecord(id=f"p{i}", age_at_entry=age, psa_series=psa, dre_series=dre,
                         biopsy_lower=l, biopsy_upper=r)


pats = [mk_patient(i, i % 2 == 0) for i in range(6)]
packed = PackedDesign(pats, params)
eng = LikelihoodEngine(packed, layout)
dinv, logdet = _d_inverse(params.re_covariance)
theta = layout.pack(params) + rng.normal(0, 0.02, layout.size)
b = rng.normal(0, 0.3, (packed.n, 7))

tv = ThetaView(theta, layout)

# b-gradient / Hessian FD
g, hmat = eng.grad_hess_b(tv, b, dinv)
h = 1e-3
for trial in range(3):
    i = rng.integers(packed.n)
    j = rng.integers(7)
    bp, bm = b.copy(), b.copy()
    bp[i, j] += h
    bm[i, j] -= h
    fd_g = (eng.loglik(tv, bp, dinv, logdet)[i] - eng.loglik(tv, bm, dinv, logdet)[i]) / (2 * h)
    gp, _ = eng.grad_hess_b(tv, bp, dinv)
    gm, _ = eng.grad_hess_b(tv, bm, dinv)
    fd_h = (gp[i] - gm[i]) / (2 * h)
    print(f"b-grad[{i},{j}]: {g[i, j]:.8f} vs {fd_g:.8f} | hess row err {np.abs(hmat[i, :, j] - fd_h).max():.2e}")

# theta gradient of the Laplace sum
lap, bh, mh, conv = eng.laplace(tv, dinv, logdet, tol=1e-12)
assert conv.all()
grad = eng.theta_gradient(tv, bh, mh)


def lap_sum(th):
    tvv = ThetaView(th, layout)
    l, _, _, c = eng.laplace(tvv, dinv, logdet, tol=1e-12)
    assert c.all()
    return l.sum()


h = 1e-5
errs = []
for k in range(layout.size):
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    fdg = (lap_sum(tp) - lap_sum(tm)) / (2 * h)
    rel = abs(grad[k] - fdg) / max(1e-8, abs(fdg), abs(grad[k]))
    errs.append((rel, k, grad[k], fdg))
errs.sort(reverse=True)
print("worst theta-gradient rel errors:")
for rel, k, a, f in errs[:6]:
    print(f"  {layout.names()[k]:22s} rel={rel:.2e} analytic={a:.6f} fd={f:.6f}")
