"""Vectorized likelihood engine for the joint model.

All per-patient quantities (measurement design rows, hazard quadrature
nodes) are padded into dense arrays once, so that log-likelihoods and
their derivatives over a whole cohort reduce to a handful of einsums.
Derivatives with respect to the random effects go up to third order;
those feed the exact gradient of the Laplace-approximate marginal
likelihood with respect to the fixed parameters.

The interval-censored survival contribution is written as
-H(0,l) + log(1 - exp(-G)) with G the hazard integral over (l, r], so
the gap is positive by construction and the term stays stable. For any
scalar arguments psi, phi, chi its derivatives follow the symmetric
chain

    l_psi        = -Hl_psi + c1 G_psi
    l_psi,phi    = -Hl_psi,phi + c1 G_psi,phi - c2 G_psi G_phi
    l_psi,phi,chi= -Hl_... + c1 G_... - c2 sum_3(G_.. G_.)
                   + c3 G_psi G_phi G_chi

with rho = exp(-G), u = 1 - rho, c1 = rho/u, c2 = rho/u^2,
c3 = rho(1+rho)/u^3.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateIntervalError
from ..model import (
    AGE_CENTER,
    hazard_breakpoints,
    psa_time_basis,
    quadrature_nodes,
)
from ..splines import bspline_basis

T_DF = 3.0
_T_CONST = math.lgamma(2.0) - math.lgamma(1.5) - 0.5 * math.log(T_DF * math.pi)


class ThetaLayout:
    """Flat ordering of the fixed parameters.

    [beta_d (4) | beta_p (7) | log_sigma | alpha_dre | alpha_psa_value |
     alpha_psa_velocity | gamma (2) | baseline coefficients]
    """

    def __init__(self, n_baseline):
        self.n_baseline = n_baseline
        self.size = 17 + n_baseline
        self.sl_beta_d = slice(0, 4)
        self.sl_beta_p = slice(4, 11)
        self.i_log_sigma = 11
        self.i_a1d = 12
        self.i_a1p = 13
        self.i_a2p = 14
        self.sl_gamma = slice(15, 17)
        self.sl_baseline = slice(17, 17 + n_baseline)

    def pack(self, params):
        th = np.empty(self.size)
        th[self.sl_beta_d] = params.beta_d
        th[self.sl_beta_p] = params.beta_p
        th[self.i_log_sigma] = math.log(params.error_scale)
        th[self.i_a1d] = params.alpha_dre
        th[self.i_a1p] = params.alpha_psa_value
        th[self.i_a2p] = params.alpha_psa_velocity
        th[self.sl_gamma] = params.gamma_age
        th[self.sl_baseline] = params.baseline_log_hazard_coeffs
        return th

    def unpack(self, theta, template, re_covariance=None):
        from ..model import JointModelParams

        d = template.re_covariance if re_covariance is None else re_covariance
        return JointModelParams(
            beta_d=theta[self.sl_beta_d].copy(),
            beta_p=theta[self.sl_beta_p].copy(),
            error_scale=math.exp(theta[self.i_log_sigma]),
            re_covariance=np.asarray(d, dtype=float).copy(),
            alpha_dre=float(theta[self.i_a1d]),
            alpha_psa_value=float(theta[self.i_a1p]),
            alpha_psa_velocity=float(theta[self.i_a2p]),
            gamma_age=theta[self.sl_gamma].copy(),
            baseline_log_hazard_coeffs=theta[self.sl_baseline].copy(),
            baseline_spline=template.baseline_spline,
            psa_spline=template.psa_spline,
            penalty_smoothing=template.penalty_smoothing,
        )

    def names(self):
        return (
            [f"beta_d[{i}]" for i in range(4)]
            + [f"beta_p[{i}]" for i in range(7)]
            + ["log_sigma", "alpha_dre", "alpha_psa_value", "alpha_psa_velocity",
               "gamma[0]", "gamma[1]"]
            + [f"baseline[{i}]" for i in range(self.n_baseline)]
        )


class ThetaView:
    """Named view into a flat theta vector."""

    def __init__(self, theta, layout):
        self.theta = np.asarray(theta, dtype=float)
        self.layout = layout
        self.beta_d = self.theta[layout.sl_beta_d]
        self.beta_p = self.theta[layout.sl_beta_p]
        self.log_sigma = float(self.theta[layout.i_log_sigma])
        self.inv_sigma = math.exp(-self.log_sigma)
        self.a1d = float(self.theta[layout.i_a1d])
        self.a1p = float(self.theta[layout.i_a1p])
        self.a2p = float(self.theta[layout.i_a2p])
        self.gamma = self.theta[layout.sl_gamma]
        self.baseline = self.theta[layout.sl_baseline]


@dataclass
class HazardNodes:
    """Padded hazard quadrature arrays for one integral family."""

    w: np.ndarray      # (n, q) quadrature weights, zero padded
    w0: np.ndarray     # (n, q, nb) baseline basis rows
    xd: np.ndarray     # (n, q, 4) DRE fixed design [1, t, ad, ad2]
    xp: np.ndarray     # (n, q, 7) PSA fixed design [1, B(t), ad, ad2]
    xpd: np.ndarray    # (n, q, 7) PSA derivative design [0, B'(t), 0, 0]

    @property
    def zd(self):
        return self.xd[..., :2]

    @property
    def zp(self):
        return self.xp[..., :5]

    @property
    def zpd(self):
        return self.xpd[..., :5]


def _stack_nodes(per_patient, nb):
    n = len(per_patient)
    q = max(1, max((p[0].size for p in per_patient), default=1))
    w = np.zeros((n, q))
    w0 = np.zeros((n, q, nb))
    xd = np.zeros((n, q, 4))
    xp = np.zeros((n, q, 7))
    xpd = np.zeros((n, q, 7))
    for i, (wi, w0i, xdi, xpi, xpdi) in enumerate(per_patient):
        k = wi.size
        if k:
            w[i, :k] = wi
            w0[i, :k] = w0i
            xd[i, :k] = xdi
            xp[i, :k] = xpi
            xpd[i, :k] = xpdi
    return HazardNodes(w=w, w0=w0, xd=xd, xp=xp, xpd=xpd)


class PackedDesign:
    """Design matrices for a list of patients under fixed knot layouts."""

    def __init__(self, patients, template_params, n_nodes=15):
        self.n = len(patients)
        self.ids = [p.id for p in patients]
        nb = template_params.baseline_spline.n_basis
        self.n_baseline = nb
        basis = psa_time_basis(template_params)
        breaks = hazard_breakpoints(template_params)
        bspl = template_params.baseline_spline

        ad = np.array([p.age_at_entry - AGE_CENTER for p in patients])
        self.ad = ad

        od = max(1, max(len(p.dre_series) for p in patients))
        op = max(1, max(len(p.psa_series) for p in patients))
        self.dre_X = np.zeros((self.n, od, 4))
        self.dre_y = np.zeros((self.n, od))
        self.dre_mask = np.zeros((self.n, od))
        self.psa_X = np.zeros((self.n, op, 7))
        self.psa_y = np.zeros((self.n, op))
        self.psa_mask = np.zeros((self.n, op))
        self.is_interval = np.zeros(self.n, dtype=bool)

        haz_l, haz_gap = [], []
        for i, p in enumerate(patients):
            a, a2 = ad[i], ad[i] ** 2
            for j, (t, palpable) in enumerate(p.dre_series):
                self.dre_X[i, j] = (1.0, t, a, a2)
                self.dre_y[i, j] = float(palpable)
                self.dre_mask[i, j] = 1.0
            for j, (t, value) in enumerate(p.psa_series):
                bt = basis.basis(t)
                self.psa_X[i, j] = (1.0, *bt, a, a2)
                self.psa_y[i, j] = math.log2(value + 1.0)
                self.psa_mask[i, j] = 1.0
            self.is_interval[i] = p.progressed
            haz_l.append(self._nodes(0.0, p.biopsy_lower, breaks, bspl, basis, a, n_nodes))
            if p.progressed:
                haz_gap.append(self._nodes(p.biopsy_lower, p.biopsy_upper,
                                           breaks, bspl, basis, a, n_nodes))
        self.interval_idx = np.nonzero(self.is_interval)[0]
        self.haz_l = _stack_nodes(haz_l, nb)
        self.haz_gap = _stack_nodes(haz_gap, nb)  # interval patients only, in idx order

    @staticmethod
    def _nodes(t0, t1, breaks, baseline_spline, psa_basis, a, n_nodes):
        nodes, weights = quadrature_nodes(t0, t1, breaks, n_nodes)
        if nodes.size == 0:
            return (np.zeros(0), np.zeros((0, baseline_spline.n_basis)),
                    np.zeros((0, 4)), np.zeros((0, 7)), np.zeros((0, 7)))
        w0 = bspline_basis(nodes, baseline_spline, extrapolate=True)
        bt = psa_basis.basis(nodes)
        btd = psa_basis.deriv(nodes)
        k = nodes.size
        xd = np.column_stack([np.ones(k), nodes, np.full(k, a), np.full(k, a * a)])
        xp = np.column_stack([np.ones(k), bt, np.full(k, a), np.full(k, a * a)])
        xpd = np.column_stack([np.zeros(k), btd, np.zeros(k), np.zeros(k)])
        return (weights, w0, xd, xp, xpd)


def t3_derivs(z, inv_sigma, order):
    """Location-scale t (3 df) log-density derivatives.

    Returns the log density 'l' and, depending on order, derivatives in
    the location m (l1, l2, l3) and the log scale s (ls, l1s, l2s),
    where z = (y - m) / sigma and inv_sigma = 1/sigma.
    """
    t = 1.0 + z * z / 3.0
    out = {"l": _T_CONST + np.log(inv_sigma) - 2.0 * np.log(t)}
    if order >= 1:
        out["l1"] = (4.0 / 3.0) * inv_sigma * z / t
        out["ls"] = -1.0 + (4.0 / 3.0) * z * z / t
    if order >= 2:
        out["l2"] = -(4.0 / 3.0) * inv_sigma ** 2 * (1.0 - z * z / 3.0) / t ** 2
        out["l1s"] = -(8.0 / 3.0) * inv_sigma * z / t ** 2
        # expected information: -(nu+1)/(nu+3)/sigma^2, always negative,
        # used in place of the redescending observed curvature so the
        # Laplace determinant cannot be driven to a singularity
        out["l2e"] = -(2.0 / 3.0) * inv_sigma ** 2 * np.ones_like(z)
    if order >= 3:
        out["l3"] = -(8.0 / 9.0) * inv_sigma ** 3 * z * (3.0 - z * z / 3.0) / t ** 3
        out["l2s"] = (8.0 / 3.0) * inv_sigma ** 2 * (1.0 - z * z / 3.0) / t ** 2 \
            - (8.0 / 9.0) * inv_sigma ** 2 * z * z * (3.0 - z * z / 3.0) / t ** 3
    return out


class HazardBundle:
    """One hazard integral H (per patient) and its derivatives."""

    __slots__ = ("H", "Hb", "Hbb", "Ht", "Hbt", "Hbbb", "Hbbt", "wh", "A", "at")

    def __init__(self, tv, b, nodes, order, want_theta=False):
        lay = tv.layout
        n, q, _ = nodes.xd.shape
        eta = nodes.xd @ tv.beta_d + np.einsum("nqi,ni->nq", nodes.zd, b[:, :2])
        m = nodes.xp @ tv.beta_p + np.einsum("nqi,ni->nq", nodes.zp, b[:, 2:])
        mp = nodes.xpd @ tv.beta_p + np.einsum("nqi,ni->nq", nodes.zpd, b[:, 2:])
        e = (
            nodes.w0 @ tv.baseline
            + tv.gamma[0] * nodes.xd[..., 2] + tv.gamma[1] * nodes.xd[..., 3]
            + tv.a1d * eta + tv.a1p * m + tv.a2p * mp
        )
        wh = nodes.w * np.exp(np.clip(e, -700.0, 700.0))
        self.wh = wh
        self.H = wh.sum(axis=1)
        if order < 1:
            return
        A = np.concatenate([tv.a1d * nodes.zd,
                            tv.a1p * nodes.zp + tv.a2p * nodes.zpd], axis=2)
        self.A = A
        WA = wh[:, :, None] * A
        self.Hb = WA.sum(axis=1)
        if order >= 2:
            self.Hbb = np.matmul(A.transpose(0, 2, 1), WA)
        G = None
        if order >= 3:
            # G[n, q, i*7+j] = wh A_i A_j, flattened for batched matmul
            G = (WA[:, :, :, None] * A[:, :, None, :]).reshape(n, q, 49)
            self.Hbbb = np.matmul(G.transpose(0, 2, 1), A).reshape(n, 7, 7, 7)
        if not want_theta:
            return
        at = np.zeros((n, q, lay.size))
        at[..., lay.sl_beta_d] = tv.a1d * nodes.xd
        at[..., lay.sl_beta_p] = tv.a1p * nodes.xp + tv.a2p * nodes.xpd
        at[..., lay.i_a1d] = eta
        at[..., lay.i_a1p] = m
        at[..., lay.i_a2p] = mp
        at[..., lay.sl_gamma.start] = nodes.xd[..., 2]
        at[..., lay.sl_gamma.start + 1] = nodes.xd[..., 3]
        at[..., lay.sl_baseline] = nodes.w0
        self.at = at
        self.Ht = np.einsum("nq,nqk->nk", wh, at)
        # dA/dtheta is nonzero only for the three association parameters
        e2 = [np.concatenate([nodes.zd, np.zeros((n, q, 5))], axis=2),
              np.concatenate([np.zeros((n, q, 2)), nodes.zp], axis=2),
              np.concatenate([np.zeros((n, q, 2)), nodes.zpd], axis=2)]
        alpha_cols = (lay.i_a1d, lay.i_a1p, lay.i_a2p)
        self.Hbt = np.matmul(WA.transpose(0, 2, 1), at)
        for da, col in zip(e2, alpha_cols):
            self.Hbt[:, :, col] += (wh[:, :, None] * da).sum(axis=1)
        if order >= 3:
            self.Hbbt = np.matmul(G.transpose(0, 2, 1), at).reshape(n, 7, 7, lay.size)
            for da, col in zip(e2, alpha_cols):
                cross = np.matmul((wh[:, :, None] * da).transpose(0, 2, 1), A)
                self.Hbbt[:, :, :, col] += cross + np.swapaxes(cross, 1, 2)


class LikelihoodEngine:
    """Log-likelihoods and derivatives over a packed cohort."""

    def __init__(self, packed, layout):
        self.packed = packed
        self.layout = layout

    def view(self, theta):
        tv = ThetaView(theta, self.layout)
        return tv

    # -------------------- conditional log-likelihood --------------------

    def _dre_eta(self, tv, b):
        pk = self.packed
        return np.einsum("noj,j->no", pk.dre_X, tv.beta_d) \
            + np.einsum("noj,nj->no", pk.dre_X[..., :2], b[:, :2])

    def _psa_m(self, tv, b):
        pk = self.packed
        return np.einsum("noj,j->no", pk.psa_X, tv.beta_p) \
            + np.einsum("noj,nj->no", pk.psa_X[..., :5], b[:, 2:])

    @staticmethod
    def _interval_coeffs(gap_h, max_order=1):
        """c1, c2, c3 factors of the interval survival chain rule."""
        rho = np.exp(-gap_h)
        u = -np.expm1(-gap_h)
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = rho / u
            c2 = rho / u ** 2 if max_order >= 2 else None
            c3 = rho * (1 + rho) / u ** 3 if max_order >= 3 else None
        return c1, c2, c3

    def loglik(self, tv, b, dinv, logdet_d, strict=False):
        """Per-patient conditional log-likelihood at random effects b."""
        pk = self.packed
        idx = pk.interval_idx
        eta = self._dre_eta(tv, b)
        ll_dre = (pk.dre_mask * (pk.dre_y * eta - np.logaddexp(0.0, eta))).sum(axis=1)
        z = (pk.psa_y - self._psa_m(tv, b)) * tv.inv_sigma
        ll_psa = (pk.psa_mask * t3_derivs(z, tv.inv_sigma, 0)["l"]).sum(axis=1)
        hl = HazardBundle(tv, b, pk.haz_l, 0)
        ll_surv = -hl.H
        if idx.size:
            hg = HazardBundle(tv, b[idx], pk.haz_gap, 0)
            mass = -np.expm1(-hg.H)
            if strict and np.any(mass <= 0.0):
                bad = [pk.ids[i] for i in idx[mass <= 0.0]]
                raise DegenerateIntervalError(
                    f"no probability mass in censoring interval for {bad}"
                )
            with np.errstate(divide="ignore"):
                ll_surv[idx] += np.log(mass)
        quad = np.einsum("ni,ij,nj->n", b, dinv, b)
        ll_prior = -0.5 * quad - 0.5 * (logdet_d + 7.0 * math.log(2.0 * math.pi))
        return ll_dre + ll_psa + ll_surv + ll_prior

    def grad_hess_b(self, tv, b, dinv, fisher=False):
        """Gradient and Hessian in b of the conditional log-likelihood.

        With fisher=True the PSA block of the Hessian uses the expected
        t3 information (always negative definite) instead of the
        redescending observed curvature; the gradient is exact either
        way.
        """
        pk = self.packed
        idx = pk.interval_idx
        eta = self._dre_eta(tv, b)
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        rd = pk.dre_mask * (pk.dre_y - p)
        wd = pk.dre_mask * p * (1.0 - p)
        zd = pk.dre_X[..., :2]
        g = np.zeros_like(b)
        h = np.zeros((pk.n, 7, 7))
        g[:, :2] = np.einsum("no,noi->ni", rd, zd)
        h[:, :2, :2] = -np.einsum("no,noi,noj->nij", wd, zd, zd)

        z = (pk.psa_y - self._psa_m(tv, b)) * tv.inv_sigma
        td = t3_derivs(z, tv.inv_sigma, 2)
        zp = pk.psa_X[..., :5]
        g[:, 2:] += np.einsum("no,noi->ni", pk.psa_mask * td["l1"], zp)
        h[:, 2:, 2:] += np.einsum("no,noi,noj->nij",
                                  pk.psa_mask * td["l2e" if fisher else "l2"], zp, zp)

        hl = HazardBundle(tv, b, pk.haz_l, 2)
        g += -hl.Hb
        h += -hl.Hbb
        if idx.size:
            hg = HazardBundle(tv, b[idx], pk.haz_gap, 2)
            c1, c2, _ = self._interval_coeffs(hg.H, max_order=2)
            g[idx] += c1[:, None] * hg.Hb
            h[idx] += c1[:, None, None] * hg.Hbb \
                - c2[:, None, None] * np.einsum("ni,nj->nij", hg.Hb, hg.Hb)

        g -= b @ dinv
        h -= dinv[None, :, :]
        return g, h

    # ------------------------- mode finding -------------------------

    def find_modes(self, tv, dinv, logdet_d, b0=None, tol=1e-10, max_iter=60):
        """Per-patient conditional modes by damped Newton, batched.

        Returns (b, loglik, M, converged) with M = -Hessian at b.
        """
        pk = self.packed
        b = np.zeros((pk.n, 7)) if b0 is None else np.clip(b0, -40.0, 40.0)
        b = np.where(np.isfinite(b), b, 0.0)
        eye = np.eye(7)
        lam = np.full(pk.n, 1e-4)
        ll = self.loglik(tv, b, dinv, logdet_d)
        bad = ~np.isfinite(ll)
        if bad.any():
            b[bad] = 0.0
            ll = self.loglik(tv, b, dinv, logdet_d)
        for _ in range(max_iter):
            g, h = self.grad_hess_b(tv, b, dinv)
            ok = np.isfinite(g).all(axis=1) & np.isfinite(h).all(axis=(1, 2))
            gnorm = np.where(ok, np.abs(np.where(np.isfinite(g), g, 0.0)).max(axis=1), np.inf)
            active = ok & (gnorm > tol)
            if not active.any():
                break
            g = np.where(np.isfinite(g), g, 0.0)
            h = np.where(np.isfinite(h), h, 0.0)
            for _attempt in range(40):
                mreg = -h + (lam[:, None, None] + 1e-12) * eye
                try:
                    step = np.linalg.solve(mreg, g[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    lam = np.minimum(lam * 10.0, 1e8)
                    continue
                norm = np.linalg.norm(step, axis=1, keepdims=True)
                step = step * np.minimum(1.0, 8.0 / np.maximum(norm, 1e-300))
                b_try = np.clip(np.where(active[:, None], b + step, b), -40.0, 40.0)
                ll_try = self.loglik(tv, b_try, dinv, logdet_d)
                improved = active & (ll_try >= ll - 1e-10) & np.isfinite(ll_try)
                b[improved] = b_try[improved]
                ll[improved] = ll_try[improved]
                lam[improved] = np.maximum(lam[improved] * 0.3, 1e-8)
                active = active & ~improved
                if not active.any():
                    break
                lam[active] = np.minimum(lam[active] * 8.0, 1e8)
        g, h = self.grad_hess_b(tv, b, dinv)
        with np.errstate(invalid="ignore"):
            converged = np.isfinite(g).all(axis=1) & (np.abs(g).max(axis=1) <= max(tol, 1e-4))
        return b, ll, -h, converged

    def mode_matrices(self, tv, b, dinv):
        """Exact and expected-information negative Hessians at b."""
        m_exact = -self.grad_hess_b(tv, b, dinv)[1]
        m_fisher = -self.grad_hess_b(tv, b, dinv, fisher=True)[1]
        return m_exact, m_fisher

    # --------------------- Laplace value and gradient ---------------------

    @staticmethod
    def _chol_logdet(m):
        """Batched Cholesky log-determinants; jitters non-PD matrices."""
        n = m.shape[0]
        jitter = 0.0
        for _ in range(8):
            try:
                chol = np.linalg.cholesky(m + jitter * np.eye(m.shape[1]))
                logdet = 2.0 * np.log(np.einsum("nii->ni", chol)).sum(axis=1)
                return chol, logdet, jitter
            except np.linalg.LinAlgError:
                jitter = 1e-8 if jitter == 0.0 else jitter * 100.0
        raise np.linalg.LinAlgError("mode Hessian not positive definite")

    def laplace(self, tv, dinv, logdet_d, b0=None, tol=1e-10):
        """Per-patient Laplace-approximate marginal log-likelihoods.

        The Gaussian volume uses the expected-information curvature, so
        the determinant stays positive wherever the modes exist. Returns
        (values, modes, M_fisher, M_exact, converged).
        """
        b, ll, m_exact, converged = self.find_modes(tv, dinv, logdet_d, b0=b0, tol=tol)
        m_fisher = -self.grad_hess_b(tv, b, dinv, fisher=True)[1]
        _, logdet_m, _ = self._chol_logdet(m_fisher)
        lap = ll + 3.5 * math.log(2.0 * math.pi) - 0.5 * logdet_m
        return lap, b, m_fisher, m_exact, converged

    def theta_gradient(self, tv, b, m_fisher, m_exact=None, dinv=None,
                       want_d_matrix=False):
        """Exact gradient in theta of the summed Laplace marginals.

        b must hold the conditional modes under tv; m_fisher the
        expected-information matrices entering the Laplace determinant
        and m_exact the exact negative Hessians (used for the implicit
        mode shift). Includes the implicit dependence of the modes and
        of log det M on theta. With want_d_matrix=True also returns the
        matrix gradient in the random-effects covariance D.
        """
        pk = self.packed
        lay = self.layout
        p_dim = lay.size
        if m_exact is None:
            m_exact = -self.grad_hess_b(tv, b, dinv if dinv is not None
                                        else np.zeros((7, 7)))[1]
        minv = np.linalg.inv(m_fisher)

        grad = np.zeros(p_dim)
        cmat = np.zeros((pk.n, 7, p_dim))    # d2 loglik / db dtheta
        tr1 = np.zeros((pk.n, p_dim))        # tr(Minv dM/dtheta_k)
        g3 = np.zeros((pk.n, 7))             # tr(Minv dM/db_s)

        # ---- DRE block ----
        eta = self._dre_eta(tv, b)
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        rd = pk.dre_mask * (pk.dre_y - p)
        wd = pk.dre_mask * p * (1.0 - p)
        w3 = wd * (1.0 - 2.0 * p)
        zd = pk.dre_X[..., :2]
        grad[lay.sl_beta_d] += np.einsum("no,noj->j", rd, pk.dre_X)
        cmat[:, :2, lay.sl_beta_d] += -np.einsum("no,noi,noj->nij", wd, zd, pk.dre_X)
        qd = np.einsum("noi,nij,noj->no", zd, minv[:, :2, :2], zd)
        tr1[:, lay.sl_beta_d] += np.einsum("no,noj->nj", w3 * qd, pk.dre_X)
        g3[:, :2] += np.einsum("no,noi->ni", w3 * qd, zd)

        # ---- PSA block ----
        # the Laplace determinant uses the expected t3 information, so
        # M_psa depends on theta only through the scale (dM/ds = -2M)
        z = (pk.psa_y - self._psa_m(tv, b)) * tv.inv_sigma
        td = t3_derivs(z, tv.inv_sigma, 3)
        mk = pk.psa_mask
        zp = pk.psa_X[..., :5]
        grad[lay.sl_beta_p] += np.einsum("no,noj->j", mk * td["l1"], pk.psa_X)
        grad[lay.i_log_sigma] += (mk * td["ls"]).sum()
        cmat[:, 2:, lay.sl_beta_p] += np.einsum("no,noi,noj->nij", mk * td["l2"], zp, pk.psa_X)
        cmat[:, 2:, lay.i_log_sigma] += np.einsum("no,noi->ni", mk * td["l1s"], zp)
        qp = np.einsum("noi,nij,noj->no", zp, minv[:, 2:, 2:], zp)
        tr1[:, lay.i_log_sigma] += 2.0 * (mk * td["l2e"] * qp).sum(axis=1)

        # ---- survival block ----
        idx = pk.interval_idx
        hl = HazardBundle(tv, b, pk.haz_l, 3, want_theta=True)
        grad += -hl.Ht.sum(axis=0)
        cmat += -hl.Hbt
        n = pk.n
        mflat = minv.reshape(n, 1, 49)
        tr1 += np.matmul(mflat, hl.Hbbt.reshape(n, 49, p_dim))[:, 0, :]
        g3 += np.matmul(mflat, hl.Hbbb.reshape(n, 49, 7))[:, 0, :]

        if idx.size:
            hg = HazardBundle(tv, b[idx], pk.haz_gap, 3, want_theta=True)
            c1, c2, c3 = self._interval_coeffs(hg.H, max_order=3)
            mi = minv[idx]
            gb, gt = hg.Hb, hg.Ht
            grad += (c1[:, None] * gt).sum(axis=0)
            cmat[idx] += c1[:, None, None] * hg.Hbt \
                - c2[:, None, None] * np.einsum("ni,nk->nik", gb, gt)
            sym_bb_t = (
                np.einsum("nij,nk->nijk", hg.Hbb, gt)
                + np.einsum("nik,nj->nijk", hg.Hbt, gb)
                + np.einsum("njk,ni->nijk", hg.Hbt, gb)
            )
            l_bbt = c1[:, None, None, None] * hg.Hbbt \
                - c2[:, None, None, None] * sym_bb_t \
                + c3[:, None, None, None] * np.einsum("ni,nj,nk->nijk", gb, gb, gt)
            miflat = mi.reshape(idx.size, 1, 49)
            tr1[idx] += -np.matmul(miflat, l_bbt.reshape(idx.size, 49, p_dim))[:, 0, :]
            sym_bb_b = (
                np.einsum("nij,nk->nijk", hg.Hbb, gb)
                + np.einsum("nik,nj->nijk", hg.Hbb, gb)
                + np.einsum("njk,ni->nijk", hg.Hbb, gb)
            )
            l_bbb = c1[:, None, None, None] * hg.Hbbb \
                - c2[:, None, None, None] * sym_bb_b \
                + c3[:, None, None, None] * np.einsum("ni,nj,nk->nijk", gb, gb, gb)
            g3[idx] += -np.matmul(miflat, l_bbb.reshape(idx.size, 49, 7))[:, 0, :]

        # ---- assemble: direct - 0.5 tr(Minv dM/dtheta) - 0.5 v' C ----
        # the mode shift db/dtheta follows the exact Hessian; its
        # eigenvalues are floored so that fold points of the
        # non-concave inner problem cannot put poles in the gradient
        vals, vecs = np.linalg.eigh(m_exact)
        floor = np.maximum(1e-3 * np.median(vals, axis=1, keepdims=True), 1e-8)
        vals = np.maximum(vals, floor)
        v = np.einsum("nij,nj->ni", vecs,
                      np.einsum("nij,ni->nj", vecs, g3) / vals)
        grad += -0.5 * tr1.sum(axis=0) - 0.5 * np.einsum("ni,nik->k", v, cmat)
        if not want_d_matrix:
            return grad
        return grad, self._d_matrix_gradient(b, minv, v, dinv)

    @staticmethod
    def _d_matrix_gradient(b, minv, v, dinv):
        """Matrix gradient of the summed Laplace marginals in D.

        Sums, over patients, the derivative of
        -(1/2) b'D^-1 b - (1/2) log det D - (1/2) log det M(D)
        including the implicit mode shift (v = M^-1 g3 as in the theta
        gradient). Returned symmetrized; chain through a Cholesky
        factor as 2 sym(G) L.
        """
        n = b.shape[0]
        w = b @ dinv                      # D^-1 b per patient
        r = v @ dinv                      # D^-1 M^-1 g3 per patient
        g = 0.5 * (w.T @ w)
        g += -0.5 * n * dinv
        g += 0.5 * dinv @ minv.sum(axis=0) @ dinv
        cross = r.T @ w
        g += -0.25 * (cross + cross.T)
        return 0.5 * (g + g.T)
