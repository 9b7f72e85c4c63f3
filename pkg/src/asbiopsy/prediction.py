"""Patient-specific dynamic risk of progression.

Given a fitted model and one patient's accumulated history, the
posterior over that patient's random effects conditions on the DRE and
PSA measurements up to the current visit and on being progression-free
at the latest negative biopsy. The cumulative risk at a later time s is

    R(s | t) = 1 - E[ S(0, s; b) / S(0, t; b) ]

with the expectation over that posterior (and over fixed-parameter
draws when available). The expectation is computed by self-normalized
importance sampling: random effects are proposed from the Laplace
Gaussian at the conditional mode, then reweighted by the exact
conditional likelihood, so the estimate is free of the Gaussian
approximation error up to Monte Carlo noise.

Every hazard integral H(t, s_j) is evaluated with its own per-knot-span
quadrature, so the value at a grid point never depends on which other
grid points were requested.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfDomainError, PredictionError
from .inference.engine import LikelihoodEngine, PackedDesign, ThetaLayout, ThetaView
from .inference.fitting import _d_inverse
from .inference.types import FitResult
from .model import AGE_CENTER, JointModelParams, PatientRecord, hazard_breakpoints, psa_time_basis, quadrature_nodes
from .splines import bspline_basis


@dataclass(frozen=True)
class PatientHistory:
    """One patient's data as known at the current visit."""

    age_at_entry: float
    psa_series: tuple
    dre_series: tuple
    latest_negative_biopsy: float
    current_visit: float

    def __post_init__(self):
        object.__setattr__(self, "psa_series",
                           tuple((float(t), float(v)) for t, v in self.psa_series))
        object.__setattr__(self, "dre_series",
                           tuple((float(t), bool(v)) for t, v in self.dre_series))
        if self.latest_negative_biopsy > self.current_visit:
            raise OutOfDomainError("latest biopsy cannot be after the current visit")
        times = [t for t, _ in self.psa_series] + [t for t, _ in self.dre_series]
        if any(t > self.current_visit + 1e-9 for t in times):
            raise OutOfDomainError("measurements after the current visit")

    def to_record(self, pid="query"):
        return PatientRecord(
            id=pid, age_at_entry=self.age_at_entry,
            psa_series=self.psa_series, dre_series=self.dre_series,
            biopsy_lower=self.latest_negative_biopsy, biopsy_upper=math.inf,
        )

    def truncated(self, upto, latest_biopsy=None):
        """History as it looked with data up to time `upto`."""
        t = self.latest_negative_biopsy if latest_biopsy is None else latest_biopsy
        return PatientHistory(
            age_at_entry=self.age_at_entry,
            psa_series=tuple(x for x in self.psa_series if x[0] <= upto + 1e-9),
            dre_series=tuple(x for x in self.dre_series if x[0] <= upto + 1e-9),
            latest_negative_biopsy=t,
            current_visit=upto,
        )


@dataclass(frozen=True)
class RiskPrediction:
    """Cumulative progression risk on a time grid with a 95% band."""

    grid: np.ndarray
    risk: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray
    ess: float = np.nan

    def __post_init__(self):
        for name in ("grid", "risk", "band_lower", "band_upper"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.risk) < -1e-12):
            raise PredictionError("risk profile must be nondecreasing")


@dataclass(frozen=True)
class RiskConfig:
    draws: int = 500
    seed: int = 0
    param_uncertainty: bool = True
    proposal_inflation: float = 1.2


@dataclass(frozen=True)
class PosteriorRandomEffects:
    mode: np.ndarray
    covariance: np.ndarray
    draws: np.ndarray = None
    weights: np.ndarray = None


def _fit_pieces(fit):
    """Accept a FitResult or bare JointModelParams as the model source."""
    if isinstance(fit, FitResult):
        return fit.params_hat, fit.curvature, fit.mcmc_samples
    if isinstance(fit, JointModelParams):
        return fit, None, None
    raise TypeError(f"expected FitResult or JointModelParams, got {type(fit)!r}")


def posterior_random_effects(fit, hist, n_draws=0, seed=0):
    """Mode/curvature posterior summary of the random effects.

    Conditions on the history's measurements and on surviving past the
    latest negative biopsy. With n_draws > 0 adds importance-weighted
    Gaussian proposal draws.
    """
    params, _, _ = _fit_pieces(fit)
    record = hist.to_record()
    layout = ThetaLayout(params.baseline_spline.n_basis)
    packed = PackedDesign([record], params)
    engine = LikelihoodEngine(packed, layout)
    tv = ThetaView(layout.pack(params), layout)
    dinv, logdet = _d_inverse(params.re_covariance)
    b, ll, _, conv = engine.find_modes(tv, dinv, logdet, tol=1e-10)
    if not conv.all():
        raise PredictionError("posterior mode finding did not converge")
    m_fisher = -engine.grad_hess_b(tv, b, dinv, fisher=True)[1]
    cov = np.linalg.inv(m_fisher[0])
    cov = 0.5 * (cov + cov.T)
    draws = weights = None
    if n_draws > 0:
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(7))
        eps = rng.standard_normal((n_draws, 7))
        draws = b[0] + eps @ chol.T
        logq = -0.5 * (eps ** 2).sum(axis=1)
        logp = engine.loglik(tv, draws, dinv, logdet)
        lw = logp - logq
        lw -= lw.max()
        weights = np.exp(lw)
        weights /= weights.sum()
    return PosteriorRandomEffects(mode=b[0], covariance=cov, draws=draws, weights=weights)


class _GapHazard:
    """Hazard integrals H(t, s_j) vectorized over posterior draws."""

    def __init__(self, params, age, t, s_values):
        breaks = hazard_breakpoints(params)
        basis = psa_time_basis(params)
        ad = age - AGE_CENTER
        nodes_all, w_all, idx = [], [], [0]
        for s in s_values:
            nd, ww = quadrature_nodes(t, float(s), breaks)
            nodes_all.append(nd)
            w_all.append(ww)
            idx.append(idx[-1] + nd.size)
        self.idx = np.asarray(idx)
        nodes = np.concatenate(nodes_all) if nodes_all else np.empty(0)
        self.w = np.concatenate(w_all) if w_all else np.empty(0)
        k = nodes.size
        self.w0 = (bspline_basis(nodes, params.baseline_spline, extrapolate=True)
                   if k else np.zeros((0, params.baseline_spline.n_basis)))
        bt = basis.basis(nodes) if k else np.zeros((0, 4))
        btd = basis.deriv(nodes) if k else np.zeros((0, 4))
        self.xd = np.column_stack([np.ones(k), nodes, np.full(k, ad), np.full(k, ad * ad)])
        self.xp = np.column_stack([np.ones(k), bt, np.full(k, ad), np.full(k, ad * ad)])
        self.xpd = np.column_stack([np.zeros(k), btd, np.zeros(k), np.zeros(k)])

    def integrals(self, thetas, layout, b_draws):
        """(K, n_s) array of H(t, s_j) for each draw."""
        if self.w.size == 0:
            return np.zeros((b_draws.shape[0], self.idx.size - 1))
        eta = self.xd @ thetas[:, layout.sl_beta_d].T + self.xd[:, :2] @ b_draws[:, :2].T
        m = self.xp @ thetas[:, layout.sl_beta_p].T + self.xp[:, :5] @ b_draws[:, 2:].T
        mp = self.xpd @ thetas[:, layout.sl_beta_p].T + self.xpd[:, :5] @ b_draws[:, 2:].T
        e = (
            self.w0 @ thetas[:, layout.sl_baseline].T
            + np.outer(self.xd[:, 2], thetas[:, layout.sl_gamma.start])
            + np.outer(self.xd[:, 3], thetas[:, layout.sl_gamma.start + 1])
            + thetas[:, layout.i_a1d] * eta
            + thetas[:, layout.i_a1p] * m
            + thetas[:, layout.i_a2p] * mp
        )
        wh = self.w[:, None] * np.exp(np.clip(e, -700, 700))
        csum = np.concatenate([np.zeros((1, wh.shape[1])), np.cumsum(wh, axis=0)], axis=0)
        return (csum[self.idx[1:]] - csum[self.idx[:-1]]).T


class PatientPredictor:
    """Reusable posterior-draw machinery for one patient history."""

    def __init__(self, fit, hist, config=None):
        self.config = config or RiskConfig()
        self.params, self.curvature, self.mcmc = _fit_pieces(fit)
        self.hist = hist
        self.t = float(hist.latest_negative_biopsy)
        self.layout = ThetaLayout(self.params.baseline_spline.n_basis)
        record = hist.to_record()
        self.packed = PackedDesign([record], self.params)
        self.engine = LikelihoodEngine(self.packed, self.layout)
        self.theta_hat = self.layout.pack(self.params)
        self._draw_cache = None

    # -- draws ---------------------------------------------------------

    def _theta_draws(self, k, rng):
        lay = self.layout
        if self.mcmc is not None and len(self.mcmc.get("theta", [])) > 0:
            sample = np.asarray(self.mcmc["theta"])
            pick = rng.integers(0, sample.shape[0], size=k)
            return sample[pick]
        if (self.config.param_uncertainty and self.curvature is not None
                and np.any(self.curvature)):
            vals, vecs = np.linalg.eigh(self.curvature)
            root = vecs @ np.diag(np.sqrt(np.maximum(vals, 0.0)))
            return self.theta_hat + rng.standard_normal((k, lay.size)) @ root.T
        return np.broadcast_to(self.theta_hat, (k, lay.size)).copy()

    def draws(self):
        """Importance-weighted posterior draws of (theta, b), cached."""
        if self._draw_cache is not None:
            return self._draw_cache
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dinv, logdet = _d_inverse(self.params.re_covariance)
        tv = ThetaView(self.theta_hat, self.layout)
        b_mode, _, _, conv = self.engine.find_modes(tv, dinv, logdet, tol=1e-10)
        if not conv.all():
            raise PredictionError("posterior mode finding did not converge")
        m_fisher = -self.engine.grad_hess_b(tv, b_mode, dinv, fisher=True)[1]
        cov = np.linalg.inv(m_fisher[0])
        cov = 0.5 * (cov + cov.T) * cfg.proposal_inflation ** 2
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(7))
        k = cfg.draws
        thetas = self._theta_draws(k, rng)
        eps = rng.standard_normal((k, 7))
        b_draws = b_mode[0] + eps @ chol.T
        # target: conditional likelihood at each draw's own theta
        logp = self._loglik_draws(thetas, b_draws, dinv, logdet)
        logq = -0.5 * (eps ** 2).sum(axis=1)
        lw = logp - logq
        lw -= lw.max()
        w = np.exp(lw)
        w /= w.sum()
        ess = 1.0 / float((w ** 2).sum())
        self._draw_cache = (thetas, b_draws, w, ess, b_mode[0], cov)
        return self._draw_cache

    def _loglik_draws(self, thetas, b_draws, dinv, logdet):
        """Conditional log-likelihood of the history per (theta, b) draw."""
        lay = self.layout
        pk = self.packed
        xd = pk.dre_X[0]
        yd, md = pk.dre_y[0], pk.dre_mask[0]
        eta = xd @ thetas[:, lay.sl_beta_d].T + xd[:, :2] @ b_draws[:, :2].T
        ll = (md[:, None] * (yd[:, None] * eta - np.logaddexp(0.0, eta))).sum(axis=0)
        xp = pk.psa_X[0]
        yp, mp_mask = pk.psa_y[0], pk.psa_mask[0]
        m = xp @ thetas[:, lay.sl_beta_p].T + xp[:, :5] @ b_draws[:, 2:].T
        inv_sigma = np.exp(-thetas[:, lay.i_log_sigma])
        z = (yp[:, None] - m) * inv_sigma
        t = 1.0 + z * z / 3.0
        ll += (mp_mask[:, None] * (np.log(inv_sigma) - 2.0 * np.log(t))).sum(axis=0)
        if self.t > 0:
            gap = _GapHazard(self.params, self.hist.age_at_entry, 0.0, [self.t])
            ll -= gap.integrals(thetas, lay, b_draws)[:, 0]
        quad = np.einsum("ki,ij,kj->k", b_draws, dinv, b_draws)
        ll += -0.5 * quad
        return ll

    # -- risk ----------------------------------------------------------

    def risks(self, s_values):
        """Weighted cumulative risks and per-draw risks at s_values."""
        s_values = np.atleast_1d(np.asarray(s_values, dtype=float))
        if np.any(s_values < self.t - 1e-9):
            raise OutOfDomainError("risk queried before the latest negative biopsy")
        thetas, b_draws, w, ess, _, _ = self.draws()
        gap = _GapHazard(self.params, self.hist.age_at_entry, self.t,
                         np.maximum(s_values, self.t))
        h = gap.integrals(thetas, self.layout, b_draws)
        per_draw = -np.expm1(-h)
        risk = w @ per_draw
        return np.clip(risk, 0.0, 1.0), per_draw, w, ess


def cumulative_risk(fit, hist, s_query, config=None):
    """R(s | t): progression risk by s given progression-free at t."""
    pred = PatientPredictor(fit, hist, config)
    risk, _, _, _ = pred.risks([s_query])
    return float(risk[0])


def _weighted_quantile(values, weights, q):
    order = np.argsort(values)
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    return float(np.interp(q, cum / cum[-1], v))


def risk_profile(fit, hist, grid, config=None):
    """Cumulative risk over a grid, one shared set of posterior draws."""
    pred = PatientPredictor(fit, hist, config)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    risk, per_draw, w, ess = pred.risks(grid)
    lo = np.array([_weighted_quantile(per_draw[:, j], w, 0.025)
                   for j in range(grid.size)])
    hi = np.array([_weighted_quantile(per_draw[:, j], w, 0.975)
                   for j in range(grid.size)])
    lo = np.minimum(lo, risk)
    hi = np.maximum(hi, risk)
    risk = np.maximum.accumulate(risk)
    return RiskPrediction(grid=grid, risk=risk, band_lower=lo, band_upper=hi, ess=ess)


def predictive_density(fit, hist, grid, config=None):
    """Density of the progression time on the grid (derivative of risk)."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size < 2:
        raise OutOfDomainError("need at least two grid points for a density")
    profile = risk_profile(fit, hist, grid, config)
    dens = np.gradient(profile.risk, grid)
    return np.clip(dens, 0.0, None)
