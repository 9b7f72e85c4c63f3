"""Biopsy decision rules and the per-patient scheduling loop.

Decisions happen at the six-monthly follow-up visits, always honoring
the one-year minimum gap between biopsies. Risk-based rules compare the
patient's dynamic cumulative risk at the visit (conditioned on the
latest negative biopsy and all measurements revealed so far) against a
fixed threshold, or against a visit-specific threshold that maximizes
the F1 score over a reference pool.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, InvalidConfigurationError
from .prediction import PatientHistory, PatientPredictor, RiskConfig

PRIAS_FIXED_YEARS = (1.0, 4.0, 7.0, 10.0)
PRIAS_DT_THRESHOLD = 10.0
MIN_GAP_YEARS = 1.0
_EPS = 1e-9


@dataclass(frozen=True)
class DecisionRule:
    """One biopsy scheduling policy."""

    kind: str                  # fixed_risk | f1 | heuristic | annual | prias
    threshold: float = None    # fixed_risk only
    interval: float = None     # heuristic only

    def __post_init__(self):
        if self.kind not in ("fixed_risk", "f1", "heuristic", "annual", "prias"):
            raise InvalidConfigurationError(f"unknown rule kind {self.kind!r}")
        if self.kind == "fixed_risk":
            if self.threshold is None or not 0.0 <= self.threshold <= 1.0:
                raise InvalidConfigurationError("fixed_risk needs a threshold in [0, 1]")
        if self.kind == "heuristic" and (self.interval is None or self.interval <= 0):
            raise InvalidConfigurationError("heuristic needs a positive interval")

    @classmethod
    def parse(cls, text):
        """Parse rule strings like annual, prias, risk:0.10, risk:f1, heuristic:2."""
        text = text.strip().lower()
        if text == "annual":
            return cls(kind="annual")
        if text == "prias":
            return cls(kind="prias")
        if text.startswith("risk:"):
            arg = text.split(":", 1)[1]
            if arg == "f1":
                return cls(kind="f1")
            return cls(kind="fixed_risk", threshold=float(arg))
        if text.startswith("heuristic:"):
            return cls(kind="heuristic", interval=float(text.split(":", 1)[1]))
        raise InvalidConfigurationError(f"cannot parse rule {text!r}")

    @property
    def label(self):
        if self.kind == "fixed_risk":
            return f"risk:{self.threshold:g}"
        if self.kind == "heuristic":
            return f"heuristic:{self.interval:g}"
        if self.kind == "f1":
            return "risk:f1"
        return self.kind


@dataclass(frozen=True)
class ScheduleOutcome:
    """Biopsies one schedule produced for one patient."""

    patient_id: str
    biopsy_times: tuple
    detected: bool
    delay: float = None

    def __post_init__(self):
        times = tuple(float(t) for t in self.biopsy_times)
        object.__setattr__(self, "biopsy_times", times)
        if any(b - a < MIN_GAP_YEARS - 1e-6 for a, b in zip(times, times[1:])):
            raise InvalidConfigurationError("biopsies closer than the one-year gap")
        if self.delay is not None and self.delay < -1e-9:
            raise InvalidConfigurationError("delay must be nonnegative")

    @property
    def n_biopsies(self):
        return len(self.biopsy_times)


def decide_fixed(risk_at_visit, kappa):
    """Biopsy when the visit risk strictly exceeds the threshold."""
    if not 0.0 <= risk_at_visit <= 1.0 or not 0.0 <= kappa <= 1.0:
        raise InvalidConfigurationError("risk and threshold must lie in [0, 1]")
    return risk_at_visit > kappa


def tpr_ppv(risks, kappa):
    """Model-based true-positive rate and positive predictive value.

    Each pool member's risk R_k(s|t) acts both as the classifier score
    and as the probability weight of a true event in (t, s]. PPV is
    None when no pool member is flagged.
    """
    risks = np.asarray(risks, dtype=float)
    if risks.size == 0:
        raise InsufficientDataError("empty reference pool")
    flagged = risks > kappa
    denom = risks.sum()
    tpr = float(risks[flagged].sum() / denom) if denom > 0 else 0.0
    if not flagged.any():
        return tpr, None
    ppv = float(risks[flagged].sum() / flagged.sum())
    return tpr, ppv


F1_GRID = np.round(np.arange(0.0, 1.0, 0.01), 2)


def f1_threshold(risks, grid=F1_GRID):
    """Threshold maximizing F1 over the grid; None when F1 is 0 everywhere.

    Ties break toward the smallest threshold, and thresholds with an
    undefined PPV score F1 = 0.
    """
    best_kappa, best_f1 = None, 0.0
    for kappa in grid:
        tpr, ppv = tpr_ppv(risks, kappa)
        if ppv is None or tpr + ppv == 0.0:
            continue
        f1 = 2.0 * tpr * ppv / (tpr + ppv)
        if f1 > best_f1 + 1e-12:
            best_kappa, best_f1 = float(kappa), f1
    return best_kappa


def psa_doubling_time(psa_series):
    """Inverse slope of the least-squares fit of log2(PSA) on time.

    Infinite when the fitted slope is nonpositive. Zero/negative PSA
    values cannot enter the log and are dropped.
    """
    pts = [(t, v) for t, v in psa_series if v > 0]
    times = np.array([t for t, _ in pts])
    if len(set(times.tolist())) < 2:
        raise InsufficientDataError("need >= 2 PSA values at distinct times")
    logs = np.log2([v for _, v in pts])
    tc = times - times.mean()
    slope = float(tc @ (logs - logs.mean()) / (tc @ tc))
    return 1.0 / slope if slope > 0 else math.inf


def _prias_fixed_grid(after):
    """First fixed PRIAS biopsy year strictly after `after`."""
    for y in PRIAS_FIXED_YEARS:
        if y > after + _EPS:
            return y
    year = 15.0
    while year <= after + _EPS:
        year += 5.0
    return year


def next_biopsy_prias(hist, latest_biopsy=None, dt_threshold=PRIAS_DT_THRESHOLD):
    """Next biopsy time under the PRIAS protocol.

    Patients with a low PSA doubling time (0 < DT <= 10 years by
    default) move to annual biopsies at anniversary years; everyone else
    follows years 1, 4, 7, 10 and every five years after. The one-year
    gap is enforced in both branches.
    """
    latest = hist.latest_negative_biopsy if latest_biopsy is None else latest_biopsy
    try:
        dt = psa_doubling_time(hist.psa_series)
    except InsufficientDataError:
        dt = math.inf
    if 0.0 < dt <= dt_threshold:
        earliest = max(latest + MIN_GAP_YEARS, hist.current_visit)
        return float(math.ceil(earliest - _EPS))
    return max(_prias_fixed_grid(latest), latest + MIN_GAP_YEARS)


def dre_visit_times(horizon=10.0):
    """Follow-up visits where biopsy decisions are made (six-monthly)."""
    return np.round(np.arange(0.5, horizon + 1e-9, 0.5), 6)


class F1ThresholdSource:
    """Visit-specific thresholds from a reference pool, cached per (t, s).

    Pool risks follow the landmark convention: each member's risk uses
    their measurements up to the landmark time t and conditions on
    being progression-free at t.
    """

    def __init__(self, fit, pool_histories, risk_config=None, fallback=0.10):
        self.fit = fit
        self.pool = list(pool_histories)
        self.risk_config = risk_config or RiskConfig()
        self.fallback = fallback
        self._pred_cache = {}
        self._kappa_cache = {}

    def pool_risks(self, t, s):
        risks = np.empty(len(self.pool))
        for i, hist in enumerate(self.pool):
            key = (i, round(t, 6))
            pred = self._pred_cache.get(key)
            if pred is None:
                trunc = hist.truncated(t, latest_biopsy=t)
                pred = PatientPredictor(self.fit, trunc, self.risk_config)
                self._pred_cache[key] = pred
            risks[i] = pred.risks([s])[0][0]
        return risks

    def kappa(self, t, s):
        key = (round(t, 6), round(s, 6))
        if key not in self._kappa_cache:
            k = f1_threshold(self.pool_risks(t, s))
            self._kappa_cache[key] = self.fallback if k is None else k
        return self._kappa_cache[key]


def run_schedule(fit_or_truth, patient, rule, visit_grid=None, horizon=10.0,
                 risk_config=None, f1_source=None, risk_cache=None):
    """Walk a simulated patient through follow-up under one rule.

    At each visit only the measurements taken so far are revealed; a
    biopsy at time u is positive exactly when the (latent) progression
    time is <= u, and the walk stops at the first positive biopsy or at
    the horizon.
    """
    if visit_grid is None:
        visit_grid = dre_visit_times(horizon)
    if rule.kind == "f1" and f1_source is None:
        raise InvalidConfigurationError("f1 rule needs an F1ThresholdSource")
    risk_config = risk_config or RiskConfig()
    latest = 0.0
    biopsies = []
    detected = False
    delay = None
    true_time = patient.true_progression_time
    for u in visit_grid:
        u = float(u)
        if u > horizon + _EPS:
            break
        if u - latest < MIN_GAP_YEARS - _EPS:
            continue
        if rule.kind == "annual":
            do_biopsy = True
        elif rule.kind == "heuristic":
            do_biopsy = u - latest >= rule.interval - _EPS
        elif rule.kind == "prias":
            hist = patient.history_at(u, latest)
            do_biopsy = u >= next_biopsy_prias(hist, latest_biopsy=latest) - _EPS
        else:
            risk = _visit_risk(fit_or_truth, patient, u, latest, risk_config, risk_cache)
            kappa = rule.threshold if rule.kind == "fixed_risk" else f1_source.kappa(latest, u)
            do_biopsy = decide_fixed(risk, kappa)
        if not do_biopsy:
            continue
        biopsies.append(u)
        if true_time <= u + _EPS:
            detected = True
            delay = u - true_time
            break
        latest = u
    return ScheduleOutcome(patient_id=patient.id, biopsy_times=tuple(biopsies),
                           detected=detected, delay=delay)


def _visit_risk(fit, patient, u, latest, risk_config, cache):
    key = (round(latest, 6), round(u, 6))
    if cache is not None and key in cache:
        return cache[key]
    hist = patient.history_at(u, latest)
    pred = PatientPredictor(fit, hist, risk_config)
    risk = float(pred.risks([u])[0][0])
    if cache is not None:
        cache[key] = risk
    return risk
