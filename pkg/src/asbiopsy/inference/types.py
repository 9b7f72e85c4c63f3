"""Dataset and fit-result containers."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfigurationError


@dataclass(frozen=True)
class Dataset:
    """Interval-censored cohort used for estimation."""

    patients: tuple
    horizon: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        if len(self.patients) == 0:
            raise InvalidConfigurationError("dataset must contain at least one patient")
        for p in self.patients:
            times = [t for t, _ in p.psa_series] + [t for t, _ in p.dre_series]
            times.append(p.biopsy_lower)
            if math.isfinite(p.biopsy_upper):
                times.append(p.biopsy_upper)
            if any(t > self.horizon + 1e-9 for t in times):
                raise InvalidConfigurationError(
                    f"patient {p.id} has observations beyond the horizon"
                )

    @property
    def n_progressed(self):
        return sum(p.progressed for p in self.patients)

    @property
    def n_censored(self):
        return sum(not p.progressed for p in self.patients)


@dataclass(frozen=True)
class FitResult:
    """Fitted joint model with per-patient random-effect summaries.

    curvature is the covariance of the fixed parameters (inverse of the
    negative Hessian of the penalized objective, in the internal theta
    ordering). mcmc_samples, when present, holds posterior draws from
    the Metropolis-within-Gibbs refinement.
    """

    params_hat: object
    re_modes: np.ndarray
    re_curvatures: np.ndarray
    curvature: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    mcmc_samples: dict = None

    def __post_init__(self):
        c = np.asarray(self.curvature, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InvalidConfigurationError("curvature must be square")
        if not np.allclose(c, c.T, atol=1e-8):
            raise InvalidConfigurationError("curvature must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (c + c.T))) < -1e-8:
            raise InvalidConfigurationError("curvature must be positive semidefinite")
