"""Spline bases and difference penalties.

Two bases are provided:

* a clamped B-spline basis (Cox-de Boor) with analytic first derivatives,
  used for the log baseline hazard (P-spline) and available for general
  regression use;
* a natural cubic spline basis in truncated-power form, used for the
  PSA trajectory, which is linear beyond its boundary knots by
  construction.

Outside the boundary knots the B-spline basis is extended linearly from
the boundary value/slope so that downstream hazard evaluations stay
finite and continuous.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigurationError, OutOfDomainError


@dataclass(frozen=True)
class SplineConfig:
    """Knot layout for a spline basis on a time axis (years)."""

    degree: int
    internal_knots: tuple
    boundary_knots: tuple

    def __post_init__(self):
        lo, hi = self.boundary_knots
        ik = tuple(float(k) for k in self.internal_knots)
        object.__setattr__(self, "internal_knots", ik)
        object.__setattr__(self, "boundary_knots", (float(lo), float(hi)))
        if self.degree < 0:
            raise InvalidConfigurationError("degree must be >= 0")
        if not lo < hi:
            raise InvalidConfigurationError("boundary knots must be increasing")
        if len(ik) > 0:
            if not all(a < b for a, b in zip(ik, ik[1:])):
                raise InvalidConfigurationError("internal knots must be strictly increasing")
            if not (lo < ik[0] and ik[-1] < hi):
                raise InvalidConfigurationError("internal knots must lie inside the boundary knots")

    @property
    def n_basis(self):
        return len(self.internal_knots) + self.degree + 1

    @property
    def knot_vector(self):
        """Clamped knot vector: boundary knots repeated degree+1 times."""
        lo, hi = self.boundary_knots
        return np.concatenate([
            np.full(self.degree + 1, lo),
            np.asarray(self.internal_knots, dtype=float),
            np.full(self.degree + 1, hi),
        ])

    @property
    def all_knots(self):
        """Boundary and internal knots, each once, in increasing order."""
        lo, hi = self.boundary_knots
        return np.concatenate([[lo], self.internal_knots, [hi]])


def _bspline_all(x, knots, degree):
    """All B-spline basis values at points x, via the Cox-de Boor recurrence.

    x : (n,) array clipped to [knots[0], knots[-1]].
    Returns (n, n_basis) with n_basis = len(knots) - degree - 1.
    """
    x = np.asarray(x, dtype=float)
    n_basis = len(knots) - degree - 1
    # Degree 0: indicator of the half-open knot span, right-closed at the
    # last nonempty span so the right boundary evaluates cleanly.
    b = np.zeros((x.size, len(knots) - 1))
    for i in range(len(knots) - 1):
        if knots[i + 1] > knots[i]:
            b[:, i] = (x >= knots[i]) & (x < knots[i + 1])
    last = np.max(np.nonzero(knots < knots[-1])[0])
    b[x >= knots[-1], last] = 1.0
    for d in range(1, degree + 1):
        nb = b.shape[1] - 1
        new = np.zeros((x.size, nb))
        for i in range(nb):
            den1 = knots[i + d] - knots[i]
            den2 = knots[i + d + 1] - knots[i + 1]
            term = 0.0
            if den1 > 0:
                term = (x - knots[i]) / den1 * b[:, i]
            if den2 > 0:
                term = term + (knots[i + d + 1] - x) / den2 * b[:, i + 1]
            new[:, i] = term
        b = new
    return b[:, :n_basis]


def _bspline_all_deriv(x, knots, degree):
    """First derivatives of all B-spline basis functions at points x."""
    x = np.asarray(x, dtype=float)
    n_basis = len(knots) - degree - 1
    if degree == 0:
        return np.zeros((x.size, n_basis))
    lower = _bspline_all(x, knots, degree - 1)
    out = np.zeros((x.size, n_basis))
    for i in range(n_basis):
        den1 = knots[i + degree] - knots[i]
        den2 = knots[i + degree + 1] - knots[i + 1]
        term = 0.0
        if den1 > 0:
            term = degree / den1 * lower[:, i]
        if den2 > 0:
            term = term - degree / den2 * lower[:, i + 1]
        out[:, i] = term
    return out


def _bspline_all_deriv2(x, knots, degree):
    """Second derivatives of all B-spline basis functions at points x."""
    x = np.asarray(x, dtype=float)
    n_basis = len(knots) - degree - 1
    if degree <= 1:
        return np.zeros((x.size, n_basis))
    lower = _bspline_all_deriv(x, knots, degree - 1)
    out = np.zeros((x.size, n_basis))
    for i in range(n_basis):
        den1 = knots[i + degree] - knots[i]
        den2 = knots[i + degree + 1] - knots[i + 1]
        term = 0.0
        if den1 > 0:
            term = degree / den1 * lower[:, i]
        if den2 > 0:
            term = term - degree / den2 * lower[:, i + 1]
        out[:, i] = term
    return out


def _check_domain(t, cfg, extrapolate):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = cfg.boundary_knots
    if not extrapolate and (np.any(t < lo) or np.any(t > hi)):
        raise OutOfDomainError(
            f"time outside spline domain [{lo}, {hi}]; clamp or pass extrapolate=True"
        )
    return t


def bspline_basis(t, cfg, extrapolate=False):
    """B-spline basis values at time t.

    Returns a vector of length cfg.n_basis (or a matrix for array t).
    Values are nonnegative and sum to one inside the boundary knots.
    Outside them the basis is extended linearly from the boundary when
    extrapolate=True, otherwise an OutOfDomainError is raised.
    """
    scalar = np.ndim(t) == 0
    t = _check_domain(t, cfg, extrapolate)
    lo, hi = cfg.boundary_knots
    kv = cfg.knot_vector
    tc = np.clip(t, lo, hi)
    out = _bspline_all(tc, kv, cfg.degree)
    outside = (t < lo) | (t > hi)
    if np.any(outside):
        bnd = np.where(t[outside] < lo, lo, hi)
        base = _bspline_all(bnd, kv, cfg.degree)
        slope = _bspline_all_deriv(bnd, kv, cfg.degree)
        out[outside] = base + slope * (t[outside] - bnd)[:, None]
    return out[0] if scalar else out


def bspline_basis_deriv(t, cfg, extrapolate=False):
    """First derivatives of the B-spline basis at time t. Entries sum to 0."""
    scalar = np.ndim(t) == 0
    t = _check_domain(t, cfg, extrapolate)
    lo, hi = cfg.boundary_knots
    tc = np.clip(t, lo, hi)
    out = _bspline_all_deriv(tc, cfg.knot_vector, cfg.degree)
    outside = (t < lo) | (t > hi)
    if np.any(outside):
        bnd = np.where(t[outside] < lo, lo, hi)
        out[outside] = _bspline_all_deriv(bnd, cfg.knot_vector, cfg.degree)
    return out[0] if scalar else out


def difference_penalty(num_coefficients, order):
    """P-spline penalty matrix D'D for the order-th difference operator D.

    Symmetric positive semidefinite with rank num_coefficients - order;
    its quadratic form vanishes exactly on polynomial coefficient
    sequences of degree < order.
    """
    if not num_coefficients > order >= 1:
        raise InvalidConfigurationError(
            f"need num_coefficients > order >= 1, got {num_coefficients}, {order}"
        )
    d = np.diff(np.eye(num_coefficients), n=order, axis=0)
    return d.T @ d


@dataclass(frozen=True)
class NaturalBasis:
    """Natural cubic spline basis built from clamped B-splines.

    On the knot sequence (boundary, internal..., boundary) of a cubic
    SplineConfig with n internal knots, the full clamped basis has
    N = n + 4 functions. Imposing zero value at the left boundary and
    zero second derivative at both boundaries leaves n + 1 functions,
    each a short combination of neighboring B-splines (so the basis
    stays well conditioned even for closely spaced knots):

        F_1 = k2 B_1 - k1 B_2          (k_j = B_j'' at the left boundary)
        F_m = B_{m+1}                  (interior functions, if any)
        F_{n}   = d0 B_{N-3} - ...     from the right-boundary pair
        F_{n+1} = d1 B_{N-2} - ...     (d_j = B'' at the right boundary)

    Columns are scaled to unit Euclidean combination weight with the
    lower-index coefficient positive. Every F vanishes at the left
    boundary, so a model intercept is the value at entry. Beyond the
    boundary knots the basis extends linearly, matching the natural
    spline convention.
    """

    knots: tuple
    transform: np.ndarray = field(init=False)
    _config: SplineConfig = field(init=False)

    def __post_init__(self):
        xi = tuple(float(k) for k in self.knots)
        if len(xi) < 4:
            raise InvalidConfigurationError(
                "natural basis needs >= 2 internal knots (>= 4 knots total)"
            )
        if not all(a < b for a, b in zip(xi, xi[1:])):
            raise InvalidConfigurationError("knots must be strictly increasing")
        object.__setattr__(self, "knots", xi)
        cfg = SplineConfig(degree=3, internal_knots=xi[1:-1], boundary_knots=(xi[0], xi[-1]))
        object.__setattr__(self, "_config", cfg)
        kv = cfg.knot_vector
        nb = cfg.n_basis
        d2 = _bspline_all_deriv2(np.array([xi[0], xi[-1]]), kv, 3)
        ka, kb = d2[0], d2[1]

        def pair(c_lo, c_hi, i_lo, i_hi):
            v = np.zeros(nb)
            v[i_lo], v[i_hi] = c_hi, -c_lo
            v /= np.linalg.norm([c_hi, c_lo])
            if v[i_lo] < 0:
                v = -v
            return v

        cols = [pair(ka[1], ka[2], 1, 2)]
        for mid in range(3, nb - 3):
            e = np.zeros(nb)
            e[mid] = 1.0
            cols.append(e)
        cols.append(pair(kb[nb - 3], kb[nb - 2], nb - 3, nb - 2))
        cols.append(pair(kb[nb - 2], kb[nb - 1], nb - 2, nb - 1))
        h = np.column_stack(cols)
        h.setflags(write=False)
        object.__setattr__(self, "transform", h)

    @classmethod
    def from_config(cls, cfg):
        if cfg.degree != 3:
            raise InvalidConfigurationError("natural basis is cubic; config degree must be 3")
        return cls(tuple(cfg.all_knots))

    @property
    def n_basis(self):
        return len(self.knots) - 1

    def basis(self, t):
        """Basis values at t; shape (n_basis,) or (nt, n_basis)."""
        return bspline_basis(t, self._config, extrapolate=True) @ self.transform

    def deriv(self, t):
        """First derivatives of the basis at t."""
        return bspline_basis_deriv(t, self._config, extrapolate=True) @ self.transform
