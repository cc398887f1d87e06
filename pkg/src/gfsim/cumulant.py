"""Laplace exponents, cumulant functions, Cramer roots, drift calibration.

The driving Levy process is parameterized by (b, sigma^2, Lambda) through

    psi(q) = b q + sigma^2 q^2 / 2 + int (e^{qy} - 1 + q (1 - e^y)) Lambda(dy),

a compensation convention that requires e^y to be integrable at +infinity.
The cumulant adds the fragmentation term:

    kappa(q) = psi(q) + int_{y<0} (1 - e^y)^q Lambda(dy).

For the stable-maps family the cumulant has the closed form evaluated by
`kappa_theta_closed`; the quadrature route through a calibrated triplet must
agree with it, which is the main correctness anchor of this module.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.special import digamma, gamma as gamma_fn

from . import levy
from .errors import DivergentIntegralError, NoSignChangeError, QuadratureError
from .levy import JumpMeasureSpec

TOL_ROOT = 1e-9

QUAD_EPSABS = 1e-12
QUAD_EPSREL = 1e-10


def _quad(f, a, b) -> float:
    with np.errstate(over="raise"), warnings.catch_warnings():
        # roundoff warnings near integrable endpoint singularities are routine;
        # the error estimate below is what gates acceptance
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, a, b, limit=400,
                                      epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL)
        except FloatingPointError as exc:
            raise DivergentIntegralError(f"integrand overflow on [{a}, {b}]") from exc
    if not math.isfinite(val):
        raise DivergentIntegralError(f"integral diverges on [{a}, {b}]")
    if err > max(1e-10, 1e-8 * abs(val)):
        raise QuadratureError(f"quadrature residual {err:.2e} too large on [{a}, {b}]",
                              residual=err)
    return val


def _split_points(spec: JumpMeasureSpec, side: str) -> list:
    """Panel breakpoints: the activity cutoff and the canonical support break."""
    delta = spec.cutoff_delta
    if side == "neg":
        a, b = spec.neg_support
        # an infinite left tail is cut where any admissible integrand mass
        # (at most constant times the measure) is below double precision
        pts = [a] if np.isfinite(a) else [-80.0]
        inner = [-levy.LOG2, -delta]
        return sorted({max(p, pts[0]) for p in inner if pts[0] < p < b} | {pts[0], b})
    a, b = spec.pos_support
    hi = b if np.isfinite(b) else np.inf
    pts = [a, delta, 1.0]
    return sorted({p for p in pts if a <= p < hi}) + [hi]


def _integrate_spec(spec: JumpMeasureSpec, f: Callable, side: str) -> float:
    """Panelled adaptive quadrature of f * density over one side of the support."""
    if side == "neg" and not spec.has_neg():
        return 0.0
    if side == "pos" and not spec.has_pos():
        return 0.0
    pts = _split_points(spec, side)
    total = 0.0
    g = lambda y: f(y) * float(spec.density(y))
    for lo, hi in zip(pts[:-1], pts[1:]):
        total += _quad(g, lo, hi)
    return total


def _exp_tail_diverges(spec: JumpMeasureSpec, q: float) -> bool:
    """Probe whether e^{qy} density(y) fails to decay at +infinity."""
    if not spec.has_pos() or np.isfinite(spec.pos_support[1]):
        return False
    ys = np.array([12.0, 20.0, 28.0])
    vals = np.asarray(spec.density(ys), dtype=float) * np.exp(q * ys)
    vals = vals[vals > 0]
    return len(vals) >= 2 and bool(np.any(np.diff(np.log(vals)) > -1e-3))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevyTriplet:
    """Drift, Gaussian coefficient and jump measure of the driving process."""

    drift_b: float
    gaussian_sigma2: float
    jumps: Optional[JumpMeasureSpec]

    def __post_init__(self):
        if self.gaussian_sigma2 < 0:
            raise ValueError("gaussian_sigma2 must be nonnegative")
        if self.jumps is not None:
            self._check_jump_integrability(self.jumps)

    @staticmethod
    def _check_jump_integrability(spec: JumpMeasureSpec) -> None:
        # small jumps must integrate y^2, large positive jumps must integrate e^y
        if _exp_tail_diverges(spec, 1.0):
            raise DivergentIntegralError("jump measure does not integrate e^y at +inf")
        small = 0.0
        if spec.has_neg():
            small += _integrate_spec(spec, lambda y: min(1.0, y * y), "neg")
        if spec.has_pos():
            small += _integrate_spec(spec, lambda y: min(1.0, y * y), "pos")
        if not math.isfinite(small):
            raise DivergentIntegralError("jump measure does not integrate min(1, y^2)")


@dataclass(frozen=True)
class GFParams:
    """Full parameter set of a self-similar growth-fragmentation law."""

    alpha: float
    triplet: LevyTriplet
    omega_minus: float
    omega_plus: float
    rho: float

    def validate(self, tol_root: float = 1e-7) -> None:
        """Numeric invariants: root values, root derivative signs, rho window."""
        if not self.alpha < 0:
            raise ValueError("alpha must be negative")
        if not (0 < self.omega_minus < self.omega_plus):
            raise ValueError("need 0 < omega_minus < omega_plus")
        k = lambda q: kappa_eval(self.triplet, q)
        for w in (self.omega_minus, self.omega_plus):
            if abs(k(w)) > tol_root:
                raise ValueError(f"|kappa({w})| = {abs(k(w)):.2e} exceeds {tol_root:.1e}")
        h = 1e-5
        if not (k(self.omega_minus + h) - k(self.omega_minus - h)) / (2 * h) < 0:
            raise ValueError("kappa'(omega_minus) must be negative")
        if not (k(self.omega_plus + h) - k(self.omega_plus - h)) / (2 * h) > 0:
            raise ValueError("kappa'(omega_plus) must be positive")
        lo = max(2 * self.omega_minus - self.omega_plus, -self.alpha)
        if not (lo < self.rho < self.omega_minus):
            raise ValueError(f"rho={self.rho} outside ({lo}, {self.omega_minus})")


@dataclass(frozen=True)
class StableFamily:
    """One-parameter stable-maps family, theta in (1, 3/2]."""

    theta: float

    def __post_init__(self):
        if not (1.0 < self.theta <= 1.5):
            raise ValueError(f"theta must lie in (1, 3/2], got {self.theta}")

    @property
    def alpha(self) -> float:
        return 1.0 - self.theta

    @property
    def omega_minus(self) -> float:
        return self.theta + 0.5

    @property
    def omega_plus(self) -> float:
        return self.theta + 1.5

    @property
    def rho(self) -> float:
        return self.theta

    @property
    def q_star(self) -> float:
        return self.theta - 0.5

    def params(self, cutoff_delta: float = 1e-4) -> GFParams:
        return stable_params(self.theta, cutoff_delta)


@dataclass(frozen=True)
class LogBoundExponents:
    """Exponents appearing in the log-power envelope bounds.

    upper_exponent is the critical power of |log t| in the upper envelope:
    any exponent strictly above it gives an almost-sure null limsup.
    """

    q_star: float
    q0: float
    upper_exponent: float = 1.0


# ---------------------------------------------------------------------------
# Exponent evaluation
# ---------------------------------------------------------------------------

def psi_eval(triplet: LevyTriplet, q: float) -> float:
    """Laplace exponent of the driving Levy process at q >= 0."""
    if q < 0:
        raise ValueError("q must be nonnegative")
    val = triplet.drift_b * q + 0.5 * triplet.gaussian_sigma2 * q * q
    spec = triplet.jumps
    if spec is None:
        return val
    if _exp_tail_diverges(spec, q):
        raise DivergentIntegralError(f"e^({q} y) is not integrable at +inf")

    def integrand(y):
        # e^{qy} - 1 + q(1 - e^y), written to survive cancellation near 0
        return math.expm1(q * y) - q * math.expm1(y)

    val += _integrate_spec(spec, integrand, "neg")
    if spec.has_pos():
        a, b = spec.pos_support
        near_hi = min(b, 1.0)
        pts = sorted({a, min(spec.cutoff_delta, near_hi), near_hi})
        g = lambda y: integrand(y) * float(spec.density(y))
        for plo, phi in zip(pts[:-1], pts[1:]):
            val += _quad(g, plo, phi)
        if b > 1.0:
            # far tail: e^{qy} and e^y overflow before the density underflows,
            # so integrate the three pieces with log-space products
            mass = _quad(lambda y: float(spec.density(y)), 1.0, b)
            val += levy.exp_moment(spec, q, 1.0, b) + (q - 1.0) * mass \
                - q * levy.exp_moment(spec, 1.0, 1.0, b)
    return val


def fragmentation_term(triplet: LevyTriplet, q: float) -> float:
    """int_{y<0} (1 - e^y)^q Lambda(dy)."""
    spec = triplet.jumps
    if spec is None or not spec.has_neg():
        return 0.0
    return _integrate_spec(spec, lambda y: (-math.expm1(y)) ** q, "neg")


def kappa_eval(triplet: LevyTriplet, q: float) -> float:
    """Cumulant: psi(q) plus the fragmentation term, for q > 0."""
    if q <= 0:
        raise ValueError("q must be positive")
    return psi_eval(triplet, q) + fragmentation_term(triplet, q)


def kappa_theta_closed(theta: float, q) -> float:
    """Closed-form cumulant of the stable-maps family on (theta, 2 theta + 1).

    Evaluated as cos(pi (q - theta)) Gamma(q - theta) Gamma(1 + 2 theta - q) / pi,
    the reflection-formula rewrite of the quotient
    cos(pi (q - theta)) / sin(pi (q - 2 theta)) * Gamma(q - theta) / Gamma(q - 2 theta),
    whose removable 0/0 points (e.g. theta = 3/2, q = 2) never arise here.
    """
    if not (1.0 < theta <= 1.5):
        raise ValueError(f"theta must lie in (1, 3/2], got {theta}")
    q = np.asarray(q, dtype=float)
    if np.any((q <= theta) | (q >= 2 * theta + 1)):
        raise ValueError(f"q must lie strictly inside ({theta}, {2 * theta + 1})")
    val = np.cos(np.pi * (q - theta)) * gamma_fn(q - theta) * gamma_fn(1 + 2 * theta - q) / np.pi
    return float(val) if val.ndim == 0 else val


def kappa_theta_deriv(theta: float, q) -> float:
    """Analytic derivative of the closed-form cumulant (digamma form)."""
    q = np.asarray(q, dtype=float)
    if np.any((q <= theta) | (q >= 2 * theta + 1)):
        raise ValueError(f"q must lie strictly inside ({theta}, {2 * theta + 1})")
    d = q - theta
    g = gamma_fn(d) * gamma_fn(1 + 2 * theta - q)
    val = g * (np.cos(np.pi * d) * (digamma(d) - digamma(1 + 2 * theta - q)) / np.pi
               - np.sin(np.pi * d))
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------------------
# Roots and calibration
# ---------------------------------------------------------------------------

def find_roots(kappa: Callable, bracket_hint: Tuple[float, float],
               tol: float = TOL_ROOT) -> Tuple[Optional[float], Optional[float]]:
    """Locate the two zeros of a convex cumulant inside a bracket by bisection.

    Returns (omega_minus, omega_plus); a side is None when the corresponding
    root is excluded by the bracket (the function is already negative at that
    end).  Raises NoSignChangeError when kappa is nonnegative on the whole
    bracket, i.e. the two-root hypothesis fails there.
    """
    lo, hi = bracket_hint
    if not lo < hi:
        raise ValueError("bracket_hint must be an increasing pair")
    qs = np.linspace(lo, hi, 1025)
    vals = np.empty_like(qs)
    for i, qq in enumerate(qs):
        try:
            v = kappa(float(qq))
        except Exception:
            v = np.nan
        vals[i] = v if math.isfinite(v) else np.nan
    neg = np.where(vals < 0)[0]
    if len(neg) == 0:
        raise NoSignChangeError("kappa takes no negative value in the bracket")

    def bisect(a, b):
        fa = kappa(a)
        for _ in range(200):
            m = 0.5 * (a + b)
            fm = kappa(m)
            if (fa < 0) == (fm < 0):
                a, fa = m, fm
            else:
                b = m
            if b - a < tol:
                break
        return 0.5 * (a + b)

    first, last = neg[0], neg[-1]
    omega_minus = None
    if first > 0 and math.isfinite(vals[first - 1]) and vals[first - 1] > 0:
        omega_minus = bisect(qs[first - 1], qs[first])
    omega_plus = None
    if last < len(qs) - 1 and math.isfinite(vals[last + 1]) and vals[last + 1] > 0:
        omega_plus = bisect(qs[last], qs[last + 1])

    h = 1e-6 * (hi - lo)
    if omega_minus is not None:
        slope = (kappa(omega_minus + h) - kappa(omega_minus - h)) / (2 * h)
        assert slope < 0, f"kappa'(omega_minus)={slope} not negative"
    if omega_plus is not None:
        slope = (kappa(omega_plus + h) - kappa(omega_plus - h)) / (2 * h)
        assert slope > 0, f"kappa'(omega_plus)={slope} not positive"
    return omega_minus, omega_plus


def calibrate_drift(jumps: Optional[JumpMeasureSpec], sigma2: float,
                    omega_minus: float) -> float:
    """Drift b solving kappa(omega_minus) = 0 for the given jump measure.

    Since any two jump measures with the same split-symmetrized negative part
    produce cumulants differing by a linear term, pinning the root at
    omega_minus reproduces the family cumulant exactly on its whole domain.
    """
    if jumps is None:
        return -(0.5 * sigma2 * omega_minus ** 2) / omega_minus
    probe = LevyTriplet(drift_b=0.0, gaussian_sigma2=sigma2, jumps=jumps)
    return -kappa_eval(probe, omega_minus) / omega_minus


_STABLE_CACHE: dict = {}


def stable_params(theta: float, cutoff_delta: float = 1e-4) -> GFParams:
    """Calibrated GFParams for the stable-maps family member theta."""
    key = (round(theta, 12), round(cutoff_delta, 16))
    hit = _STABLE_CACHE.get(key)
    if hit is not None:
        return hit
    fam = StableFamily(theta)
    spec = levy.canonical_lambda(theta, cutoff_delta)
    b = calibrate_drift(spec, 0.0, fam.omega_minus)
    # sigma^2 = 0: the family's spine measures are pure-jump, and a Gaussian
    # part would break the calibrated match with the closed-form cumulant
    triplet = LevyTriplet(drift_b=b, gaussian_sigma2=0.0, jumps=spec)
    params = GFParams(alpha=fam.alpha, triplet=triplet,
                      omega_minus=fam.omega_minus, omega_plus=fam.omega_plus,
                      rho=fam.rho)
    _STABLE_CACHE[key] = params
    return params


# ---------------------------------------------------------------------------
# Derived exponents
# ---------------------------------------------------------------------------

def kappa_domain_sup(triplet: LevyTriplet, q_lo: float, q_hi: float = 64.0,
                     width: float = 1e-3) -> Tuple[float, float]:
    """Bracket sup{q : kappa(q) < infinity} by divergence probing.

    Returns (lo, hi) with kappa finite at lo and divergent at hi.  The upper
    endpoint of the finiteness domain is reported as a bracket, not a guessed
    closed form.
    """
    spec = triplet.jumps
    if spec is None or not spec.has_pos() or np.isfinite(spec.pos_support[1]):
        return (q_hi, math.inf)
    lo, hi = q_lo, None
    q = max(q_lo, 1.0)
    while q < q_hi:
        if _exp_tail_diverges(spec, q):
            hi = q
            break
        lo = q
        q *= 1.5
    if hi is None:
        return (lo, math.inf)
    while hi - lo > width:
        m = 0.5 * (lo + hi)
        if _exp_tail_diverges(spec, m):
            hi = m
        else:
            lo = m
    return (lo, hi)


def log_bound_exponents(params, q_star: Optional[float] = None) -> LogBoundExponents:
    """Exponents of the log-power envelope bounds.

    Accepts a StableFamily (closed-form q*) or GFParams (numeric q* from the
    finiteness domain of kappa beyond omega_plus).
    """
    if isinstance(params, StableFamily):
        q_star = params.q_star if q_star is None else q_star
        alpha, omega_minus, rho = params.alpha, params.omega_minus, params.rho
    else:
        alpha, omega_minus, rho = params.alpha, params.omega_minus, params.rho
        if q_star is None:
            lo, _hi = kappa_domain_sup(params.triplet, params.omega_plus)
            q_star = min(params.omega_plus - params.omega_minus, lo - params.omega_plus)
    a = abs(alpha)
    q0 = omega_minus * (1.0 / a + 1.0 / q_star
                        + max(0.0, (a / rho) * (1.0 / q_star - 1.0 / a)))
    return LogBoundExponents(q_star=q_star, q0=q0)
