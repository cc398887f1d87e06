"""Jump measures and Levy path skeletons.

Houses the canonical jump measure of the stable-maps family, the two tilted
spine measures, inverse-CDF jump sampling above an activity cutoff, and the
compound-Poisson-plus-drift skeleton sampler.

Conventions. Jump measures are specified by a density on R \\ {0} together
with tail callables.  The canonical family has its negative support restricted
to (-log 2, 0): a jump y < 0 splits a cell of size x into a kept piece x*e^y
and a child x*(1 - e^y), and we adopt the convention that the cell keeps the
larger piece, so e^y >= 1/2.  Any other resolution of the split produces the
same cumulant up to a drift shift, hence the same process law.

For the family with parameter theta, the left tail behaves like
(c_minus/theta) * x**(-theta) as x -> 0+ (regular variation with index
-theta); `tail_equivalence_check` verifies this numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gamma as gamma_fn

from .errors import EmptySupportError, RateOverflowError

LOG2 = math.log(2.0)

# Probability mass beyond the tabulated range of an inverse-CDF table; draws
# past it clamp to the last node.
TABLE_TAIL_EPS = 1e-12
TABLE_NODES = 1024


# ---------------------------------------------------------------------------
# The split involution T(y) = log(1 - e^y) on (-inf, 0)
# ---------------------------------------------------------------------------

def involution(y):
    """T(y) = log(1 - e^y), exchanging the two log-fragment sizes of a split."""
    y = np.asarray(y, dtype=float)
    return np.log(-np.expm1(y))


def involution_jacobian(y):
    """|T'(y)| = e^y / (1 - e^y)."""
    y = np.asarray(y, dtype=float)
    return np.exp(y) / (-np.expm1(y))


def folded_density(density: Callable) -> Callable:
    """Push a density on (-inf, 0) through T: returns y -> f(T(y)) |T'(y)|."""

    def pushed(y):
        return density(involution(y)) * involution_jacobian(y)

    return pushed


# ---------------------------------------------------------------------------
# Jump measure specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpMeasureSpec:
    """A jump measure given by density and tails.

    density must accept numpy arrays and vanish outside the stated supports.
    neg_tail(x) is the mass of (-inf, -x], pos_tail(x) the mass of [x, inf),
    both for x > 0.  cutoff_delta is the default activity cutoff used by the
    samplers.
    """

    density: Callable
    neg_tail: Callable
    pos_tail: Callable
    neg_support: Optional[tuple] = None   # (a, b), a < b <= 0; a may be -inf
    pos_support: Optional[tuple] = None   # (a, b), 0 <= a < b; b may be inf
    cutoff_delta: float = 1e-4
    key: tuple = ()                       # content key for table caching

    def has_neg(self) -> bool:
        return self.neg_support is not None

    def has_pos(self) -> bool:
        return self.pos_support is not None


def _quad(f, a, b, points=None):
    val, err = integrate.quad(f, a, b, limit=400, epsabs=1e-12, epsrel=1e-10,
                              points=points if (points and np.isfinite([a, b]).all()) else None)
    return val


def measure_integral(spec: JumpMeasureSpec, f: Callable, lo: float = -np.inf,
                     hi: float = np.inf) -> float:
    """Integrate f(y) against the measure over [lo, hi], respecting supports."""
    total = 0.0
    if spec.has_neg():
        a, b = spec.neg_support
        a2, b2 = max(a, lo), min(b, hi, 0.0)
        if a2 < b2:
            total += _quad(lambda y: f(y) * float(spec.density(y)), a2, b2)
    if spec.has_pos():
        a, b = spec.pos_support
        a2, b2 = max(a, lo, 0.0), min(b, hi)
        if a2 < b2:
            total += _quad(lambda y: f(y) * float(spec.density(y)), a2, b2)
    return total


def exp_moment(spec: JumpMeasureSpec, q: float, lo: float, hi: float) -> float:
    """int e^{qy} density(y) dy over [lo, hi], product computed in log space.

    Safe on far tails where e^{qy} alone overflows while the product decays.
    """
    def g(y):
        d = float(spec.density(y))
        if d <= 0.0:
            return 0.0
        return math.exp(q * y + math.log(d))
    val, _ = integrate.quad(g, lo, hi, limit=400, epsabs=1e-12, epsrel=1e-10)
    return val


def check_tail_consistency(spec: JumpMeasureSpec, probes: Sequence[float] = (0.05, 0.2),
                           tol: float = 1e-8) -> float:
    """Numeric consistency of tails against the density; returns the worst gap."""
    worst = 0.0
    for x in probes:
        if spec.has_neg():
            direct = measure_integral(spec, lambda y: 1.0, hi=-x)
            worst = max(worst, abs(direct - float(spec.neg_tail(x))) / max(1.0, abs(direct)))
        if spec.has_pos():
            direct = measure_integral(spec, lambda y: 1.0, lo=x)
            worst = max(worst, abs(direct - float(spec.pos_tail(x))) / max(1.0, abs(direct)))
    if worst > tol:
        raise ValueError(f"tail/density inconsistency {worst:.3e} exceeds {tol:.1e}")
    return worst


# ---------------------------------------------------------------------------
# Canonical family measures
# ---------------------------------------------------------------------------

def family_constants(theta: float) -> tuple:
    """(c_minus, c_plus) for the stable-maps family."""
    c_minus = gamma_fn(theta + 1.0) / math.pi
    c_plus = c_minus * math.sin(math.pi * (theta - 0.5))
    if abs(theta - 1.5) < 1e-14:
        c_plus = 0.0  # sin(pi) exactly; no positive jumps in the Brownian case
    return c_minus, c_plus


def _check_theta(theta: float) -> None:
    if not (1.0 < theta <= 1.5):
        raise ValueError(f"theta must lie in (1, 3/2], got {theta}")


def canonical_lambda(theta: float, cutoff_delta: float = 1e-4) -> JumpMeasureSpec:
    """Jump measure of the driving process for the family with parameter theta.

    Negative part c_minus * e^{-theta y} (1-e^y)^{-(theta+1)} on (-log 2, 0)
    (larger-fragment convention), positive part
    c_plus * e^{-theta y} (e^y-1)^{-(theta+1)} on (0, inf).
    """
    _check_theta(theta)
    c_minus, c_plus = family_constants(theta)
    tp1 = theta + 1.0

    def density(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        neg = (y > -LOG2) & (y < 0.0)
        if np.any(neg):
            yn = y[neg]
            out[neg] = c_minus * np.exp(-theta * yn) * (-np.expm1(yn)) ** (-tp1)
        if c_plus > 0.0:
            pos = y > 0.0
            if np.any(pos):
                yp = y[pos]
                # log-stable form of e^{-theta y} (e^y - 1)^{-(theta+1)}
                out[pos] = c_plus * np.exp(-(theta + tp1) * yp
                                           - tp1 * np.log1p(-np.exp(-yp)))
        return out

    def neg_tail(x):
        # mass of (-inf, -x]; substitution u = 1 - e^y gives a symmetric integrand
        def one(xv):
            if xv >= LOG2:
                return 0.0
            lo = -math.expm1(-xv)
            return c_minus * _quad(lambda u: (u * (1.0 - u)) ** (-tp1), lo, 0.5)
        return _vectorize_scalar(one, x)

    def pos_tail(x):
        if c_plus == 0.0:
            return np.zeros_like(np.asarray(x, dtype=float)) + 0.0
        def one(xv):
            lo = math.expm1(xv)
            return c_plus * _quad(lambda v: v ** (-tp1) * (1.0 + v) ** (-tp1), lo, np.inf)
        return _vectorize_scalar(one, x)

    return JumpMeasureSpec(
        density=density,
        neg_tail=neg_tail,
        pos_tail=pos_tail,
        neg_support=(-LOG2, 0.0),
        pos_support=(0.0, np.inf) if c_plus > 0.0 else None,
        cutoff_delta=cutoff_delta,
        key=("canonical_lambda", round(theta, 12)),
    )


def spine_measure(theta: float, sign: str, cutoff_delta: float = 1e-4) -> JumpMeasureSpec:
    """Jump measure of the tilted spine process, sign in {"minus", "plus"}.

    minus: c_minus e^{y/2} (1-e^y)^{-(theta+1)} for y < 0 and
           c_plus  e^{y/2} (e^y-1)^{-(theta+1)} for y > 0;
    plus:  same with e^{3y/2}.
    """
    _check_theta(theta)
    if sign not in ("minus", "plus"):
        raise ValueError(f"sign must be 'minus' or 'plus', got {sign!r}")
    c_minus, c_plus = family_constants(theta)
    tp1 = theta + 1.0
    expo = 0.5 if sign == "minus" else 1.5

    def density(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        neg = y < 0.0
        if np.any(neg):
            yn = y[neg]
            out[neg] = c_minus * np.exp(expo * yn) * (-np.expm1(yn)) ** (-tp1)
        if c_plus > 0.0:
            pos = y > 0.0
            if np.any(pos):
                yp = y[pos]
                out[pos] = c_plus * np.exp((expo - tp1) * yp
                                           - tp1 * np.log1p(-np.exp(-yp)))
        return out

    def neg_tail(x):
        def one(xv):
            # u = e^y: integral over (0, e^{-x}) of u^{expo-1} (1-u)^{-(theta+1)}
            hi = math.exp(-xv)
            return c_minus * _quad(lambda u: u ** (expo - 1.0) * (1.0 - u) ** (-tp1), 0.0, hi)
        return _vectorize_scalar(one, x)

    def pos_tail(x):
        if c_plus == 0.0:
            return np.zeros_like(np.asarray(x, dtype=float)) + 0.0
        def one(xv):
            # v = e^y: integral over (e^x, inf) of v^{expo-1} (v-1)^{-(theta+1)}
            lo = math.exp(xv)
            return c_plus * _quad(lambda v: v ** (expo - 1.0) * (v - 1.0) ** (-tp1), lo, np.inf)
        return _vectorize_scalar(one, x)

    return JumpMeasureSpec(
        density=density,
        neg_tail=neg_tail,
        pos_tail=pos_tail,
        neg_support=(-np.inf, 0.0),
        pos_support=(0.0, np.inf) if c_plus > 0.0 else None,
        cutoff_delta=cutoff_delta,
        key=("spine_measure", round(theta, 12), sign),
    )


def _vectorize_scalar(fn, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return fn(float(x))
    return np.array([fn(float(v)) for v in x])


# ---------------------------------------------------------------------------
# Inverse-CDF jump tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpTable:
    """Tabulated inverse CDF for one side of a measure restricted to |y| >= delta.

    Nodes are log-spaced in |y| so every octave of the (possibly heavy) tail
    is resolved; sampling is a binary search on the CDF values followed by
    local interpolation.
    """

    side: str            # "neg" or "pos"
    delta: float
    rate: float          # total mass above the cutoff
    cdf_nodes: np.ndarray  # increasing probabilities at the nodes, 0 .. 1
    y_nodes: np.ndarray    # signed jump values at the nodes

    def sample(self, u: np.ndarray) -> np.ndarray:
        return np.interp(u, self.cdf_nodes, self.y_nodes)


_TABLE_CACHE: dict = {}


def build_jump_table(spec: JumpMeasureSpec, side: str, delta: float,
                     nodes: int = TABLE_NODES) -> JumpTable:
    """Inverse-CDF table for draws from the measure restricted to one side.

    The CDF is accumulated on a log-spaced fine grid in |y| and inverted at
    `nodes` uniform probability points.  The far tail beyond probability mass
    TABLE_TAIL_EPS is clamped to the last node.
    """
    cache_key = (spec.key if spec.key else id(spec), side, round(delta, 16), nodes)
    hit = _TABLE_CACHE.get(cache_key)
    if hit is not None:
        return hit

    if side == "neg":
        if not spec.has_neg():
            raise EmptySupportError("measure has no negative part")
        rate = float(spec.neg_tail(delta))
        lo_abs = delta
        sup_lo = spec.neg_support[0]
        if np.isfinite(sup_lo):
            hi_abs = -sup_lo
        else:
            hi_abs = _tail_quantile(lambda x: float(spec.neg_tail(x)) / rate, delta)
    elif side == "pos":
        if not spec.has_pos():
            raise EmptySupportError("measure has no positive part")
        rate = float(spec.pos_tail(delta))
        lo_abs = delta
        sup_hi = spec.pos_support[1]
        if np.isfinite(sup_hi):
            hi_abs = sup_hi
        else:
            hi_abs = _tail_quantile(lambda x: float(spec.pos_tail(x)) / rate, delta)
    else:
        raise ValueError(f"side must be 'neg' or 'pos', got {side!r}")
    if rate <= 0.0:
        raise EmptySupportError(f"no mass above cutoff {delta} on side {side!r}")

    refine = 16
    fine = np.exp(np.linspace(math.log(lo_abs), math.log(hi_abs), refine * nodes + 1))
    y_fine = -fine if side == "neg" else fine
    dens = np.asarray(spec.density(y_fine), dtype=float)
    # cumulative mass between the cutoff and |y|, accumulated in increasing |y|
    cdf = integrate.cumulative_trapezoid(dens, x=fine, initial=0.0)
    cdf /= cdf[-1]
    keep = np.arange(0, refine * nodes + 1, refine)
    cdf_nodes = cdf[keep].copy()
    cdf_nodes[0], cdf_nodes[-1] = 0.0, 1.0
    abs_nodes = fine[keep]
    y_nodes = -abs_nodes if side == "neg" else abs_nodes
    table = JumpTable(side=side, delta=delta, rate=rate,
                      cdf_nodes=cdf_nodes, y_nodes=y_nodes)
    _TABLE_CACHE[cache_key] = table
    return table


def _tail_quantile(norm_tail: Callable, delta: float) -> float:
    """Smallest |y| whose normalized tail mass is below TABLE_TAIL_EPS."""
    x = max(1.0, 2.0 * delta)
    while norm_tail(x) > TABLE_TAIL_EPS and x < 1e4:
        x *= 2.0
    return x


def sample_jump(spec: JumpMeasureSpec, side: str, rng: np.random.Generator,
                size: int = 1, delta: Optional[float] = None) -> np.ndarray:
    """Draw jumps from the measure restricted to |y| >= delta on one side."""
    table = build_jump_table(spec, side, spec.cutoff_delta if delta is None else delta)
    return table.sample(rng.random(size))


# ---------------------------------------------------------------------------
# Path skeletons
# ---------------------------------------------------------------------------

@dataclass
class PathSkeleton:
    """Compound-Poisson-plus-drift skeleton of a Levy path on [0, horizon].

    Between jump times the path is affine with slope `drift`.  When the
    Gaussian small-jump substitution is active, the Brownian displacement of
    each inter-jump interval is lumped at its right endpoint and recorded in
    `gauss_increments` (same length as `times` plus one final entry for the
    interval ending at the horizon).
    """

    times: np.ndarray
    jump_sizes: np.ndarray
    drift: float
    sigma: float
    horizon: float
    gauss_increments: Optional[np.ndarray] = None
    start: float = 0.0

    def endpoint(self) -> float:
        val = self.start + self.drift * self.horizon + float(np.sum(self.jump_sizes))
        if self.gauss_increments is not None:
            val += float(np.sum(self.gauss_increments))
        return val

    def values_after_jumps(self) -> np.ndarray:
        """Path value immediately after each jump."""
        vals = self.start + self.drift * self.times + np.cumsum(self.jump_sizes)
        if self.gauss_increments is not None:
            vals = vals + np.cumsum(self.gauss_increments[: len(self.times)])
        return vals


@dataclass(frozen=True)
class PathLaw:
    """What the skeleton sampler needs: jump measure, unit-time mean, Gaussian part.

    `mean` is E[path(1)] of the target Levy process; the sampler compensates
    the removed sub-cutoff jumps through the drift so the skeleton mean is
    exact at every cutoff.
    """

    jumps: JumpMeasureSpec
    mean: float
    sigma2: float = 0.0


def path_law_from_triplet(triplet) -> PathLaw:
    """Build a PathLaw from a LevyTriplet (duck-typed to avoid a cyclic import)."""
    spec = triplet.jumps
    if spec is None:
        return PathLaw(jumps=_null_measure(), mean=triplet.drift_b, sigma2=triplet.gaussian_sigma2)
    # unit-time mean: b + int (y + 1 - e^y) Lambda(dy), with the exponential
    # moment integrated in log space on the far positive tail
    mean = triplet.drift_b + measure_integral(spec, lambda y: y - math.expm1(y), hi=1.0)
    if spec.has_pos() and spec.pos_support[1] > 1.0:
        mean += measure_integral(spec, lambda y: y + 1.0, lo=1.0)
        mean -= exp_moment(spec, 1.0, 1.0, spec.pos_support[1])
    return PathLaw(jumps=spec, mean=mean, sigma2=triplet.gaussian_sigma2)


def _null_measure() -> JumpMeasureSpec:
    zero = lambda y: np.zeros_like(np.asarray(y, dtype=float))
    return JumpMeasureSpec(density=zero, neg_tail=zero, pos_tail=zero,
                           neg_support=None, pos_support=None, key=("null",))


@dataclass(frozen=True)
class CompensationConstants:
    """Per-cutoff compensation data for one PathLaw."""

    delta: float
    rate_neg: float
    rate_pos: float
    drift: float      # effective inter-jump slope
    sigma2: float     # Gaussian variance per unit time (true part + optional proxy)

    @property
    def rate(self) -> float:
        return self.rate_neg + self.rate_pos


def compensation_constants(law: PathLaw, delta: float,
                           gaussian_smalljumps: bool = False) -> CompensationConstants:
    spec = law.jumps
    rate_neg = float(spec.neg_tail(delta)) if spec.has_neg() else 0.0
    rate_pos = float(spec.pos_tail(delta)) if spec.has_pos() else 0.0
    mean_big = measure_integral(spec, lambda y: y, hi=-delta) + \
        measure_integral(spec, lambda y: y, lo=delta)
    drift = law.mean - mean_big
    sigma2 = law.sigma2
    if gaussian_smalljumps:
        sigma2 += measure_integral(spec, lambda y: y * y, lo=-delta, hi=delta)
    return CompensationConstants(delta=delta, rate_neg=rate_neg, rate_pos=rate_pos,
                                 drift=drift, sigma2=sigma2)


def sample_path(triplet, horizon: float, rng: np.random.Generator,
                delta: Optional[float] = None, gaussian_smalljumps: bool = False,
                max_rate: float = 5e6) -> PathSkeleton:
    """Sample a skeleton of the Levy process defined by a LevyTriplet.

    Jumps with |y| >= delta arrive as a Poisson process at the exact tail
    rate; the removed small jumps are folded into the drift (and optionally a
    Gaussian term carrying their variance).
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    law = path_law_from_triplet(triplet)
    return sample_path_from_law(law, horizon, rng, delta=delta,
                                gaussian_smalljumps=gaussian_smalljumps, max_rate=max_rate)


def sample_path_from_law(law: PathLaw, horizon: float, rng: np.random.Generator,
                         delta: Optional[float] = None, gaussian_smalljumps: bool = False,
                         max_rate: float = 5e6) -> PathSkeleton:
    spec = law.jumps
    delta = spec.cutoff_delta if delta is None else delta
    cc = compensation_constants(law, delta, gaussian_smalljumps)
    if cc.rate * horizon > max_rate:
        raise RateOverflowError(
            f"expected jump count {cc.rate * horizon:.3e} exceeds budget {max_rate:.3e}; "
            f"raise the cutoff (delta={delta:g})")

    n = rng.poisson(cc.rate * horizon)
    times = np.sort(rng.random(n)) * horizon
    sizes = np.empty(n)
    if n:
        p_neg = cc.rate_neg / cc.rate
        neg = rng.random(n) < p_neg
        if neg.any():
            tab = build_jump_table(spec, "neg", delta)
            sizes[neg] = tab.sample(rng.random(int(neg.sum())))
        if (~neg).any():
            tab = build_jump_table(spec, "pos", delta)
            sizes[~neg] = tab.sample(rng.random(int((~neg).sum())))
    gauss = None
    sigma = math.sqrt(cc.sigma2)
    if cc.sigma2 > 0.0:
        bounds = np.concatenate([[0.0], times, [horizon]])
        dts = np.diff(bounds)
        gauss = rng.standard_normal(n + 1) * sigma * np.sqrt(dts)
    return PathSkeleton(times=times, jump_sizes=sizes, drift=cc.drift, sigma=sigma,
                        horizon=horizon, gauss_increments=gauss)


# ---------------------------------------------------------------------------
# Regular-variation diagnostics
# ---------------------------------------------------------------------------

@dataclass
class RegularVariationFit:
    """Fitted local power of the left tail near 0 and related diagnostics."""

    index_estimate: float
    slowly_varying_samples: list        # (x, neg_tail(x) * x**rho) pairs
    spine_tail_ratios: list = field(default_factory=list)
    # ratio of the spine left tail to its tail-equivalent expression; -> 1 as x -> 0


def tail_equivalence_check(theta: float, x_grid: Sequence[float]) -> RegularVariationFit:
    """Fit the left-tail index of the canonical measure and check the spine tail.

    For each x in x_grid (inside (0,1)), computes neg_tail(x), fits the local
    power by log-log regression, and forms the ratio of the spine-minus tail
    below log(x) to neg_tail(x) * x**omega_minus * rho / (omega_minus - rho).
    """
    _check_theta(theta)
    xs = np.asarray(sorted(x_grid), dtype=float)
    if np.any((xs <= 0) | (xs >= 1)):
        raise ValueError("x values must lie in (0, 1)")
    lam = canonical_lambda(theta)
    pim = spine_measure(theta, "minus")
    omega_minus = theta + 0.5
    rho = theta
    tails = np.array([float(lam.neg_tail(x)) for x in xs])
    slope = np.polyfit(np.log(xs), np.log(tails), 1)[0]
    sv = [(float(x), float(t * x ** rho)) for x, t in zip(xs, tails)]
    ratios = []
    factor = rho / (omega_minus - rho)
    for x, t in zip(xs, tails):
        spine_tail = float(pim.neg_tail(-math.log(x)))
        ratios.append((float(x), spine_tail / (t * x ** omega_minus * factor)))
    return RegularVariationFit(index_estimate=float(slope),
                               slowly_varying_samples=sv,
                               spine_tail_ratios=ratios)
