"""Tilted spine processes, the absorption-time oracle, and the area from zero.

The two spine processes share the driving machinery of the cell system but
run under the tilted jump measures.  The minus spine is absorbed at zero and
its absorption time doubles as an oracle for the expected area profile; the
plus spine grows indefinitely and carries the area estimator for the
started-from-zero law, through the decomposition of the area over its
negative jumps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _batch, cumulant, lamperti, levy
from .stats import EstimateWithCI, binomial_estimate

DEFAULT_X0_FLOOR = 1e-4
DEFAULT_ENSEMBLE_DELTA = 1e-2


@dataclass
class SpineConfig:
    """Configuration of one spine simulation.

    x = 0 is allowed only for the plus spine and is approximated by starting
    at x0_floor (the approximation is flagged on the resulting path; the
    started-from-zero law is reached only in the small-x0 limit, so
    experiments must report an x0_floor sensitivity check alongside).
    """

    sign: str
    theta: float
    x: float = 1.0
    x0_floor: float = DEFAULT_X0_FLOOR
    horizon: float = 10.0
    delta: Optional[float] = None
    gaussian_smalljumps: bool = False

    def __post_init__(self):
        if self.sign not in ("minus", "plus"):
            raise ValueError("sign must be 'minus' or 'plus'")
        if self.x < 0 or (self.x == 0 and self.sign == "minus"):
            raise ValueError("x must be positive (zero allowed only for plus)")
        if self.x0_floor <= 0 or self.horizon <= 0:
            raise ValueError("x0_floor and horizon must be positive")

    def validate_exponent(self, n_points: int = 5, tol: float = 1e-8) -> float:
        """Cross-module check: the spine Laplace exponent is the shifted cumulant.

        Evaluates the quadrature exponent of the tilted law at n_points and
        compares with the closed-form cumulant shifted by the corresponding
        root; returns the worst deviation.
        """
        return _exponent_gap(self.theta, self.sign, n_points, tol)


def _exponent_gap(theta: float, sign: str, n_points: int, tol: float) -> float:
    fam = cumulant.StableFamily(theta)
    omega_minus = fam.omega_minus
    # both signs reduce to the minus parameterization: the plus exponent is the
    # same function shifted by (omega_plus - omega_minus)
    shift = 0.0 if sign == "minus" else fam.omega_plus - omega_minus
    spec = levy.spine_measure(theta, "minus")
    mean = cumulant.kappa_theta_deriv(theta, omega_minus)
    law = spine_law(theta, "minus")
    b = _convenient_drift(law)
    trip = cumulant.LevyTriplet(drift_b=b, gaussian_sigma2=0.0, jumps=spec)
    worst = 0.0
    qs = np.linspace(0.05, fam.q_star * 0.9, n_points) + shift
    for q in qs:
        lhs = cumulant.psi_eval(trip, float(q))
        rhs = cumulant.kappa_theta_closed(theta, omega_minus + float(q))
        worst = max(worst, abs(lhs - rhs))
    if worst > tol:
        raise ValueError(f"spine exponent deviates from the shifted cumulant "
                         f"by {worst:.2e} (> {tol:.0e})")
    return worst


def _convenient_drift(law: levy.PathLaw) -> float:
    """Drift of the exponential-compensation parameterization matching `law`."""
    spec = law.jumps
    corr = levy.measure_integral(spec, lambda y: y - math.expm1(y), hi=1.0)
    if spec.has_pos() and spec.pos_support[1] > 1.0:
        corr += levy.measure_integral(spec, lambda y: y + 1.0, lo=1.0)
        corr -= levy.exp_moment(spec, 1.0, 1.0, spec.pos_support[1])
    return law.mean - corr


_LAW_CACHE: dict = {}


def spine_law(theta: float, sign: str, cutoff_delta: float = 1e-4) -> levy.PathLaw:
    """PathLaw of the tilted spine: jump measure plus the closed-form mean."""
    key = (round(theta, 12), sign, round(cutoff_delta, 16))
    hit = _LAW_CACHE.get(key)
    if hit is None:
        fam = cumulant.StableFamily(theta)
        root = fam.omega_minus if sign == "minus" else fam.omega_plus
        spec = levy.spine_measure(theta, sign, cutoff_delta)
        mean = cumulant.kappa_theta_deriv(theta, root)
        hit = levy.PathLaw(jumps=spec, mean=mean, sigma2=0.0)
        _LAW_CACHE[key] = hit
    return hit


def simulate_spine(config: SpineConfig, rng: np.random.Generator) -> lamperti.PssmpPath:
    """One spine path through the Lamperti transform.

    The minus spine is simulated on a Levy horizon generous enough to be
    absorbed (flagged on the result); the plus spine runs to the requested
    pssMp horizon.
    """
    fam = cumulant.StableFamily(config.theta)
    alpha = fam.alpha
    law = spine_law(config.theta, config.sign)
    x0 = config.x if config.x > 0 else config.x0_floor
    started_at_floor = config.x == 0

    if config.sign == "minus":
        levy_horizon = (abs(lamperti.LEVEL_FLOOR) + abs(math.log(x0))) \
            / abs(law.mean) * 3.0 + 10.0
        skel = levy.sample_path_from_law(
            law, levy_horizon, rng, delta=config.delta,
            gaussian_smalljumps=config.gaussian_smalljumps)
        path = lamperti.lamperti_forward(skel, x0, alpha)
        absorbed = skel.endpoint() < lamperti.LEVEL_FLOOR
        res = lamperti.absorption_time(skel, alpha, mean_rate=law.mean)
        path.absorbed = absorbed and res.complete
        path.absorption_time = x0 ** (-alpha) * res.value
        return path

    # plus spine: extend the same skeleton until the clock covers the horizon
    # (independent-increment extension, never a redraw)
    chunk = 10.0
    skel = levy.sample_path_from_law(law, chunk, rng, delta=config.delta,
                                     gaussian_smalljumps=config.gaussian_smalljumps)
    for _ in range(40):
        path = lamperti.lamperti_forward(skel, x0, alpha)
        if path.horizon_t >= config.horizon:
            path.started_at_floor = started_at_floor
            return path
        ext = levy.sample_path_from_law(law, skel.horizon, rng, delta=config.delta,
                                        gaussian_smalljumps=config.gaussian_smalljumps)
        skel = _concat_skeletons(skel, ext)
    raise RuntimeError("plus spine failed to cover the requested horizon")


def _concat_skeletons(s1: levy.PathSkeleton, s2: levy.PathSkeleton) -> levy.PathSkeleton:
    gauss = None
    if s1.gauss_increments is not None:
        # the interval straddling the junction carries both boundary lumps
        gauss = np.concatenate([s1.gauss_increments[:-1],
                                [s1.gauss_increments[-1] + s2.gauss_increments[0]],
                                s2.gauss_increments[1:]])
    return levy.PathSkeleton(
        times=np.concatenate([s1.times, s1.horizon + s2.times]),
        jump_sizes=np.concatenate([s1.jump_sizes, s2.jump_sizes]),
        drift=s1.drift, sigma=s1.sigma, horizon=s1.horizon + s2.horizon,
        gauss_increments=gauss, start=s1.start)


def absorption_samples(theta: float, n: int, rng: np.random.Generator,
                       delta: float = DEFAULT_ENSEMBLE_DELTA,
                       gaussian_smalljumps: bool = True) -> np.ndarray:
    """Absorption times I of the minus spine started from 1 (vectorized)."""
    fam = cumulant.StableFamily(theta)
    law = spine_law(theta, "minus")
    i_vals, _resid, unresolved = lamperti.exp_functional_samples(
        law, fam.alpha, n, rng, delta=delta, gaussian_smalljumps=gaussian_smalljumps)
    if unresolved:
        raise RuntimeError(f"{unresolved} spine paths were not absorbed "
                           f"within the retry budget")
    return i_vals


def prob_I_leq(t: float, theta: float, n_replicas: int, rng: np.random.Generator,
               delta: float = DEFAULT_ENSEMBLE_DELTA,
               seed_manifest: str = "") -> EstimateWithCI:
    """Fraction of minus-spine paths absorbed by time t, with binomial CI."""
    if t <= 0:
        raise ValueError("t must be positive")
    i_vals = absorption_samples(theta, n_replicas, rng, delta=delta)
    k = int(np.sum(i_vals <= t))
    return binomial_estimate(k, n_replicas, seed_manifest)


@dataclass
class EmpiricalCdf:
    """Empirical distribution function of a positive sample."""

    sorted_values: np.ndarray

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.searchsorted(self.sorted_values, u, side="right") \
            / len(self.sorted_values)
        return np.where(u <= 0, 0.0, out)


def absorption_cdf(theta: float, n: int, rng: np.random.Generator,
                   delta: float = DEFAULT_ENSEMBLE_DELTA) -> EmpiricalCdf:
    """Empirical CDF of I, used as the mean-profile table for dust corrections."""
    return EmpiricalCdf(np.sort(absorption_samples(theta, n, rng, delta=delta)))


def area_under_P0plus(t: float, theta: float, rng: np.random.Generator,
                      n_replicas: int, library, dust_cdf,
                      x0_floor: float = DEFAULT_X0_FLOOR,
                      delta: float = DEFAULT_ENSEMBLE_DELTA) -> np.ndarray:
    """Per-replica samples of A(t) under the started-from-zero tilted law.

    Simulates the plus spine from x0_floor to clock time t exactly; every
    resolved negative jump of size v contributes v^w times an independent
    unit-tree area drawn from `library` at the rescaled argument
    (t - s) v^alpha, and sub-cutoff jumps contribute their conditional mean
    through `dust_cdf` (the absorption-time distribution).
    """
    if t <= 0:
        raise ValueError("t must be positive")
    fam = cumulant.StableFamily(theta)
    alpha, w = fam.alpha, fam.omega_minus
    law = spine_law(theta, "plus")
    bl = _batch.build_banded_law(law, [delta], gaussian_smalljumps=True,
                                 frag_exponent=w)
    edges = np.concatenate([[0.0], np.geomspace(1e-4 * t, t * (1 + 1e-9), 49)])
    res = _batch.run_pssmp(bl, alpha, n_replicas, rng, x0=x0_floor,
                           t_horizon=t, collect_events=True,
                           frag_exponent=w, comp_bin_edges=edges)
    out = np.zeros(n_replicas)

    # resolved jumps: library draws at the rescaled argument
    v = np.exp(res.ev_log_before) * (-np.expm1(res.ev_y))
    args = (t - res.ev_time) * v ** alpha
    idx = rng.integers(0, len(library.totals), len(v))
    areas = library.draw_area(idx, args)
    np.add.at(out, res.ev_lane, v ** w * areas)

    # sub-cutoff dust: conditional mean through the absorption-time CDF
    mids = 0.5 * (edges[:-1] + edges[1:])
    cmass = res.comp_mass
    with np.errstate(invalid="ignore", divide="ignore"):
        csize = np.where(cmass > 0, res.comp_size / np.where(cmass > 0, cmass, 1.0), 1.0)
    dust_args = (t - mids[None, :]) * csize ** alpha
    out += np.sum(cmass * dust_cdf(dust_args), axis=1)
    return out
