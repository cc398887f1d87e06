"""Vectorized lockstep simulation of Levy skeletons across replicas.

All ensemble experiments run through this module.  Replicas are grouped into
batches; each batch owns one generator stream and its lanes advance jump by
jump in lockstep, with finished lanes compacted away.  Stream consumption is a
deterministic function of the batch state alone, so results are bit-identical
for any worker partitioning over batches.

Between jumps a skeleton is affine in Levy time, so every exponential
functional of the path (the Lamperti clock, tilted mass integrals) has a
closed per-segment form; no time grid is involved anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import levy
from .levy import JumpMeasureSpec, PathLaw

_TINY = 1e-12


def seg_exp_integral(xi0, slope, dt, c):
    """int_0^dt exp(c (xi0 + slope u)) du, elementwise."""
    xi0 = np.asarray(xi0, dtype=float)
    base = np.exp(c * xi0)
    cs = c * np.asarray(slope, dtype=float)
    x = cs * dt
    small = np.abs(x) < 1e-8
    out = np.empty_like(base)
    with np.errstate(over="ignore", invalid="ignore"):
        out = base * np.where(small, dt * (1.0 + 0.5 * x), np.expm1(x) / np.where(small, 1.0, cs))
    return out


def seg_exp_invert(xi0, slope, c, target):
    """Smallest u with int_0^u exp(c (xi0 + slope s)) ds = target, elementwise.

    Assumes the target is reachable (target <= seg_exp_integral(..., dt) for
    the dt the caller has in hand).
    """
    xi0 = np.asarray(xi0, dtype=float)
    cs = c * np.asarray(slope, dtype=float)
    t_scaled = np.asarray(target, dtype=float) * np.exp(-c * xi0)
    small = np.abs(cs) < _TINY
    safe = np.where(small, 1.0, cs)
    with np.errstate(over="ignore", invalid="ignore"):
        u = np.where(small, t_scaled, np.log1p(cs * t_scaled) / safe)
    return u


# ---------------------------------------------------------------------------
# Banded sampler constants
# ---------------------------------------------------------------------------

@dataclass
class BandedLaw:
    """Per-cutoff compensation constants and jump tables for one PathLaw.

    Band k uses cutoff deltas[k].  frag_mass / frag_size are the sub-cutoff
    fragment-mass constants used by the branching engines:
    frag_mass[k] = int_{-delta_k < y < 0} (1 - e^y)^w J(dy) and frag_size[k]
    the corresponding (1-e^y)-weighted mean fragment, for the exponent w
    supplied at build time (0 disables them).
    """

    law: PathLaw
    deltas: np.ndarray
    rate_neg: np.ndarray
    rate_pos: np.ndarray
    drift: np.ndarray
    sigma: np.ndarray
    neg_nodes: np.ndarray        # [n_bands, nodes+1] inverse-CDF values (or NaN row)
    pos_nodes: np.ndarray
    u_grid: np.ndarray
    frag_mass: np.ndarray
    frag_size: np.ndarray
    gaussian_smalljumps: bool = True

    @property
    def rate(self) -> np.ndarray:
        return self.rate_neg + self.rate_pos


_BANDED_CACHE: dict = {}


def build_banded_law(law: PathLaw, deltas, gaussian_smalljumps: bool = True,
                     frag_exponent: float = 0.0) -> BandedLaw:
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    key = (law.jumps.key if law.jumps.key else id(law.jumps), round(law.mean, 14),
           round(law.sigma2, 14), tuple(np.round(deltas, 16)), gaussian_smalljumps,
           round(frag_exponent, 12))
    hit = _BANDED_CACHE.get(key)
    if hit is not None:
        return hit

    spec = law.jumps
    nb = len(deltas)
    nodes = levy.TABLE_NODES
    rate_neg = np.zeros(nb)
    rate_pos = np.zeros(nb)
    drift = np.zeros(nb)
    sigma = np.zeros(nb)
    neg_nodes = np.full((nb, nodes + 1), np.nan)
    pos_nodes = np.full((nb, nodes + 1), np.nan)
    frag_mass = np.zeros(nb)
    frag_size = np.zeros(nb)
    u_grid = None
    for k, d in enumerate(deltas):
        cc = levy.compensation_constants(law, float(d), gaussian_smalljumps)
        rate_neg[k], rate_pos[k] = cc.rate_neg, cc.rate_pos
        drift[k] = cc.drift
        sigma[k] = math.sqrt(cc.sigma2)
        if cc.rate_neg > 0:
            tab = levy.build_jump_table(spec, "neg", float(d))
            neg_nodes[k] = tab.y_nodes
            u_grid = tab.u_grid
        if cc.rate_pos > 0:
            tab = levy.build_jump_table(spec, "pos", float(d))
            pos_nodes[k] = tab.y_nodes
            u_grid = tab.u_grid
        if frag_exponent > 0.0 and spec.has_neg():
            w = frag_exponent
            frag_mass[k] = levy.measure_integral(
                spec, lambda y: (-math.expm1(y)) ** w, lo=-float(d), hi=0.0)
            if frag_mass[k] > 0:
                frag_size[k] = levy.measure_integral(
                    spec, lambda y: (-math.expm1(y)) ** (w + 1.0), lo=-float(d), hi=0.0) \
                    / frag_mass[k]
    if u_grid is None:
        u_grid = np.linspace(0.0, 1.0, nodes + 1)
    bl = BandedLaw(law=law, deltas=deltas, rate_neg=rate_neg, rate_pos=rate_pos,
                   drift=drift, sigma=sigma, neg_nodes=neg_nodes, pos_nodes=pos_nodes,
                   u_grid=u_grid, frag_mass=frag_mass, frag_size=frag_size,
                   gaussian_smalljumps=gaussian_smalljumps)
    _BANDED_CACHE[key] = bl
    return bl


def sample_band_jumps(bl: BandedLaw, band: np.ndarray, u_side: np.ndarray,
                      u_jump: np.ndarray) -> np.ndarray:
    """Signed jump draws for lanes sitting in (possibly different) bands."""
    p_neg = bl.rate_neg[band] / bl.rate[band]
    is_neg = u_side < p_neg
    y = np.empty(len(band))
    idx = np.arange(len(band))
    for nodes, mask in ((bl.neg_nodes, is_neg), (bl.pos_nodes, ~is_neg)):
        if not mask.any():
            continue
        bsel = band[mask]
        # vectorized per-row interpolation on the shared probability grid
        pos = np.clip(np.searchsorted(bl.u_grid, u_jump[mask], side="right") - 1,
                      0, len(bl.u_grid) - 2)
        u0 = bl.u_grid[pos]
        w = (u_jump[mask] - u0) / (bl.u_grid[pos + 1] - u0)
        y[idx[mask]] = (1.0 - w) * nodes[bsel, pos] + w * nodes[bsel, pos + 1]
    return y


# ---------------------------------------------------------------------------
# Pure Levy endpoints (no path dependence)
# ---------------------------------------------------------------------------

def levy_endpoints(bl: BandedLaw, horizon: float, n: int,
                   rng: np.random.Generator, band: int = 0) -> np.ndarray:
    """Values of the skeleton at a fixed Levy time for n replicas."""
    rate = float(bl.rate[band])
    counts = rng.poisson(rate * horizon, size=n)
    total = int(counts.sum())
    out = np.full(n, bl.drift[band] * horizon)
    if total:
        lane = np.repeat(np.arange(n), counts)
        y = sample_band_jumps(bl, np.full(total, band, dtype=np.int64),
                              rng.random(total), rng.random(total))
        np.add.at(out, lane, y)
    if bl.sigma[band] > 0:
        out += rng.standard_normal(n) * bl.sigma[band] * math.sqrt(horizon)
    return out


# ---------------------------------------------------------------------------
# Lockstep pssMp runner
# ---------------------------------------------------------------------------

@dataclass
class PssmpBatchResult:
    """Per-lane outcome of a lockstep run."""

    clock: np.ndarray            # pssMp time at stop
    final_log_value: np.ndarray  # log of the absolute size at stop
    stopped_at_floor: np.ndarray  # bool
    levy_time: np.ndarray        # Levy time consumed
    # optional event collection (negative jumps): ragged, concatenated
    ev_lane: Optional[np.ndarray] = None
    ev_time: Optional[np.ndarray] = None       # pssMp time of the jump
    ev_log_before: Optional[np.ndarray] = None  # log absolute size before the jump
    ev_y: Optional[np.ndarray] = None
    comp_mass: Optional[np.ndarray] = None     # [n, n_bins] sub-cutoff fragment mass
    comp_size: Optional[np.ndarray] = None     # mass-weighted mean fragment size
    state: Optional[tuple] = None              # (xi, clock_u, s_levy) for resuming


def run_pssmp(bl: BandedLaw, alpha: float, n: int, rng: np.random.Generator,
              x0: float = 1.0, floor: Optional[float] = None,
              t_horizon: Optional[float] = None, levy_horizon: Optional[float] = None,
              collect_events: bool = False, frag_exponent: float = 0.0,
              comp_bin_edges: Optional[np.ndarray] = None,
              resume: Optional[tuple] = None,
              max_steps: int = 100_000_000) -> PssmpBatchResult:
    """Run n lanes of the pssMp driven by the banded law (single band 0).

    Stops each lane at whichever comes first of: absolute size below `floor`,
    pssMp clock above `t_horizon`, Levy time above `levy_horizon`.  The clock
    uses the exact affine-segment closed form; the horizon crossing is
    inverted exactly within the final segment.

    `resume`, when given, is (xi, clock_u, s_levy) state from a previous run
    whose lanes should continue (used for honest horizon retries: a lane is
    never redrawn, only extended).
    """
    if floor is None and t_horizon is None and levy_horizon is None:
        raise ValueError("need at least one stopping rule")
    band = 0
    rate = float(bl.rate[band])
    if rate <= 0.0:
        raise ValueError("law has no jump activity above the cutoff; "
                         "use drift-only closed forms instead")
    a = float(bl.drift[band])
    sig = float(bl.sigma[band])
    c = -alpha  # clock exponent; positive since alpha < 0
    lx0 = math.log(x0)
    scale = x0 ** (-alpha)  # pssMp seconds per unit of unit-coordinate clock

    if resume is None:
        xi = np.zeros(n)               # log value relative to x0
        clock_u = np.zeros(n)          # unit-coordinate clock
        s_levy = np.zeros(n)
    else:
        xi, clock_u, s_levy = (arr.copy() for arr in resume)
    active = np.arange(n)
    out_clock = np.zeros(n)
    out_logv = np.full(n, lx0)
    out_floor = np.zeros(n, dtype=bool)
    out_levy = np.zeros(n)

    floor_rel = -np.inf if floor is None else math.log(floor) - lx0
    t_budget = np.inf if t_horizon is None else t_horizon
    s_budget = np.inf if levy_horizon is None else levy_horizon

    ev_lane, ev_time, ev_logb, ev_y = [], [], [], []
    n_bins = 0 if comp_bin_edges is None else len(comp_bin_edges) - 1
    comp_mass = np.zeros((n, n_bins)) if n_bins else None
    comp_size = np.zeros((n, n_bins)) if n_bins else None
    cmass = float(bl.frag_mass[band]) if frag_exponent else 0.0
    csize = float(bl.frag_size[band]) if frag_exponent else 0.0

    steps = 0
    while len(active):
        m = len(active)
        steps += m
        if steps > max_steps:
            raise RuntimeError(f"lockstep budget exceeded ({max_steps} steps)")
        dt = rng.exponential(1.0 / rate, size=m)
        u_side = rng.random(m)
        u_jump = rng.random(m)
        g = rng.standard_normal(m) * (sig * np.sqrt(dt)) if sig > 0 else None

        xa = xi[active]
        sa = s_levy[active]
        # clip the segment at the Levy-time budget
        dt = np.minimum(dt, s_budget - sa)
        seg_clock = seg_exp_integral(xa, a, dt, c)
        t_after = scale * (clock_u[active] + seg_clock)

        # lanes whose pssMp horizon falls inside this segment stop exactly there
        crossed = t_after > t_budget
        if np.any(crossed):
            ca = active[crossed]
            target = t_budget / scale - clock_u[ca]
            u_star = seg_exp_invert(xi[ca], a, c, target)
            out_clock[ca] = t_budget
            out_logv[ca] = lx0 + xi[ca] + a * u_star
            out_levy[ca] = s_levy[ca] + u_star
            if n_bins:
                _accrue_comp(comp_mass, comp_size, ca, xi[ca], a, u_star, c,
                             cmass, csize, clock_u[ca], scale, lx0,
                             comp_bin_edges, frag_exponent)

        keep = ~crossed
        act = active[keep]
        if not len(act):
            break
        dt = dt[keep]
        seg_clock = seg_clock[keep]
        u_side, u_jump = u_side[keep], u_jump[keep]
        if g is not None:
            g = g[keep]

        if n_bins:
            _accrue_comp(comp_mass, comp_size, act, xi[act], a, dt, c,
                         cmass, csize, clock_u[act], scale, lx0,
                         comp_bin_edges, frag_exponent)

        xi[act] += a * dt
        if g is not None:
            xi[act] += g
        clock_u[act] += seg_clock
        s_levy[act] += dt

        # lanes that exhausted the Levy-time budget stop before jumping
        levy_done = s_levy[act] >= s_budget - 1e-15
        if np.any(levy_done):
            ld = act[levy_done]
            out_clock[ld] = scale * clock_u[ld]
            out_logv[ld] = lx0 + xi[ld]
            out_levy[ld] = s_levy[ld]
            act = act[~levy_done]
            u_side, u_jump = u_side[~levy_done], u_jump[~levy_done]
            if not len(act):
                active = act
                continue

        y = sample_band_jumps(bl, np.zeros(len(act), dtype=np.int64), u_side, u_jump)
        if collect_events:
            negj = y < 0
            if np.any(negj):
                ev_lane.append(act[negj])
                ev_time.append(scale * clock_u[act][negj])
                ev_logb.append(lx0 + xi[act][negj])
                ev_y.append(y[negj])
        xi[act] += y

        dead = xi[act] < floor_rel
        if np.any(dead):
            dd = act[dead]
            out_clock[dd] = scale * clock_u[dd]
            out_logv[dd] = lx0 + xi[dd]
            out_floor[dd] = True
            out_levy[dd] = s_levy[dd]
        active = act[~dead]

    res = PssmpBatchResult(clock=out_clock, final_log_value=out_logv,
                           stopped_at_floor=out_floor, levy_time=out_levy,
                           state=(xi, clock_u, s_levy))
    if collect_events:
        res.ev_lane = np.concatenate(ev_lane) if ev_lane else np.empty(0, dtype=np.int64)
        res.ev_time = np.concatenate(ev_time) if ev_time else np.empty(0)
        res.ev_log_before = np.concatenate(ev_logb) if ev_logb else np.empty(0)
        res.ev_y = np.concatenate(ev_y) if ev_y else np.empty(0)
    if n_bins:
        res.comp_mass = comp_mass
        res.comp_size = comp_size
    return res


def _accrue_comp(comp_mass, comp_size, lanes, xi0, a, dt, c, cmass, csize,
                 clock0, scale, lx0, edges, w):
    """Accrue the sub-cutoff fragment-mass compensator of one segment.

    Mass rate per unit Levy time is value^w * cmass; the segment integral is
    closed-form.  Mass lands in the height bin of the segment midpoint.
    """
    if cmass <= 0.0:
        return
    seg_mass = cmass * np.exp(w * lx0) * seg_exp_integral(xi0, a, dt, w)
    h_mid = scale * (clock0 + 0.5 * seg_exp_integral(xi0, a, dt, c))
    b = np.clip(np.searchsorted(edges, h_mid) - 1, 0, comp_mass.shape[1] - 1)
    np.add.at(comp_mass, (lanes, b), seg_mass)
    sz = csize * np.exp(lx0 + xi0 + 0.5 * a * dt)
    np.add.at(comp_size, (lanes, b), seg_mass * sz)
