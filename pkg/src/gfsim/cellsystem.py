"""Ulam-Harris cell system, intrinsic-area martingale, and area profiles.

Trees are grown breadth-first by a vectorized engine that advances every
active cell one jump per round in its own Levy time.  Each cell is simulated
relative to a reference size, and the reference is rebased (a strong-Markov
restart) whenever the value leaves a fixed multiplicative band, so the jump
resolution always tracks the scale at which children near x_min must be
resolved.

Truncation semantics: a cell whose value first drops below x_min is killed
and logged with its current mass x_kill^{omega_minus} at its kill height,
the exact conditional expectation of its subtree's terminal mass.  Children
below the per-band jump cutoff never appear as jumps; their aggregate mass is
accrued along each segment through the sub-cutoff fragment compensator and
emitted as one diffuse record per cell (mass-weighted mean height and
fragment size), with a switch to disable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _batch, levy
from .cumulant import GFParams
from .errors import BudgetExceededError

DEFAULT_BAND_FACTOR = 4.0
DEFAULT_DELTA_CAP = 0.25
DEFAULT_DELTA_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def parent_label(label: tuple) -> tuple:
    if not label:
        raise ValueError("the root has no parent")
    return label[:-1]


def generation(label: tuple) -> int:
    return len(label)


@dataclass(frozen=True)
class TruncationPolicy:
    """Explicit truncation: kill threshold, generation cap, cell budget, horizon."""

    x_min: float
    max_generation: int = 1 << 30
    max_cells: int = 10_000_000
    horizon: float = math.inf

    def __post_init__(self):
        if self.x_min <= 0 or self.max_generation <= 0 or self.max_cells <= 0 \
                or self.horizon <= 0:
            raise ValueError("policy fields must be positive")


# record status codes
ALIVE, KILLED, HORIZON, GENCAP = 0, 1, 2, 3

_STATUS_NAMES = {KILLED: "killed_below", HORIZON: "horizon", GENCAP: "generation_capped"}


@dataclass
class CellRecord:
    """One cell: birth data plus how (and when) its simulation settled."""

    label: tuple
    birth_time: float
    birth_size: float
    lifetime: Optional[float]   # None while unsettled (horizon / generation cap)
    truncation: str
    end_size: float

    @property
    def generation(self) -> int:
        return len(self.label)


@dataclass
class TreeBatchRecords:
    """Flat per-cell records of a batch of trees (one row per cell born).

    status: 1 killed below x_min, 2 horizon-stopped, 3 generation-capped.
    Diffuse rows carry the sub-cutoff fragment mass accrued along each cell's
    path: (tree, generation of the emitting cell, mean height, mean fragment
    size, mass); the mass belongs to that cell's unresolved children.
    """

    n_trees: int
    x: float
    params: GFParams
    policy: TruncationPolicy
    tree: np.ndarray
    gen: np.ndarray
    parent: np.ndarray
    rank: np.ndarray
    birth_t: np.ndarray
    birth_v: np.ndarray
    status: np.ndarray
    end_t: np.ndarray
    end_v: np.ndarray
    d_tree: np.ndarray
    d_gen: np.ndarray
    d_h: np.ndarray
    d_sz: np.ndarray
    d_mass: np.ndarray
    seed_manifest: str = ""


@dataclass
class CellTree:
    """Label-indexed view of a single tree, closed under parent."""

    records: dict
    policy: TruncationPolicy
    params: GFParams
    seed_manifest: str = ""
    batch: Optional[TreeBatchRecords] = None

    def __post_init__(self):
        for label in self.records:
            if label and parent_label(label) not in self.records:
                raise ValueError(f"orphan label {label}")


@dataclass
class AreaProfile:
    """Right-continuous step profile t -> A(t) with total mass and bias notes."""

    breakpoints: np.ndarray
    cumulative: np.ndarray
    total_mass: float
    unsettled_mass: float = 0.0
    time_bias_scale: float = 0.0   # x_min^{|alpha|}: spreading scale of killed mass

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = np.concatenate([[0.0], self.cumulative])[idx]
        return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Banded tree engine
# ---------------------------------------------------------------------------

def _band_deltas(x_min: float, x: float, band_factor: float,
                 delta_floor: float, delta_cap: float) -> np.ndarray:
    """Relative cutoffs per reference-size band j (vref ~ x_min * K^j)."""
    v_ceiling = max(64.0 * x, 64.0 * x_min, 16.0)
    n_bands = max(1, int(math.ceil(math.log(v_ceiling / x_min) / math.log(band_factor))) + 1)
    j = np.arange(n_bands)
    return np.clip(band_factor ** (-(j + 1.0)), delta_floor, delta_cap)


class _Rows:
    """Growable structure-of-arrays for cell records."""

    _SPEC = (("tree", np.int32), ("gen", np.int32), ("parent", np.int64),
             ("rank", np.int32), ("birth_t", np.float64), ("birth_v", np.float64),
             ("status", np.int8), ("end_t", np.float64), ("end_v", np.float64))

    def __init__(self, cap: int = 4096):
        self.n = 0
        self.cols = {name: np.zeros(cap, dt) for name, dt in self._SPEC}

    def _grow(self, need: int) -> None:
        cap = len(self.cols["tree"])
        if self.n + need <= cap:
            return
        new_cap = max(2 * cap, self.n + need)
        for k, v in self.cols.items():
            arr = np.zeros(new_cap, v.dtype)
            arr[: self.n] = v[: self.n]
            self.cols[k] = arr

    def append(self, **kw) -> np.ndarray:
        m = len(kw["tree"])
        self._grow(m)
        uids = np.arange(self.n, self.n + m, dtype=np.int64)
        for k, v in kw.items():
            self.cols[k][uids] = v
        self.n += m
        return uids

    def set(self, uids, **kw) -> None:
        for k, v in kw.items():
            self.cols[k][uids] = v

    def view(self, name) -> np.ndarray:
        return self.cols[name][: self.n]


def grow_tree_batch(params: GFParams, x: float, policy: TruncationPolicy,
                    rng: np.random.Generator, n_trees: int,
                    band_factor: float = DEFAULT_BAND_FACTOR,
                    delta_floor: float = DEFAULT_DELTA_FLOOR,
                    delta_cap: float = DEFAULT_DELTA_CAP,
                    gaussian_smalljumps: bool = True,
                    diffuse_correction: bool = True,
                    seed_manifest: str = "") -> TreeBatchRecords:
    """Grow n_trees independent trees from size x under one policy."""
    if x <= 0:
        raise ValueError("start size must be positive")
    alpha = params.alpha
    w = params.omega_minus
    c = -alpha
    x_min = policy.x_min
    logK = math.log(band_factor)
    lxmin = math.log(x_min)

    law = levy.path_law_from_triplet(params.triplet)
    deltas = _band_deltas(x_min, x, band_factor, delta_floor, delta_cap)
    bl = _batch.build_banded_law(law, deltas, gaussian_smalljumps,
                                 frag_exponent=w if diffuse_correction else 0.0)
    n_bands = len(deltas)

    def band_for(lv: np.ndarray) -> np.ndarray:
        j = np.rint((lv - lxmin) / logK).astype(np.int32)
        return np.clip(j, 0, n_bands - 1)

    rows = _Rows()
    eve = rows.append(tree=np.arange(n_trees, dtype=np.int32),
                      gen=np.zeros(n_trees, np.int32),
                      parent=np.full(n_trees, -1, np.int64),
                      rank=np.zeros(n_trees, np.int32),
                      birth_t=np.zeros(n_trees), birth_v=np.full(n_trees, float(x)),
                      status=np.full(n_trees, ALIVE, np.int8),
                      end_t=np.zeros(n_trees), end_v=np.zeros(n_trees))

    # active state, index-aligned arrays
    uid = eve.copy()
    t_ref = np.zeros(n_trees)
    lvref = np.full(n_trees, math.log(x))
    xi = np.zeros(n_trees)
    clock = np.zeros(n_trees)
    band = band_for(lvref)
    n_kids = np.zeros(n_trees, np.int32)
    dmass = np.zeros(n_trees)
    dm_h = np.zeros(n_trees)
    dm_sz = np.zeros(n_trees)

    d_chunks: list = []

    def emit_diffuse(idx):
        if not diffuse_correction or not len(idx):
            return
        dm = dmass[idx]
        has = dm > 0
        if np.any(has):
            sel = idx[has]
            d_chunks.append((rows.view("tree")[uid[sel]].copy(),
                             rows.view("gen")[uid[sel]].copy(),
                             dm_h[sel] / dm[has],
                             dm_sz[sel] / dm[has],
                             dm[has].copy()))

    def finalize() -> TreeBatchRecords:
        if d_chunks:
            d_tree = np.concatenate([ch[0] for ch in d_chunks])
            d_gen = np.concatenate([ch[1] for ch in d_chunks])
            d_h = np.concatenate([ch[2] for ch in d_chunks])
            d_sz = np.concatenate([ch[3] for ch in d_chunks])
            d_mass = np.concatenate([ch[4] for ch in d_chunks])
        else:
            d_tree = np.empty(0, np.int32)
            d_gen = np.empty(0, np.int32)
            d_h = d_sz = d_mass = np.empty(0)
        return TreeBatchRecords(
            n_trees=n_trees, x=float(x), params=params, policy=policy,
            tree=rows.view("tree").copy(), gen=rows.view("gen").copy(),
            parent=rows.view("parent").copy(), rank=rows.view("rank").copy(),
            birth_t=rows.view("birth_t").copy(), birth_v=rows.view("birth_v").copy(),
            status=rows.view("status").copy(), end_t=rows.view("end_t").copy(),
            end_v=rows.view("end_v").copy(),
            d_tree=d_tree, d_gen=d_gen, d_h=d_h, d_sz=d_sz, d_mass=d_mass,
            seed_manifest=seed_manifest)

    while len(uid):
        m = len(uid)
        if rows.n > policy.max_cells:
            emit_diffuse(np.arange(len(uid)))
            raise BudgetExceededError(
                f"cell budget {policy.max_cells} exceeded ({rows.n} born)",
                partial=finalize())
        a = bl.drift[band]
        rate = bl.rate[band]
        dt = rng.exponential(1.0, m) / rate
        u_side = rng.random(m)
        u_jump = rng.random(m)
        g = rng.standard_normal(m) * bl.sigma[band] * np.sqrt(dt) \
            if gaussian_smalljumps else None

        scale = np.exp(-alpha * lvref)
        seg_clock = _batch.seg_exp_integral(xi, a, dt, c)
        t_after = t_ref + scale * (clock + seg_clock)

        # horizon crossings settle exactly at the boundary
        crossed = t_after > policy.horizon
        if np.any(crossed):
            ci = np.flatnonzero(crossed)
            target = (policy.horizon - t_ref[ci]) / scale[ci] - clock[ci]
            u_star = _batch.seg_exp_invert(xi[ci], a[ci], c, target)
            if diffuse_correction:
                _accrue_diffuse(bl, band, ci, xi, a, u_star, c, w, lvref,
                                t_ref, scale, clock, dmass, dm_h, dm_sz)
            end_v = np.exp(lvref[ci] + xi[ci] + a[ci] * u_star)
            rows.set(uid[ci], status=HORIZON, end_t=policy.horizon, end_v=end_v)
            emit_diffuse(ci)

        keep = np.flatnonzero(~crossed)
        if not len(keep):
            break
        (uid, t_ref, lvref, xi, clock, band, n_kids, dmass, dm_h, dm_sz, dt,
         u_side, u_jump, seg_clock, a, scale) = (
            arr[keep] for arr in (uid, t_ref, lvref, xi, clock, band, n_kids,
                                  dmass, dm_h, dm_sz, dt, u_side, u_jump,
                                  seg_clock, a, scale))
        if g is not None:
            g = g[keep]

        if diffuse_correction:
            _accrue_diffuse(bl, band, np.arange(len(uid)), xi, a, dt, c, w,
                            lvref, t_ref, scale, clock, dmass, dm_h, dm_sz)
        xi = xi + a * dt
        if g is not None:
            xi = xi + g
        clock = clock + seg_clock
        t_now = t_ref + scale * clock

        y = _batch.sample_band_jumps(bl, band, u_side, u_jump)
        n_before = len(uid)
        neg = y < 0
        if np.any(neg):
            ni = np.flatnonzero(neg)
            child_v = np.exp(lvref[ni] + xi[ni]) * (-np.expm1(y[ni]))
            tree_ni = rows.view("tree")[uid[ni]]
            gen_child = rows.view("gen")[uid[ni]] + 1
            n_kids[ni] += 1
            live = child_v >= x_min
            capped = live & (gen_child > policy.max_generation)
            spawn = live & ~capped
            for mask, status in ((capped, GENCAP), (~live, KILLED)):
                if np.any(mask):
                    sel = ni[mask]
                    rows.append(tree=tree_ni[mask], gen=gen_child[mask],
                                parent=uid[sel], rank=n_kids[sel],
                                birth_t=t_now[sel], birth_v=child_v[mask],
                                status=np.full(int(mask.sum()), status, np.int8),
                                end_t=t_now[sel], end_v=child_v[mask])
            if np.any(spawn):
                sel = ni[spawn]
                new_uid = rows.append(
                    tree=tree_ni[spawn], gen=gen_child[spawn], parent=uid[sel],
                    rank=n_kids[sel], birth_t=t_now[sel], birth_v=child_v[spawn],
                    status=np.full(int(spawn.sum()), ALIVE, np.int8),
                    end_t=np.zeros(int(spawn.sum())), end_v=np.zeros(int(spawn.sum())))
                nb = len(new_uid)
                lv_new = np.log(child_v[spawn])
                uid = np.concatenate([uid, new_uid])
                t_ref = np.concatenate([t_ref, t_now[sel]])
                lvref = np.concatenate([lvref, lv_new])
                xi = np.concatenate([xi, np.zeros(nb)])
                clock = np.concatenate([clock, np.zeros(nb)])
                band = np.concatenate([band, band_for(lv_new)])
                n_kids = np.concatenate([n_kids, np.zeros(nb, np.int32)])
                dmass = np.concatenate([dmass, np.zeros(nb)])
                dm_h = np.concatenate([dm_h, np.zeros(nb)])
                dm_sz = np.concatenate([dm_sz, np.zeros(nb)])
                y = np.concatenate([y, np.zeros(nb)])

        xi = xi + y

        dead = (lvref + xi) < lxmin
        if np.any(dead):
            di = np.flatnonzero(dead)
            rows.set(uid[di], status=KILLED,
                     end_t=t_ref[di] + np.exp(-alpha * lvref[di]) * clock[di],
                     end_v=np.exp(lvref[di] + xi[di]))
            emit_diffuse(di)
        stay = np.flatnonzero(~dead)
        (uid, t_ref, lvref, xi, clock, band, n_kids, dmass, dm_h, dm_sz) = (
            arr[stay] for arr in (uid, t_ref, lvref, xi, clock, band, n_kids,
                                  dmass, dm_h, dm_sz))

        reb = np.abs(xi) > logK
        if np.any(reb):
            ri = np.flatnonzero(reb)
            t_ref[ri] = t_ref[ri] + np.exp(-alpha * lvref[ri]) * clock[ri]
            lvref[ri] = lvref[ri] + xi[ri]
            xi[ri] = 0.0
            clock[ri] = 0.0
            band[ri] = band_for(lvref[ri])

    return finalize()


def _accrue_diffuse(bl, band, idx, xi, a, dt, c, w, lvref, t_ref, scale, clock,
                    dmass, dm_h, dm_sz):
    """Accrue one segment's sub-cutoff fragment mass into the cell accumulators."""
    cm = bl.frag_mass[band[idx]]
    if not np.any(cm > 0):
        return
    a_i = a[idx] if np.ndim(a) else np.full(len(idx), float(a))
    dt_i = dt[idx] if np.ndim(dt) and len(np.atleast_1d(dt)) == len(xi) else dt
    seg_mass = cm * np.exp(w * lvref[idx]) * _batch.seg_exp_integral(xi[idx], a_i, dt_i, w)
    h_mid = t_ref[idx] + scale[idx] * (clock[idx]
                                       + 0.5 * _batch.seg_exp_integral(xi[idx], a_i, dt_i, c))
    sz = bl.frag_size[band[idx]] * np.exp(lvref[idx] + xi[idx] + 0.5 * a_i * dt_i)
    np.add.at(dmass, idx, seg_mass)
    np.add.at(dm_h, idx, seg_mass * h_mid)
    np.add.at(dm_sz, idx, seg_mass * sz)


# ---------------------------------------------------------------------------
# Single-tree API
# ---------------------------------------------------------------------------

def grow_tree(params: GFParams, x: float, policy: TruncationPolicy,
              rng: np.random.Generator, **kw) -> CellTree:
    """Grow one tree and materialize label-indexed records."""
    batch = grow_tree_batch(params, x, policy, rng, 1, **kw)
    labels: dict = {}
    records: dict = {}
    order = np.argsort(batch.birth_t, kind="stable")
    for i in order:
        pid = int(batch.parent[i])
        label = () if pid < 0 else labels[pid] + (int(batch.rank[i]),)
        labels[i] = label
        st = int(batch.status[i])
        records[label] = CellRecord(
            label=label,
            birth_time=float(batch.birth_t[i]),
            birth_size=float(batch.birth_v[i]),
            lifetime=float(batch.end_t[i] - batch.birth_t[i]) if st == KILLED else None,
            truncation=_STATUS_NAMES.get(st, "none"),
            end_size=float(batch.end_v[i]))
    return CellTree(records=records, policy=policy, params=params,
                    seed_manifest=batch.seed_manifest, batch=batch)


# ---------------------------------------------------------------------------
# Martingale and area
# ---------------------------------------------------------------------------

def area_martingale(tree, n: int):
    """Generation-n mass martingale M(n), truncation-aware.

    Cells at generation n contribute their birth mass; cells truncated at an
    earlier generation stand in for their whole subtree with their settlement
    mass (its exact conditional expectation); diffuse sub-cutoff mass from
    cells at generations < n belongs to their unresolved children.
    """
    b = tree.batch if isinstance(tree, CellTree) else tree
    vals = martingale_per_tree(b, n)
    return float(vals[0]) if isinstance(tree, CellTree) else vals


def martingale_per_tree(b: TreeBatchRecords, n: int) -> np.ndarray:
    if n > b.policy.max_generation:
        raise ValueError(f"generation {n} beyond the policy cap")
    w = b.params.omega_minus
    out = np.zeros(b.n_trees)
    at_gen = b.gen == n
    np.add.at(out, b.tree[at_gen], b.birth_v[at_gen] ** w)
    early = (b.gen < n) & (b.status != ALIVE)
    np.add.at(out, b.tree[early], b.end_v[early] ** w)
    d_sel = b.d_gen < n
    np.add.at(out, b.d_tree[d_sel], b.d_mass[d_sel])
    return out


def area_profile(tree) -> AreaProfile:
    """Step profile of settled (killed plus diffuse) mass by height."""
    b = tree.batch if isinstance(tree, CellTree) else tree
    w = b.params.omega_minus
    killed = b.status == KILLED
    times = np.concatenate([b.end_t[killed], b.d_h])
    masses = np.concatenate([b.end_v[killed] ** w, b.d_mass])
    order = np.argsort(times, kind="stable")
    times, masses = times[order], masses[order]
    unsettled = float(np.sum(b.end_v[(b.status == HORIZON) | (b.status == GENCAP)] ** w))
    return AreaProfile(breakpoints=times, cumulative=np.cumsum(masses),
                       total_mass=float(masses.sum()), unsettled_mass=unsettled,
                       time_bias_scale=b.policy.x_min ** abs(b.params.alpha))


def total_mass_per_tree(b: TreeBatchRecords) -> np.ndarray:
    """Terminal-mass estimate per tree: settled mass plus diffuse mass."""
    w = b.params.omega_minus
    out = np.zeros(b.n_trees)
    settled = b.status != ALIVE
    np.add.at(out, b.tree[settled], b.end_v[settled] ** w)
    np.add.at(out, b.d_tree, b.d_mass)
    return out


def _kill_records(b: TreeBatchRecords):
    """Pooled (tree, height, size, mass) of killed and diffuse rows."""
    w = b.params.omega_minus
    killed = b.status == KILLED
    trees = np.concatenate([b.tree[killed], b.d_tree]).astype(np.int64)
    h = np.concatenate([b.end_t[killed], b.d_h])
    # diffuse fragment sizes can underflow; clamp for the alpha-power rescale
    sz = np.concatenate([b.end_v[killed],
                         np.maximum(b.d_sz, 1e-6 * b.policy.x_min)])
    mass = np.concatenate([b.end_v[killed] ** w, b.d_mass])
    return trees, h, sz, mass


# ---------------------------------------------------------------------------
# Self-consistent area CDF (fixed point of the branching renewal)
# ---------------------------------------------------------------------------

@dataclass
class AreaCdf:
    """Normalized mean area profile F(u) ~ E[A(u)] / E[total mass], log grid."""

    grid: np.ndarray
    values: np.ndarray
    iterations: int
    converged: bool

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.interp(u, self.grid, self.values, left=0.0, right=1.0)
        return np.where(u <= 0, 0.0, out)


def area_cdf_fixed_point(b: TreeBatchRecords, grid: Optional[np.ndarray] = None,
                         max_iter: int = 120, tol: float = 1e-8) -> AreaCdf:
    """Solve F(t) = E[sum_kills m_i F((t - h_i) x_i^alpha)] / E[sum_i m_i].

    The normalized mean area profile satisfies this renewal identity across
    the kill frontier exactly, so iterating it from the kill-height point
    placement removes the temporal truncation bias of the raw profile; every
    pass resolves the small-t region one frontier crossing deeper.
    """
    if grid is None:
        grid = np.concatenate([[0.0], np.geomspace(1e-5, 1e4, 361)])
    alpha = b.params.alpha
    _, h, xk, mass = _kill_records(b)
    if not len(h):
        raise ValueError("no settled records to build an area profile from")
    # bin records in (height, log size); binning error is far below MC noise
    hpos = h[h > 0]
    h_edges = np.concatenate([[0.0],
                              np.geomspace(max(hpos.min(), 1e-9) if len(hpos) else 1e-9,
                                           h.max() * (1 + 1e-12) + 1e-12, 240)])
    s_edges = np.geomspace(xk.min() * 0.999, xk.max() * 1.001, 80)
    hb = np.clip(np.searchsorted(h_edges, h, side="right") - 1, 0, len(h_edges) - 2)
    sb = np.clip(np.searchsorted(s_edges, xk, side="right") - 1, 0, len(s_edges) - 2)
    flat = hb * (len(s_edges) - 1) + sb
    size = (len(h_edges) - 1) * (len(s_edges) - 1)
    tot = np.bincount(flat, weights=mass, minlength=size)
    wh = np.bincount(flat, weights=mass * h, minlength=size)
    ws = np.bincount(flat, weights=mass * xk, minlength=size)
    nz = tot > 0
    bm = tot[nz]
    bh = wh[nz] / bm
    bx = ws[nz] / bm
    norm = bm.sum()
    scale_x = bx ** alpha

    vals = (grid > 0).astype(float)
    for it in range(max_iter):
        args = (grid[:, None] - bh[None, :]) * scale_x[None, :]
        f = np.interp(args, grid, vals, left=0.0, right=1.0)
        f[args <= 0] = 0.0
        new = f @ bm / norm
        delta = float(np.max(np.abs(new - vals)))
        vals = new
        if delta < tol:
            return AreaCdf(grid=grid, values=vals, iterations=it + 1, converged=True)
    return AreaCdf(grid=grid, values=vals, iterations=max_iter, converged=False)


def area_values(b: TreeBatchRecords, t: float, cdf: Optional[AreaCdf] = None) -> np.ndarray:
    """Per-tree A(t) samples.

    With `cdf` given, each settled record's mass is spread over its subtree's
    extinction profile (mean spreading: mass * F((t - h) x^alpha)); without
    it, the raw kill-height step convention applies.
    """
    alpha = b.params.alpha
    trees, h, xk, mass = _kill_records(b)
    out = np.zeros(b.n_trees)
    if cdf is None:
        sel = h <= t
        np.add.at(out, trees[sel], mass[sel])
    else:
        np.add.at(out, trees, mass * cdf((t - h) * xk ** alpha))
    return out


# ---------------------------------------------------------------------------
# Unit-tree library (distributional draws of rescaled subtree areas)
# ---------------------------------------------------------------------------

@dataclass
class TreeLibrary:
    """Area profiles of unit-start trees on a shared log grid."""

    u_grid: np.ndarray
    profiles: np.ndarray   # [n_lib, n_grid]
    totals: np.ndarray     # terminal masses

    def draw_area(self, idx: np.ndarray, u: np.ndarray) -> np.ndarray:
        """A_{idx[k]}(u[k]) by per-row interpolation on the shared grid."""
        pos = np.clip(np.searchsorted(self.u_grid, u, side="right") - 1,
                      0, len(self.u_grid) - 2)
        g0 = self.u_grid[pos]
        frac = np.clip((u - g0) / (self.u_grid[pos + 1] - g0), 0.0, 1.0)
        out = (1.0 - frac) * self.profiles[idx, pos] + frac * self.profiles[idx, pos + 1]
        out = np.where(u <= self.u_grid[0], 0.0, out)
        big = u >= self.u_grid[-1]
        if np.any(big):
            out[big] = self.totals[idx[big]]
        return out


def build_tree_library(params: GFParams, policy: TruncationPolicy,
                       rng: np.random.Generator, n_lib: int,
                       u_grid: Optional[np.ndarray] = None,
                       batch: int = 2000, **kw) -> TreeLibrary:
    if u_grid is None:
        u_grid = np.geomspace(1e-3, 1e3, 181)
    profiles = np.zeros((n_lib, len(u_grid)), dtype=np.float64)
    totals = np.zeros(n_lib)
    done = 0
    while done < n_lib:
        nb = min(batch, n_lib - done)
        recs = grow_tree_batch(params, 1.0, policy, rng, nb, **kw)
        trees, h, _sz, mass = _kill_records(recs)
        bin_idx = np.searchsorted(u_grid, h, side="left")
        inside = bin_idx < len(u_grid)
        flat = trees[inside] * len(u_grid) + bin_idx[inside]
        acc = np.bincount(flat, weights=mass[inside], minlength=nb * len(u_grid))
        profiles[done:done + nb] = np.cumsum(acc.reshape(nb, len(u_grid)), axis=1)
        totals[done:done + nb] = total_mass_per_tree(recs)
        done += nb
    return TreeLibrary(u_grid=u_grid, profiles=profiles, totals=totals)


# ---------------------------------------------------------------------------
# Markov-branching resampling oracle
# ---------------------------------------------------------------------------

def markov_branching_resample(tree: CellTree, t: float, rng: np.random.Generator,
                              **kw) -> float:
    """Independent A(t) sample rebuilt from the Eve cell's negative jumps.

    Each first-generation subtree's area is re-drawn from a fresh tree at the
    rescaled argument, using that A under P_x is x^w A(t x^alpha) under P_1;
    the Eve's sub-cutoff children (its diffuse rows) count in full once their
    height has passed, matching the profile convention.
    """
    b = tree.batch
    if b is None:
        raise ValueError("tree lacks batch records")
    params, policy = tree.params, tree.policy
    alpha, w = params.alpha, params.omega_minus
    gen1 = b.gen == 1
    total = 0.0
    for s, v in zip(b.birth_t[gen1], b.birth_v[gen1]):
        if s > t:
            continue
        u = (t - s) * v ** alpha
        sub_policy = TruncationPolicy(x_min=policy.x_min,
                                      max_cells=policy.max_cells, horizon=u)
        sub = grow_tree_batch(params, 1.0, sub_policy, rng, 1, **kw)
        total += v ** w * float(area_values(sub, u)[0])
    eve_diffuse = b.d_gen == 0
    sel = eve_diffuse & (b.d_h <= t)
    total += float(np.sum(b.d_mass[sel]))
    return total
