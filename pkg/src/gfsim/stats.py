"""Monte Carlo estimate containers and small statistical utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EstimateWithCI:
    """Point estimate with standard error and provenance.

    stderr is the sample standard deviation divided by sqrt(n).  Merging is
    associative and order-independent up to floating point (it goes through
    the sufficient statistics n, sum, sum of squares).
    """

    mean: float
    stderr: float
    n: int
    seed_manifest: str = ""

    def ci95(self) -> tuple:
        h = 1.96 * self.stderr
        return (self.mean - h, self.mean + h)

    def within(self, target: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - target) <= n_se * self.stderr

    def _sums(self) -> tuple:
        s = self.mean * self.n
        var_sample = self.stderr ** 2 * self.n
        ss = var_sample * (self.n - 1) + (s * s / self.n if self.n else 0.0)
        return self.n, s, ss


def estimate_from_samples(x: np.ndarray, seed_manifest: str = "") -> EstimateWithCI:
    x = np.asarray(x, dtype=float)
    n = len(x)
    mean = float(np.mean(x)) if n else math.nan
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return EstimateWithCI(mean=mean, stderr=sd / math.sqrt(n) if n else math.nan,
                          n=n, seed_manifest=seed_manifest)


def binomial_estimate(k: int, n: int, seed_manifest: str = "") -> EstimateWithCI:
    p = k / n
    return EstimateWithCI(mean=p, stderr=math.sqrt(max(p * (1 - p), 1e-300) / n),
                          n=n, seed_manifest=seed_manifest)


def merge_two(a: EstimateWithCI, b: EstimateWithCI) -> EstimateWithCI:
    na, sa, ssa = a._sums()
    nb, sb, ssb = b._sums()
    n, s, ss = na + nb, sa + sb, ssa + ssb
    mean = s / n
    var_sample = max(ss - s * s / n, 0.0) / (n - 1) if n > 1 else 0.0
    manifest = ";".join(m for m in (a.seed_manifest, b.seed_manifest) if m)
    return EstimateWithCI(mean=mean, stderr=math.sqrt(var_sample / n), n=n,
                          seed_manifest=manifest)


def merge_estimates(parts: Sequence[EstimateWithCI]) -> EstimateWithCI:
    """Deterministic pairwise-tree reduction, independent of worker count."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    while len(parts) > 1:
        nxt = []
        for i in range(0, len(parts) - 1, 2):
            nxt.append(merge_two(parts[i], parts[i + 1]))
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


# ---------------------------------------------------------------------------
# Two-sample Kolmogorov-Smirnov test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n1: int
    n2: int

    def rejected(self, level: float = 0.05) -> bool:
        return self.p_value < level


def _kolmogorov_sf(lam: float, terms: int = 101) -> float:
    if lam <= 0:
        return 1.0
    k = np.arange(1, terms)
    s = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * (k * lam) ** 2))
    return float(min(max(s, 0.0), 1.0))


def ks_two_sample(x1: np.ndarray, x2: np.ndarray) -> KSResult:
    """Two-sample KS statistic with the asymptotic p-value.

    Uses the classical small-sample correction
    lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) * D with the two-sample
    effective size ne = n1 n2 / (n1 + n2).
    """
    x1 = np.sort(np.asarray(x1, dtype=float))
    x2 = np.sort(np.asarray(x2, dtype=float))
    n1, n2 = len(x1), len(x2)
    if n1 == 0 or n2 == 0:
        raise ValueError("empty sample")
    both = np.concatenate([x1, x2])
    cdf1 = np.searchsorted(x1, both, side="right") / n1
    cdf2 = np.searchsorted(x2, both, side="right") / n2
    d = float(np.max(np.abs(cdf1 - cdf2)))
    ne = n1 * n2 / (n1 + n2)
    lam = (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * d
    return KSResult(statistic=d, p_value=_kolmogorov_sf(lam), n1=n1, n2=n2)
