"""Offspring distributions and their mutation-thinned bivariate versions.

The model: every individual begets a random number of children ``xi_plus``
drawn from a fixed law on the non-negative integers; each child is,
independently, a mutant with probability ``p`` and a clone otherwise.  The
pair ``(xi_c, xi_m)`` of clone and mutant counts then has joint law

    pi[k, l] = pi_plus[k + l] * C(k + l, k) * (1 - p)**k * p**l.

This module builds the laws (including a critical family with a pure power
tail ``k**-(1+alpha)``), thins them, convolves them, and evaluates their
exact bivariate transforms.  Everything here is immutable and pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gammaln, zeta

from .errors import CapTooSmall, InfeasibleLaw

#: Mass beyond the stored support must stay below this for exact-table ops.
DEFAULT_DROP_TOL = 1e-6


def _binom_pmf_row(total: int, p: float) -> np.ndarray:
    """pmf of Binomial(total, p) over 0..total, stable for large totals."""
    if total == 0:
        return np.ones(1)
    k = np.arange(total + 1, dtype=np.float64)
    logc = gammaln(total + 1) - gammaln(k + 1) - gammaln(total - k + 1)
    with np.errstate(divide="ignore"):
        logp = np.where(k > 0, k * np.log(p), 0.0)
        logq = np.where(total - k > 0, (total - k) * np.log1p(-p), 0.0)
    return np.exp(logc + logp + logq)


def binom_pmf(total: int, k: int, p: float) -> float:
    """P(Binomial(total, p) = k), exact combinatorics for modest totals."""
    if k < 0 or k > total:
        return 0.0
    if total <= 1000:
        return math.comb(total, k) * p**k * (1.0 - p) ** (total - k)
    return float(_binom_pmf_row(total, p)[k])


@dataclass(frozen=True)
class TailDescriptor:
    """Analytic continuation of a pmf: probs[k] = scale * k**-(1+alpha) for k >= first."""

    alpha: float
    scale: float
    first: int = 2


@dataclass(frozen=True)
class OffspringLaw:
    """A pmf on the non-negative integers, with optional analytic power tail.

    ``probs[k]`` is the stored mass at k; ``truncation_mass`` is the analytic
    mass beyond the stored support (zero for finitely supported laws).  The
    cached ``mean`` includes the analytic tail, so criticality statements are
    exact even when the stored support is truncated.
    """

    probs: np.ndarray
    tail: Optional[TailDescriptor] = None
    truncation_mass: float = 0.0
    mean: float = field(default=0.0)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if np.any(probs < -1e-15):
            raise InfeasibleLaw("negative probability mass")
        total = float(probs.sum()) + self.truncation_mass
        if abs(total - 1.0) > 1e-12:
            raise InfeasibleLaw(f"total mass {total!r} is not 1")
        if self.mean == 0.0:
            object.__setattr__(self, "mean", self._exact_mean())

    def _exact_mean(self) -> float:
        k = np.arange(len(self.probs), dtype=np.float64)
        m = float(np.dot(k, self.probs))
        if self.tail is not None:
            kmax = len(self.probs) - 1
            m += self.tail.scale * float(zeta(self.tail.alpha, kmax + 1))
        return m

    @property
    def is_critical(self) -> bool:
        return abs(self.mean - 1.0) <= 1e-10

    @property
    def support_max(self) -> int:
        return len(self.probs) - 1

    def pgf(self, z: float) -> float:
        """E z**xi over the stored support (truncation mass excluded)."""
        if z == 1.0:
            return float(self.probs.sum())
        if z == 0.0:
            return float(self.probs[0])
        k = np.arange(len(self.probs), dtype=np.float64)
        return float(np.dot(self.probs, np.exp(k * math.log(z))))

    def laplace(self, lam: float) -> float:
        """E exp(-lam * xi) over the stored support."""
        return self.pgf(math.exp(-lam)) if lam != 0.0 else float(self.probs.sum())

    def second_moment_stored(self) -> float:
        k = np.arange(len(self.probs), dtype=np.float64)
        return float(np.dot(k * k, self.probs))

    def tail_function(self, y: float) -> float:
        """P(xi > y), using the analytic tail beyond the stored support."""
        j = math.floor(y)
        if j < 0:
            return 1.0
        if j >= len(self.probs) - 1:
            if self.tail is None:
                return 0.0
            return self.tail.scale * float(zeta(1.0 + self.tail.alpha, j + 1))
        return float(self.probs[j + 1 :].sum()) + self.truncation_mass

    def cdf_table(self) -> np.ndarray:
        """Cumulative masses of the stored pmf (used by inverse-CDF samplers)."""
        return np.cumsum(self.probs)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw from the truncated stored pmf (tail mass renormalized away).

        The truncation bias is bounded by ``truncation_mass``; builders keep
        it far below Monte Carlo resolution at the documented sample sizes.
        """
        cdf = self.cdf_table()
        u = rng.random(size) * cdf[-1]
        return np.searchsorted(cdf, u, side="right").astype(np.int64)


def build_critical_stable_law(alpha: float, tail_tol: float = 1e-9) -> OffspringLaw:
    """Construct the critical offspring law with pure tail c * k**-(1+alpha).

    Masses: probs[k] = c * k**-(1+alpha) for k >= 2 with
    c = 0.9 / sum_{k>=2} k**-alpha, probs[1] absorbing the unit-mean
    constraint and probs[0] the normalization.  The stored support ends where
    the analytic tail mass drops below ``tail_tol``; the tail descriptor keeps
    the continuation exact for moments and tail evaluations.
    """
    if not (1.0 < alpha < 2.0):
        raise InfeasibleLaw("alpha must lie in (1, 2)")
    if not (0.0 < tail_tol <= 1e-6):
        raise InfeasibleLaw("tail_tol must lie in (0, 1e-6]")
    c = 0.9 / (float(zeta(alpha)) - 1.0)
    kmax = int(math.ceil((c / (alpha * tail_tol)) ** (1.0 / alpha)))
    while c * float(zeta(1.0 + alpha, kmax + 1)) >= tail_tol:
        kmax *= 2
    k = np.arange(kmax + 1, dtype=np.float64)
    probs = np.zeros(kmax + 1)
    probs[2:] = c * k[2:] ** (-(1.0 + alpha))
    p1 = 1.0 - c * (float(zeta(alpha)) - 1.0)  # unit-mean constraint
    if p1 < 0.0:
        raise InfeasibleLaw("mean constraint forces negative mass at 1")
    body = c * (float(zeta(1.0 + alpha)) - 1.0)
    p0 = 1.0 - p1 - body
    if p0 < 0.0:
        raise InfeasibleLaw("normalization forces negative mass at 0")
    probs[1] = p1
    probs[0] = p0
    truncation_mass = c * float(zeta(1.0 + alpha, kmax + 1))
    return OffspringLaw(
        probs=probs,
        tail=TailDescriptor(alpha=alpha, scale=c),
        truncation_mass=truncation_mass,
    )


def offspring_law_from_probs(probs) -> OffspringLaw:
    """Wrap an explicit finite pmf (no analytic tail)."""
    return OffspringLaw(probs=np.asarray(probs, dtype=np.float64))


@dataclass(frozen=True)
class BivariatePmf:
    """A truncated pmf on pairs (k, l), stored as a dense grid.

    ``probs[k, l]`` is the mass at clones=k, mutants=l (or at whatever pair of
    coordinates the producing operation documents); ``dropped_mass`` is the
    mass lost to the truncation caps.
    """

    probs: np.ndarray
    dropped_mass: float = 0.0

    def prob(self, k: int, l: int) -> float:
        if 0 <= k < self.probs.shape[0] and 0 <= l < self.probs.shape[1]:
            return float(self.probs[k, l])
        return 0.0

    @property
    def total_mass(self) -> float:
        return float(self.probs.sum())


@dataclass(frozen=True)
class JointLaw:
    """Joint law of (clones, mutants) obtained by p-thinning an offspring law.

    Rows are generated on demand from the parent law: the full grid for a
    heavy-tailed parent is far too large to materialize, and every entry is a
    two-factor closed form anyway.
    """

    plus: OffspringLaw
    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise InfeasibleLaw("mutation probability must lie in (0, 1)")

    @property
    def marginal_means(self) -> tuple[float, float]:
        return ((1.0 - self.p) * self.plus.mean, self.p * self.plus.mean)

    @property
    def clone_mean(self) -> float:
        return (1.0 - self.p) * self.plus.mean

    @property
    def mutant_mean(self) -> float:
        return self.p * self.plus.mean

    def prob(self, k: int, l: int) -> float:
        """pi[k, l] = pi_plus[k+l] * C(k+l, k) * (1-p)**k * p**l."""
        total = k + l
        if k < 0 or l < 0 or total > self.plus.support_max:
            return 0.0
        mass = float(self.plus.probs[total])
        if mass == 0.0:
            return 0.0
        return mass * binom_pmf(total, l, self.p)

    def dense(self, cap: int) -> BivariatePmf:
        """Materialize the grid for totals <= cap; report the dropped mass."""
        cap = min(cap, self.plus.support_max)
        grid = np.zeros((cap + 1, cap + 1))
        for total in range(cap + 1):
            mass = float(self.plus.probs[total])
            if mass == 0.0:
                continue
            row = mass * _binom_pmf_row(total, self.p) if total > 1000 else None
            for l in range(total + 1):
                k = total - l
                grid[k, l] = row[l] if row is not None else mass * binom_pmf(total, l, self.p)
        dropped = float(self.plus.probs[cap + 1 :].sum()) + self.plus.truncation_mass
        return BivariatePmf(probs=grid, dropped_mass=dropped)

    def pgf(self, x: float, y: float) -> float:
        """g(x, y) = E x**xi_c y**xi_m = h_plus((1-p) x + p y)."""
        return self.plus.pgf((1.0 - self.p) * x + self.p * y)

    def pgf_dx(self, x: float, y: float) -> float:
        """d/dx g(x, y) over the stored support."""
        return (1.0 - self.p) * self._pgf_prime((1.0 - self.p) * x + self.p * y)

    def pgf_dy(self, x: float, y: float) -> float:
        """d/dy g(x, y) over the stored support."""
        return self.p * self._pgf_prime((1.0 - self.p) * x + self.p * y)

    def _pgf_prime(self, z: float) -> float:
        k = np.arange(1, len(self.plus.probs), dtype=np.float64)
        if z == 0.0:
            return float(self.plus.probs[1])
        return float(np.dot(k * self.plus.probs[1:], np.exp((k - 1.0) * math.log(z)))) if z != 1.0 else float(
            np.dot(k, self.plus.probs[1:])
        )

    def sample_pairs(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw iid (xi_c, xi_m) pairs: total from the parent law, then thin."""
        totals = self.plus.sample(rng, size)
        mutants = rng.binomial(totals, self.p)
        return totals - mutants, mutants


def thin_offspring(plus: OffspringLaw, p: float) -> JointLaw:
    """Split an offspring law into (clones, mutants) by independent p-marking."""
    return JointLaw(plus=plus, p=p)


def convolve_power(joint: JointLaw, k: int, cap: int, drop_tol: float = DEFAULT_DROP_TOL) -> BivariatePmf:
    """k-fold convolution of the thinned pair law, truncated to cap per axis.

    k = 0 is the point mass at (0, 0).  Raises CapTooSmall when the truncation
    drops more than ``drop_tol`` mass.
    """
    if k < 0:
        raise ValueError("convolution power must be non-negative")
    base = joint.dense(cap)
    out = np.zeros((cap + 1, cap + 1))
    out[0, 0] = 1.0
    acc = BivariatePmf(probs=out, dropped_mass=0.0)
    for _ in range(k):
        acc = convolve_pair(acc, base, cap)
    if acc.dropped_mass > drop_tol:
        raise CapTooSmall(acc.dropped_mass, drop_tol)
    return acc


def convolve_pair(a: BivariatePmf, b: BivariatePmf, cap: int) -> BivariatePmf:
    """Convolve two truncated pair pmfs, tracking dropped mass exactly."""
    full = fftconvolve(a.probs, b.probs)
    full = np.clip(full, 0.0, None)
    kept = full[: cap + 1, : cap + 1]
    inside = float(full.sum())
    dropped = (
        a.dropped_mass * (b.total_mass + b.dropped_mass)
        + b.dropped_mass * a.total_mass
        + (inside - float(kept.sum()))
    )
    return BivariatePmf(probs=np.ascontiguousarray(kept), dropped_mass=dropped)


def joint_laplace(joint: JointLaw, lam: float, theta: float) -> float:
    """E exp(-lam * xi_c - theta * xi_m), exact over the stored support.

    Equals the parent transform evaluated at the thinning argument:
    h_plus((1-p) e**-lam + p e**-theta); the identity is exact, not
    asymptotic, because thinning conditions on the total count.
    """
    if math.isnan(lam) or math.isnan(theta) or lam < 0 or theta < 0:
        raise ValueError("rates must be non-negative")
    return joint.pgf(math.exp(-lam), math.exp(-theta))


def law_to_json(joint: JointLaw) -> str:
    """Serialize a thinned law as {"probs": [...], "tail": {...}|null, "p": ...}."""
    plus = joint.plus
    doc = {
        "probs": [float(v) for v in plus.probs],
        "tail": None
        if plus.tail is None
        else {"alpha": plus.tail.alpha, "scale": plus.tail.scale},
        "p": joint.p,
    }
    return json.dumps(doc)


def law_from_json(text: str) -> JointLaw:
    """Parse the law-file format written by :func:`law_to_json`."""
    doc = json.loads(text)
    probs = np.asarray(doc["probs"], dtype=np.float64)
    tail = None
    truncation = 0.0
    if doc.get("tail"):
        tail = TailDescriptor(alpha=float(doc["tail"]["alpha"]), scale=float(doc["tail"]["scale"]))
        kmax = len(probs) - 1
        truncation = tail.scale * float(zeta(1.0 + tail.alpha, kmax + 1))
    plus = OffspringLaw(probs=probs, tail=tail, truncation_mass=truncation)
    return JointLaw(plus=plus, p=float(doc["p"]))


def lstar_law(p: float = 0.5) -> JointLaw:
    """The two-atom critical test law: mass 1/2 at 0 and 1/2 at 2, thinned."""
    return thin_offspring(offspring_law_from_probs([0.5, 0.0, 0.5]), p)
