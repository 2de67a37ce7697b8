"""Continuum limit objects: subordinators, their jump measures, and mass trees.

Two reproduction mechanisms are supported:

* ``Stable(alpha)`` with cumulant ``kappa(lam) = lam**(1/alpha)`` exactly,
  i.e. Levy density ``c'_a * y**-(1+1/alpha)`` with
  ``c'_a = 1 / (alpha * Gamma(1 - 1/alpha))``;
* ``FiniteVariance(c, sigma2)`` with Levy density
  ``c / sqrt(2 pi sigma2 y**3) * exp(-c**2 y / (2 sigma2))``, whose cumulant
  has the closed form ``(c/sigma) * sqrt(2 lam + c**2/sigma2) - c**2/sigma2``
  (an inverse-Gaussian subordinator).

On top of the mechanisms: exact subordinator samplers, ranked-jump sampling by
tail inversion of a unit-rate Poisson arrival sequence, the recursively built
tree of subordinator jumps, the discrete-time mass chain, its version with
immigration, and the closed-form joint Laplace functionals of the immigration
chain.  Also the discrete-side normalizer ``r(n)`` derived from the offspring
law's compensated Laplace transform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import erfc
from scipy.special import gamma as gamma_fn

from .errors import DegenerateLevel, DomainError, InvalidRegime
from .laws import OffspringLaw


@dataclass(frozen=True)
class BranchingMechanism:
    """Base for the continuum reproduction descriptors."""

    @property
    def kind(self) -> str:
        raise NotImplementedError

    def cumulant(self, lam: float) -> float:
        """kappa(lam) = integral of (1 - exp(-lam y)) against the Levy measure."""
        raise NotImplementedError

    def tail(self, z: float) -> float:
        """Levy measure of (z, infinity)."""
        raise NotImplementedError

    def tail_inverse(self, u: float) -> float:
        """z with tail(z) = u (the tail is strictly decreasing)."""
        raise NotImplementedError

    def levy_density(self, y: float) -> float:
        raise NotImplementedError

    def iota(self, lam: float) -> float:
        """Laplace transform of the immigration increment law."""
        raise NotImplementedError

    @property
    def beta(self) -> float:
        """Scale tying the second coordinate to the first in joint limits."""
        raise NotImplementedError


@dataclass(frozen=True)
class StableMechanism(BranchingMechanism):
    alpha: float

    def __post_init__(self):
        if not (1.0 < self.alpha < 2.0):
            raise InvalidRegime("alpha must lie in (1, 2)")

    @property
    def kind(self) -> str:
        return "stable"

    @property
    def c_alpha(self) -> float:
        return 1.0 / gamma_fn(3.0 - self.alpha)

    @property
    def c_alpha_prime(self) -> float:
        return 1.0 / (self.alpha * gamma_fn(1.0 - 1.0 / self.alpha))

    def cumulant(self, lam: float) -> float:
        return lam ** (1.0 / self.alpha)

    def tail(self, z: float) -> float:
        return z ** (-1.0 / self.alpha) / gamma_fn(1.0 - 1.0 / self.alpha)

    def tail_inverse(self, u: float) -> float:
        return (gamma_fn(1.0 - 1.0 / self.alpha) * u) ** (-self.alpha)

    def levy_density(self, y: float) -> float:
        return self.c_alpha_prime * y ** (-1.0 - 1.0 / self.alpha)

    def iota(self, lam: float) -> float:
        # normalized first-moment transform of the Levy measure; equals
        # kappa'(lam) and blows up at 0+ (the size-biased measure is improper)
        if lam <= 0.0:
            raise DomainError("stable immigration transform undefined at 0")
        return (1.0 / self.alpha) * lam ** (1.0 / self.alpha - 1.0)

    @property
    def beta(self) -> float:
        return 1.0


@dataclass(frozen=True)
class FiniteVarianceMechanism(BranchingMechanism):
    c: float
    sigma2: float

    def __post_init__(self):
        if self.c <= 0.0 or self.sigma2 <= 0.0:
            raise InvalidRegime("c and sigma2 must be positive")

    @property
    def kind(self) -> str:
        return "fv"

    @property
    def decay_rate(self) -> float:
        """Exponential tilt rate c**2 / (2 sigma2) of the Levy density."""
        return self.c**2 / (2.0 * self.sigma2)

    def cumulant(self, lam: float) -> float:
        cs = self.c / math.sqrt(self.sigma2)
        return cs * math.sqrt(2.0 * lam + cs * cs) - cs * cs

    def tail(self, z: float) -> float:
        b = self.decay_rate
        amp = self.c / math.sqrt(2.0 * math.pi * self.sigma2)
        return amp * (
            2.0 * math.exp(-b * z) / math.sqrt(z)
            - 2.0 * math.sqrt(math.pi * b) * erfc(math.sqrt(b * z))
        )

    def tail_inverse(self, u: float) -> float:
        if u <= 0.0:
            raise DomainError("tail inverse needs a positive level")
        lo, hi = 1e-300, 1.0
        while self.tail(hi) > u:
            hi *= 2.0
        lo = hi / 2.0 if hi > 1.0 else lo
        while self.tail(lo) < u:
            lo /= 2.0
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if self.tail(mid) > u:
                lo = mid
            else:
                hi = mid
        return math.sqrt(lo * hi)

    def levy_density(self, y: float) -> float:
        return (
            self.c
            / math.sqrt(2.0 * math.pi * self.sigma2 * y**3)
            * math.exp(-self.decay_rate * y)
        )

    def iota(self, lam: float) -> float:
        # Laplace transform of Gamma(1/2, rate c^2/(2 sigma2)): the density
        # z * levy_density(z) integrates to one
        return (1.0 + 2.0 * lam * self.sigma2 / self.c**2) ** -0.5

    @property
    def beta(self) -> float:
        return self.c


def mechanism_to_json(mech: BranchingMechanism) -> str:
    if isinstance(mech, StableMechanism):
        return json.dumps({"kind": "stable", "alpha": mech.alpha})
    if isinstance(mech, FiniteVarianceMechanism):
        return json.dumps({"kind": "fv", "c": mech.c, "sigma2": mech.sigma2})
    raise TypeError(f"unknown mechanism {mech!r}")


def mechanism_from_json(text: str) -> BranchingMechanism:
    doc = json.loads(text)
    if doc["kind"] == "stable":
        return StableMechanism(alpha=float(doc["alpha"]))
    if doc["kind"] == "fv":
        return FiniteVarianceMechanism(c=float(doc["c"]), sigma2=float(doc["sigma2"]))
    raise ValueError(f"unknown mechanism kind {doc['kind']!r}")


def cumulant(mech: BranchingMechanism, lam: float) -> float:
    """kappa(lam) in closed form (see the mechanism classes)."""
    if lam < 0.0:
        raise DomainError("cumulant argument must be non-negative")
    if lam == 0.0:
        return 0.0
    return mech.cumulant(lam)


def compute_r(plus: OffspringLaw, n: int) -> float:
    """Normalizer r(n) = 1 / E[1 - exp(-xi/n) - (xi/n) exp(-xi/n)].

    The expectation runs over the stored support plus the analytic tail by
    quadrature.  For laws with a finite second moment this behaves like
    2 n**2 / E[xi**2]; for tail index alpha in (1, 2) it is regularly varying
    with index alpha.
    """
    if n < 1:
        raise ValueError("n must be positive")
    k = np.arange(len(plus.probs), dtype=np.float64)
    u = k / n
    h = -np.expm1(-u) - u * np.exp(-u)
    expect = float(np.dot(plus.probs, h))
    if plus.tail is not None:
        a, scale = plus.tail.alpha, plus.tail.scale
        kmax = len(plus.probs) - 1

        def integrand(y):
            v = y / n
            return scale * y ** (-(1.0 + a)) * (-math.expm1(-v) - v * math.exp(-v))

        mid = max(10.0 * n, kmax + 1.0)
        t1, _ = quad(integrand, kmax + 0.5, mid, limit=200)
        t2, _ = quad(integrand, mid, np.inf, limit=200)
        expect += t1 + t2
    return 1.0 / expect


def sample_subordinator(
    mech: BranchingMechanism,
    x: float,
    rng: np.random.Generator,
    size: Optional[int] = None,
):
    """Draw tau_x with E exp(-lam tau_x) = exp(-x * kappa(lam)).

    Stable kind: Kanter's trigonometric representation of the positive
    rho-stable variable (rho = 1/alpha), scaled by x**alpha so the Laplace
    exponent is exactly x * lam**(1/alpha).  Finite-variance kind: an
    inverse-Gaussian draw matching the closed-form cumulant.
    """
    if x < 0.0:
        raise ValueError("interval length must be non-negative")
    n = 1 if size is None else size
    if x == 0.0:
        out = np.zeros(n)
        return float(out[0]) if size is None else out
    if isinstance(mech, StableMechanism):
        rho = 1.0 / mech.alpha
        u = rng.uniform(low=np.nextafter(0.0, 1.0), high=1.0, size=n) * math.pi
        e = rng.exponential(size=n)
        a = (
            np.sin(rho * u) ** rho
            * np.sin((1.0 - rho) * u) ** (1.0 - rho)
            / np.sin(u)
        ) ** (1.0 / (1.0 - rho))
        out = x**mech.alpha * (a / e) ** ((1.0 - rho) / rho)
    elif isinstance(mech, FiniteVarianceMechanism):
        shape = x * mech.c / math.sqrt(mech.sigma2)
        out = rng.wald(mean=x, scale=shape * shape, size=n)
    else:
        raise TypeError(f"unknown mechanism {mech!r}")
    return float(out[0]) if size is None else out


def sample_jump_ranks(
    mech: BranchingMechanism,
    x: float,
    eps: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Decreasing jumps exceeding eps of the subordinator over length x.

    The jumps above eps on an interval of length x are the images of unit-rate
    Poisson arrival times G_1 < G_2 < ... < x * tail(eps) under the tail
    inverse; strict ranking is inherited from the arrivals.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if x <= 0.0:
        return np.zeros(0)
    budget = x * mech.tail(eps)
    arrivals: list[np.ndarray] = []
    total = 0.0
    chunk = max(16, int(budget + 4.0 * math.sqrt(budget + 1.0)))
    while True:
        gaps = rng.exponential(size=chunk)
        cum = total + np.cumsum(gaps)
        arrivals.append(cum)
        total = float(cum[-1])
        if total > budget:
            break
    g = np.concatenate(arrivals)
    g = g[g < budget]
    if isinstance(mech, StableMechanism):
        jumps = (gamma_fn(1.0 - 1.0 / mech.alpha) * g / x) ** (-mech.alpha)
    else:
        jumps = np.array([mech.tail_inverse(v / x) for v in g])
    return jumps


@dataclass
class CsbpTree:
    """Tree of positive masses; children are ranked subordinator jumps.

    ``nodes`` maps a label path (tuple of child indices, root = ()) to its
    mass; ``truncated_level`` records the first level whose total mass fell
    below the jump threshold, if any.
    """

    nodes: dict = field(default_factory=dict)
    root_mass: float = 0.0
    truncated_level: Optional[int] = None

    def level(self, k: int) -> list[tuple[tuple, float]]:
        return sorted(
            ((lab, m) for lab, m in self.nodes.items() if len(lab) == k),
            key=lambda item: item[0],
        )

    def level_masses(self, k: int) -> np.ndarray:
        return np.array([m for _, m in self.level(k)])

    def children(self, label: tuple) -> np.ndarray:
        out = []
        j = 1
        while (*label, j) in self.nodes:
            out.append(self.nodes[(*label, j)])
            j += 1
        return np.array(out)


def build_csbp_tree(
    x: float,
    mech: BranchingMechanism,
    depth: int,
    eps: float,
    rng: np.random.Generator,
    strict: bool = False,
) -> CsbpTree:
    """Grow the jump tree: children of a node of mass z are the ranked jumps
    over an interval of length z, truncated below eps.

    Sibling subtrees use independent draws from the shared stream, matching
    the independence of the restriction of a Poisson measure to disjoint
    strips.  When a level's total mass drops below eps the tree stops there;
    with ``strict=True`` this raises DegenerateLevel (partial tree attached).
    """
    if depth < 0:
        raise ValueError("depth must be non-negative")
    tree = CsbpTree(nodes={(): x}, root_mass=x)
    frontier = [((), x)]
    for level in range(1, depth + 1):
        nxt = []
        for label, mass in frontier:
            jumps = sample_jump_ranks(mech, mass, eps, rng)
            for j, jump in enumerate(jumps, start=1):
                lab = (*label, j)
                tree.nodes[lab] = float(jump)
                nxt.append((lab, float(jump)))
        total = sum(m for _, m in nxt)
        if total < eps:
            tree.truncated_level = level
            if strict:
                err = DegenerateLevel(f"level {level} mass {total:.3e} below eps")
                err.tree = tree
                raise err
            break
        frontier = nxt
    return tree


def simulate_discrete_csbp(
    x: float,
    mech: BranchingMechanism,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mass chain Z_0 = x, Z_{k+1} = fresh subordinator increment over Z_k.

    Conditionally on Z_k = z the next value has Laplace transform
    exp(-z * kappa(lam)); the chain absorbs at 0.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    out = np.zeros(steps + 1)
    out[0] = x
    for k in range(steps):
        out[k + 1] = sample_subordinator(mech, out[k], rng) if out[k] > 0.0 else 0.0
    return out


def simulate_csbpi_fv(
    x: float,
    c: float,
    sigma2: float,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Finite-variance mass chain with immigration.

    Z_{k+1} = tau(Z_k) + I_k with I_k iid Gamma(1/2, rate c**2/(2 sigma2)),
    the normalized size-biased density z * levy_density(z).  The stable kind
    has no proper immigration law (the size-biased measure has infinite
    mass), hence no sampler here.
    """
    mech = FiniteVarianceMechanism(c=c, sigma2=sigma2)
    out = np.zeros(steps + 1)
    out[0] = x
    scale = 2.0 * sigma2 / c**2
    for k in range(steps):
        repro = sample_subordinator(mech, out[k], rng) if out[k] > 0.0 else 0.0
        out[k + 1] = repro + rng.gamma(0.5, scale)
    return out


def fdd_laplace_csbpi(
    mech: BranchingMechanism,
    x: float,
    s: Sequence[float],
    t: Sequence[float],
) -> float:
    """Joint Laplace functional of the immigration mass chain at steps 1..k.

    With u_i = s_{i-1} + beta * t_i, the value is
    prod_j iota(acc_j) * exp(-x * kappa(acc_{k-1})) where acc_0 = u_k and
    acc_j = u_{k-j} + kappa(acc_{j-1}).  beta is c for finite variance and 1
    for stable; the stable iota requires strictly positive arguments.
    """
    s = list(map(float, s))
    t = list(map(float, t))
    if len(s) != len(t) or not s:
        raise ValueError("s and t must be equal-length, non-empty")
    if any(v < 0.0 for v in s + t):
        raise ValueError("rates must be non-negative")
    u = [s[i] + mech.beta * t[i] for i in range(len(s))]
    acc = u[-1]
    prod = 1.0
    for i in range(len(u) - 1, -1, -1):
        if i < len(u) - 1:
            acc = u[i] + mech.cumulant(acc)
        if isinstance(mech, StableMechanism) and acc <= 0.0:
            raise DomainError("stable immigration transform needs positive arguments")
        prod *= mech.iota(acc)
    return prod * math.exp(-x * cumulant(mech, acc))


def csbp_tree_to_csv(tree: CsbpTree) -> str:
    """CSV dump `label,mass` with dotted labels; the root is `root`."""
    lines = ["label,mass"]
    for label in sorted(tree.nodes, key=lambda lab: (len(lab), lab)):
        name = ".".join(str(i) for i in label) if label else "root"
        lines.append(f"{name},{tree.nodes[label]:.17g}")
    return "\n".join(lines) + "\n"
