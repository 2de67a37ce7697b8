"""Exact finite-population laws for the mutation-marked branching chain.

The chain of interest is ``(T_n, M_{n+1})``: the number of individuals
carrying exactly n mutations on their ancestral line, paired with the count
of (n+1)-type mutants they beget.  Everything in this module is computed by
pmf arithmetic (convolution powers and compositions), exact to floating
precision up to explicitly tracked truncation:

* the one-step law from ``a`` founders,
  ``P_a(T0 = k, M1 = l) = (a / k) * conv_power(pi, k)[k - a, l]``;
* n-step transition tables of the chain, of its Doob transform by the
  martingale ``M_n q**(M_n - a) / f'(q)**n`` (the version conditioned on
  the mutant line never dying out), and of the survival-conditioned
  (Yaglom-type) finite-n laws;
* the fixed point ``phi(x, y)`` of ``phi = x * g(phi, y)``, which is the
  bivariate pgf of ``(T0, M1)`` from one founder;
* extinction roots and the immigration law ``f'/m`` describing how the
  conditioned mutant count reproduces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.signal import convolve

from .errors import CapTooSmall, InvalidLaw, InvalidRegime, NonConvergence
from .laws import DEFAULT_DROP_TOL, BivariatePmf, JointLaw

PHI_TOL = 1e-13
PHI_MAX_ITER = 100_000


@dataclass(frozen=True)
class PairPmf(BivariatePmf):
    """A truncated law on (type population, mutant count) pairs.

    ``probs[k, l]`` is the mass at ``T = k``, ``M = l``; rows below
    ``ancestors`` are structurally zero because every founder counts itself.
    """

    ancestors: int = 1

    def pgf_eval(self, x: float, y: float) -> float:
        """Evaluate sum probs[k,l] x**k y**l over the stored support.

        At (1, 1) this is the stored mass; adding ``dropped_mass`` recovers
        exactly 1 for a conservative table.
        """
        kdim, ldim = self.probs.shape
        ypow = np.power(y, np.arange(ldim)) if y != 1.0 else np.ones(ldim)
        xpow = np.power(x, np.arange(kdim)) if x != 1.0 else np.ones(kdim)
        return float(xpow @ self.probs @ ypow)

    def marginal_m(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def marginal_t(self) -> np.ndarray:
        return self.probs.sum(axis=1)


def solve_phi(joint: JointLaw, x: float, y: float) -> float:
    """Smallest fixed point of phi = x * g(phi, y) by monotone iteration from 0.

    The iteration is increasing and bounded by the smallest root, so it
    converges without any root-finder tuning; raises NonConvergence with the
    final residual if the (near-critical) linear rate is too slow for the
    iteration cap.
    """
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError("pgf arguments must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0 and y == 1.0 and joint.clone_mean <= 1.0:
        return 1.0
    phi = 0.0
    for _ in range(PHI_MAX_ITER):
        nxt = x * joint.pgf(phi, y)
        if abs(nxt - phi) < PHI_TOL:
            return nxt
        phi = nxt
    raise NonConvergence(abs(x * joint.pgf(phi, y) - phi), PHI_MAX_ITER)


def _phi_bracket(joint: JointLaw, x: float, y: float) -> float:
    """Bracketed root of phi = x*g(phi, y); fast path for near-critical laws.

    Used by diagnostics that evaluate the transform at tiny arguments where
    the monotone iteration's linear rate is impractical.  For x < 1 the root
    in [0, 1] is unique.
    """
    from scipy.optimize import brentq

    if x == 0.0:
        return 0.0
    fn = lambda u: u - x * joint.pgf(u, y)
    hi = 1.0
    if fn(hi) < 0.0:  # supercritical-at-one corner; root is 1
        return 1.0
    return float(brentq(fn, 0.0, hi, xtol=1e-16, rtol=8.9e-16, maxiter=200))


def mutant_mean(joint: JointLaw) -> float:
    """m = E M1 from one founder: E xi_m / (1 - E xi_c) (clone line subcritical)."""
    if joint.clone_mean >= 1.0:
        raise InvalidRegime("clone reproduction must be subcritical for finite families")
    return joint.mutant_mean / (1.0 - joint.clone_mean)


class ChainCalculator:
    """Caches the convolution machinery behind the n-step tables.

    Holds, for one (joint law, cap) pair: the dense one-individual pair law,
    the one-step founder law ``P_1(T0, M1)``, its mutant marginal, and the
    growing list of convolution powers of the founder law.
    """

    def __init__(self, joint: JointLaw, kmax: int, lmax: Optional[int] = None,
                 drop_tol: float = DEFAULT_DROP_TOL):
        self.joint = joint
        self.kmax = kmax
        self.lmax = 2 * kmax if lmax is None else lmax
        self.drop_tol = drop_tol
        self.base = joint.dense(min(joint.plus.support_max, self.kmax))
        self.pair = law_T0M1(1, joint, kmax, lmax=self.lmax, drop_tol=drop_tol)
        marg = self.pair.marginal_m()
        nz = np.nonzero(marg > 1e-300)[0]
        self.m_marginal = marg[: nz[-1] + 1] if len(nz) else marg[:1]
        self._pair_powers = [None, self.pair]  # index j -> founder law **j

    def pair_power(self, j: int) -> PairPmf:
        """j-fold convolution of the one-founder pair law (pgf phi**j)."""
        while len(self._pair_powers) <= j:
            prev = self._pair_powers[-1]
            nxt = _conv2_trunc(prev.probs, self.pair.probs, self.kmax, self.lmax)
            dropped = 1.0 - float(nxt.sum())
            jj = len(self._pair_powers)
            assert not np.any(nxt[:jj, :].sum(axis=1) > 1e-12), "mass below the founder count"
            self._pair_powers.append(
                PairPmf(probs=nxt, dropped_mass=dropped, ancestors=jj)
            )
        return self._pair_powers[j]

    def mchain_pmf(self, j: int, steps: int) -> np.ndarray:
        """pmf of the mutant count after ``steps`` chain steps from state j."""
        state = np.zeros(self.lmax + 1)
        if j > self.lmax:
            raise CapTooSmall(1.0, self.drop_tol, "initial state beyond cap")
        state[j] = 1.0
        for _ in range(steps):
            state = self._mchain_step(state)
        return state

    def _mchain_step(self, state: np.ndarray) -> np.ndarray:
        out = np.zeros_like(state)
        out[0] = state[0]
        # one step of the branching recursion: convolution powers of the
        # mutant marginal, accumulated against the current state pmf
        power = np.ones(1)
        for j in range(1, len(state)):
            power = np.convolve(power, self.m_marginal)[: len(state)]
            if state[j] > 0.0:
                out[: len(power)] += state[j] * power
            if power.sum() < 1e-300:
                break
        return out


_CALC_CACHE: dict[tuple[int, int, int, float], ChainCalculator] = {}


def _get_calc(joint: JointLaw, kmax: int, lmax: Optional[int], drop_tol: float) -> ChainCalculator:
    key = (id(joint), kmax, -1 if lmax is None else lmax, drop_tol)
    calc = _CALC_CACHE.get(key)
    if calc is None or calc.joint is not joint:
        calc = ChainCalculator(joint, kmax, lmax, drop_tol)
        _CALC_CACHE[key] = calc
    return calc


def _conv2_trunc(a: np.ndarray, b: np.ndarray, kmax: int, lmax: int) -> np.ndarray:
    full = convolve(a, b, mode="full", method="auto")
    return np.clip(full[: kmax + 1, : lmax + 1], 0.0, None)


def law_T0M1(a: int, joint: JointLaw, kmax: int, lmax: Optional[int] = None,
             drop_tol: float = DEFAULT_DROP_TOL) -> PairPmf:
    """Exact law of (T0, M1) from ``a`` founders, for T0 <= kmax.

    Row k is (a / k) times row (k - a) of the k-fold convolution of the
    individual (clones, mutants) law; the convolution sweep keeps only the
    rows that later outputs can reference, so cost stays near kmax**2.
    """
    if a < 1:
        raise ValueError("at least one founder required")
    if kmax < a:
        raise ValueError("kmax must be at least the founder count")
    lmax = 2 * kmax if lmax is None else lmax
    base = joint.dense(min(joint.plus.support_max, kmax))
    out = np.zeros((kmax + 1, lmax + 1))
    # conv holds pi**k restricted to clone-rows 0..kmax-a (all that's needed)
    conv = np.zeros((kmax - a + 1, lmax + 1))
    conv[0, 0] = 1.0
    for k in range(1, kmax + 1):
        conv = convolve(conv, base.probs, mode="full", method="auto")[: kmax - a + 1, : lmax + 1]
        np.clip(conv, 0.0, None, out=conv)
        if k >= a:
            out[k, :] = (a / k) * conv[k - a, :]
    dropped = 1.0 - float(out.sum())
    if dropped > drop_tol:
        raise CapTooSmall(dropped, drop_tol)
    return PairPmf(probs=out, dropped_mass=dropped, ancestors=a)


def chain_transition(joint: JointLaw, n: int, j: int, kmax: int,
                     lmax: Optional[int] = None,
                     drop_tol: float = DEFAULT_DROP_TOL) -> PairPmf:
    """n-step law of the pair chain started from mutant count j.

    The table depends only on j (the transition kernel ignores the first
    coordinate).  It is assembled as: evolve the mutant count n-1 steps, then
    apply one founder-law step, i.e. mix convolution powers of the one-step
    founder law against the (n-1)-step mutant pmf.
    """
    if n < 1 or j < 1:
        raise ValueError("n and j must be positive")
    calc = _get_calc(joint, kmax, lmax, drop_tol)
    mstate = calc.mchain_pmf(j, n - 1)
    out = np.zeros((kmax + 1, calc.lmax + 1))
    out[0, 0] = float(mstate[0])  # chain already absorbed at (0, 0)
    for jj in range(1, len(mstate)):
        w = float(mstate[jj])
        if w < 1e-16:
            continue
        out += w * calc.pair_power(jj).probs
    dropped = 1.0 - float(out.sum())
    if dropped > drop_tol:
        raise CapTooSmall(dropped, drop_tol)
    return PairPmf(probs=out, dropped_mass=dropped, ancestors=j)


def extinction_prob(coeffs) -> float:
    """Smallest root in [0, 1] of f(y) = y for a pgf given by coefficients.

    Classifies q = 1 whenever the mean is <= 1 + 1e-12 (avoids chasing
    spurious near-1 roots at criticality); otherwise brackets in [0, 1) and
    polishes.  Degenerate laws are rejected.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 1 or np.any(c < -1e-12) or abs(c.sum() - 1.0) > 1e-9:
        raise InvalidLaw("not a probability coefficient sequence")
    if np.any(np.isclose(c, 1.0, atol=1e-12)):
        raise InvalidLaw("degenerate single-atom law rejected")
    k = np.arange(len(c), dtype=np.float64)
    mean = float(np.dot(k, c))
    if mean <= 1.0 + 1e-12:
        return 1.0
    f = lambda y: float(np.polynomial.polynomial.polyval(y, c)) - y
    lo, hi = 0.0, 1.0 - 1e-9
    if f(hi) >= 0.0:  # root sits within the epsilon collar of 1
        return 1.0
    for _ in range(200):  # plain bisection, then a secant polish below
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PgfContext:
    """Bundle of the transforms governing the mutant line.

    ``g`` is the individual's bivariate pgf, ``f`` the founder pgf of M1
    (y -> phi(1, y)), ``m`` its mean and ``q`` the extinction probability of
    the mutant count chain.
    """

    g: Callable[[float, float], float]
    f: Callable[[float], float]
    m: float
    q: float
    f_prime_q: float

    @staticmethod
    def from_joint(joint: JointLaw, kmax: int = 256) -> "PgfContext":
        f = lambda y: solve_phi(joint, 1.0, y)
        m = mutant_mean(joint)
        coeffs = law_T0M1(1, joint, kmax, drop_tol=1.0).marginal_m()
        if m <= 1.0 + 1e-12:
            q = 1.0
            fpq = m
        else:
            q = extinction_prob(coeffs / coeffs.sum())
            k = np.arange(1, len(coeffs), dtype=np.float64)
            fpq = float(np.dot(k * coeffs[1:], np.power(q, k - 1.0)))
        return PgfContext(g=joint.pgf, f=f, m=m, q=q, f_prime_q=fpq)


def q_transition(joint: JointLaw, n: int, j: int, kmax: int,
                 lmax: Optional[int] = None,
                 drop_tol: float = DEFAULT_DROP_TOL,
                 context: Optional[PgfContext] = None) -> PairPmf:
    """n-step table of the chain conditioned never to lose its mutants.

    Doob transform of the plain table: cell (k, l) is weighted by
    l * q**(l - j) / (j * f'(q)**n).  At criticality (q = 1, f'(q) = 1) this
    is plain size-biasing by l / j.
    """
    ctx = context or PgfContext.from_joint(joint, kmax=min(kmax, 256))
    if ctx.f_prime_q == 0.0:
        raise InvalidRegime("f'(q) = 0: transform undefined")
    if ctx.m > 1.0 + 1e-12:
        raise InvalidRegime("mutant chain must be critical or subcritical")
    plain = chain_transition(joint, n, j, kmax, lmax=lmax, drop_tol=drop_tol)
    l = np.arange(plain.probs.shape[1], dtype=np.float64)
    weights = l * np.power(ctx.q, l - j) / (j * ctx.f_prime_q**n)
    probs = plain.probs * weights[None, :]
    return PairPmf(probs=probs, dropped_mass=1.0 - float(probs.sum()), ancestors=j)


def spine_law(a: int, joint: JointLaw, kmax: int, lmax: Optional[int] = None,
              drop_tol: float = DEFAULT_DROP_TOL) -> PairPmf:
    """Exact first-step law of the conditioned chain from ``a`` founders.

    Cell (k, l) carries (l / (m k)) * conv_power(pi, k)[k - a, l]; equals the
    plain founder law size-biased by l / (m a).
    """
    m = mutant_mean(joint)
    plain = law_T0M1(a, joint, kmax, lmax=lmax, drop_tol=drop_tol)
    l = np.arange(plain.probs.shape[1], dtype=np.float64)
    probs = plain.probs * (l / (m * a))[None, :]
    return PairPmf(probs=probs, dropped_mass=1.0 - float(probs.sum()), ancestors=a)


def fn_at(joint: JointLaw, n: int, y: float) -> float:
    """f_n(y): the n-fold composition of the founder mutant pgf at y."""
    val = y
    for _ in range(n):
        val = solve_phi(joint, 1.0, val)
    return val


def yaglom_pmf(joint: JointLaw, n: int, kmax: int, lmax: Optional[int] = None,
               drop_tol: float = DEFAULT_DROP_TOL) -> PairPmf:
    """Law of (T_{n-1}, M_n) from one founder given the mutants survive step n.

    Requires almost-sure extinction (subcritical clones and total mean <= 1);
    the conditioning event is {M_n > 0}, so the l = 0 column is removed and
    the table renormalized by 1 - f_n(0) (computed by exact pgf iteration,
    independent of the table truncation).
    """
    if joint.clone_mean >= 1.0:
        raise InvalidRegime("clone mean must be < 1")
    if joint.plus.mean > 1.0 + 1e-12:
        raise InvalidRegime("total mean > 1: extinction is not almost sure")
    table = chain_transition(joint, n, 1, kmax, lmax=lmax, drop_tol=drop_tol)
    survive = 1.0 - fn_at(joint, n, 0.0)
    probs = table.probs.copy()
    probs[:, 0] = 0.0
    probs /= survive
    return PairPmf(probs=probs, dropped_mass=1.0 - float(probs.sum()), ancestors=1)


def immigration_pgf_coeffs(coeffs, kmax: int) -> np.ndarray:
    """pmf whose pgf is f'(s)/m, truncated at kmax.

    This is the law of the extra mutants arriving each step alongside the
    surviving line: out[j] = (j + 1) c_{j+1} / m.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    k = np.arange(len(c), dtype=np.float64)
    m = float(np.dot(k, c))
    if m <= 0.0:
        raise InvalidLaw("pgf derivative vanishes at 1")
    out = np.zeros(kmax + 1)
    top = min(kmax + 1, len(c) - 1)
    j = np.arange(top, dtype=np.float64)
    out[:top] = (j + 1.0) * c[1 : top + 1] / m
    return out


def pair_pmf_to_csv(pmf: PairPmf) -> str:
    """CSV dump `k,l,prob` over nonzero cells, sorted lexicographically."""
    lines = ["k,l,prob"]
    ks, ls = np.nonzero(pmf.probs)
    for k, l in zip(ks.tolist(), ls.tolist()):
        lines.append(f"{k},{l},{pmf.probs[k, l]:.17g}")
    return "\n".join(lines) + "\n"
