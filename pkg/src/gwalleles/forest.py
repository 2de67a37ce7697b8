"""Forward simulation of the mutation-marked branching population.

Two levels of machinery live here:

* explicit marked forests (Ulam-Harris labelled trees with mutant edges) for
  structural checks and small-scale runs, with extraction of the type chain
  ``(T_n, M_{n+1})`` and of the tree of alleles;
* batched population-level samplers used by the statistical harness: a
  vectorized first-passage walk for ``(T0, M1)``, a generation-by-generation
  group sampler (multinomial small part + individually drawn large offspring)
  that is exact in law but whose cost scales with generation count rather
  than population size, the tilted "spine" sampler behind the chain
  conditioned on mutant survival, and the tree of alleles with immigration.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    IncompleteForest,
    InvalidRegime,
    PopulationCapExceeded,
    WalkCapExceeded,
)
from .exact import mutant_mean
from .laws import JointLaw

DEFAULT_NODE_CAP = 10**7
DEFAULT_WALK_CAP = 10**8


# ---------------------------------------------------------------------------
# explicit marked forests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestNode:
    """One individual: its tree, Ulam-Harris label, type, and child counts.

    Children 1..clone_children are clones; the remaining mutant_children
    labels carry a mutation mark on their edge.
    """

    tree: int
    label: tuple[int, ...]
    ntype: int
    clone_children: int
    mutant_children: int


@dataclass
class MarkedForest:
    """All explored individuals, type by type (breadth-first within a type)."""

    ancestors: int
    nodes: list[ForestNode] = field(default_factory=list)
    complete_types: int = -1
    truncated: bool = False

    def nodes_of_type(self, k: int) -> list[ForestNode]:
        return [nd for nd in self.nodes if nd.ntype == k]


@dataclass
class TypeChain:
    """Trajectory ((T_n, M_{n+1}))_n of type sizes and mutant counts."""

    pairs: list[tuple[int, int]]
    ancestors: int

    def __post_init__(self):
        prev_m = self.ancestors
        for t, m in self.pairs:
            if t < prev_m:
                raise ValueError("type population smaller than its founders")
            if prev_m == 0 and (t or m):
                raise ValueError("chain must absorb at (0, 0)")
            prev_m = m


@dataclass
class AlleleTree:
    """Allelic family sizes and out-degrees, keyed by Ulam-Harris labels.

    Children of each family are ranked by decreasing size, ties broken
    uniformly at random; the root family holds every individual of the
    founders' type.
    """

    nodes: dict[tuple[int, ...], tuple[int, int]] = field(default_factory=dict)

    def size(self, label: tuple[int, ...]) -> int:
        return self.nodes[label][0]

    def degree(self, label: tuple[int, ...]) -> int:
        return self.nodes[label][1]

    def level_labels(self, k: int) -> list[tuple[int, ...]]:
        return sorted(lab for lab in self.nodes if len(lab) == k)

    def level_sizes(self, k: int) -> np.ndarray:
        return np.array([self.nodes[lab][0] for lab in self.level_labels(k)], dtype=np.int64)

    def level_degrees(self, k: int) -> np.ndarray:
        return np.array([self.nodes[lab][1] for lab in self.level_labels(k)], dtype=np.int64)

    @property
    def depth(self) -> int:
        return max(len(lab) for lab in self.nodes)


def simulate_marked_forest(
    a: int,
    joint: JointLaw,
    rng: np.random.Generator,
    max_nodes: int = DEFAULT_NODE_CAP,
    max_types: int = 64,
) -> MarkedForest:
    """Grow the forest from ``a`` founders, exploring types in increasing order.

    Every individual draws an iid (clones, mutants) pair; mutant children open
    the next type.  Raises PopulationCapExceeded with the partial forest
    attached when a cap is hit (expected for supercritical inputs).
    """
    if a < 1:
        raise ValueError("at least one founder required")
    forest = MarkedForest(ancestors=a)
    frontier = [(tree, (), 0) for tree in range(a)]  # founders of current type
    for ntype in range(max_types + 1):
        if not frontier:
            forest.complete_types = ntype - 1
            return forest
        next_frontier = []
        queue = deque(frontier)
        while queue:
            tree, label, depth = queue.popleft()
            clones, mutants = joint.sample_pairs(rng, 1)
            c, m = int(clones[0]), int(mutants[0])
            forest.nodes.append(
                ForestNode(tree=tree, label=label, ntype=ntype,
                           clone_children=c, mutant_children=m)
            )
            if len(forest.nodes) >= max_nodes:
                forest.truncated = True
                forest.complete_types = ntype - 1
                raise PopulationCapExceeded(partial=forest)
            for j in range(1, c + 1):
                queue.append((tree, (*label, j), depth + 1))
            for j in range(c + 1, c + m + 1):
                next_frontier.append((tree, (*label, j), 0))
        forest.complete_types = ntype
        frontier = next_frontier
    forest.truncated = bool(frontier)
    return forest


def extract_type_chain(forest: MarkedForest) -> TypeChain:
    """Read ((T_k, M_{k+1})) off the forest's stopping-line decomposition.

    T_k counts the nodes with k marks on their ancestral line; M_{k+1} the
    mutant children they beget.  Truncated forests yield the chain up to the
    last completely explored type; a forest with no complete type raises
    IncompleteForest.
    """
    if forest.complete_types < 0:
        raise IncompleteForest("no type level was completely explored")
    pairs = []
    for k in range(forest.complete_types + 1):
        level = forest.nodes_of_type(k)
        t = len(level)
        m = sum(nd.mutant_children for nd in level)
        if t == 0:
            break
        pairs.append((t, m))
        if m == 0:
            break
    return TypeChain(pairs=pairs, ancestors=forest.ancestors)


def _rank_families(sizes: list[int], rng: np.random.Generator) -> list[int]:
    """Order family indices by decreasing size, ties permuted uniformly.

    The tie-break draw is made in label (creation) order so results are
    reproducible for a fixed stream.
    """
    noise = rng.random(len(sizes))
    return sorted(range(len(sizes)), key=lambda i: (-sizes[i], noise[i]))


def build_allele_tree(forest: MarkedForest, rng: np.random.Generator) -> AlleleTree:
    """Group the forest into allelic families and rank them by size.

    The root family collects every node of the founders' type; each mutant
    child founds the next-level family containing its clone descendants.
    """
    if forest.truncated:
        raise IncompleteForest("cannot build the allele tree of a truncated forest")
    # family id per (tree, label); ancestors share family 0
    by_key = {(nd.tree, nd.label): nd for nd in forest.nodes}
    fam_of: dict[tuple[int, tuple[int, ...]], int] = {}
    fam_size = [0]
    fam_order: list[list[int]] = [[]]  # children family ids in creation order
    for nd in sorted(forest.nodes, key=lambda n: (len(n.label), n.tree, n.label)):
        key = (nd.tree, nd.label)
        if nd.label == ():
            fam = 0
        else:
            pnode = by_key[(nd.tree, nd.label[:-1])]
            pfam = fam_of[(nd.tree, nd.label[:-1])]
            if nd.label[-1] <= pnode.clone_children:
                fam = pfam
            else:
                fam = len(fam_size)
                fam_size.append(0)
                fam_order.append([])
                fam_order[pfam].append(fam)
        fam_of[key] = fam
        fam_size[fam] += 1
    tree = AlleleTree()
    labels = {0: ()}
    stack = [0]
    while stack:
        fam = stack.pop()
        children = fam_order[fam]
        order = _rank_families([fam_size[ch] for ch in children], rng)
        for j, idx in enumerate(order, start=1):
            ch = children[idx]
            labels[ch] = (*labels[fam], j)
            stack.append(ch)
        tree.nodes[labels[fam]] = (fam_size[fam], len(children))
    return tree


# ---------------------------------------------------------------------------
# batched population-level samplers
# ---------------------------------------------------------------------------


class _GroupSampler:
    """Exact batched sums of iid offspring draws for whole generations.

    Offspring totals up to ``big_threshold`` are drawn jointly through one
    multinomial per generation; the rare larger totals are drawn one by one
    from the conditional tail.  Cost per generation is O(threshold + number
    of large draws), independent of the generation size.
    """

    def __init__(self, joint: JointLaw, big_threshold: int = 64):
        probs = joint.plus.probs
        total = float(probs.sum())
        b = min(big_threshold, len(probs) - 1)
        self.b = b
        small = probs[: b + 1] / total
        tail = probs[b + 1 :]
        self.p_big = float(tail.sum()) / total
        self.pvals = np.concatenate([small, [self.p_big]])
        self.pvals /= self.pvals.sum()
        if tail.size == 0:
            self.pvals = np.concatenate([small / small.sum(), [0.0]])
        self.small_values = np.arange(b + 1, dtype=np.int64)
        self.tail_values = np.arange(b + 1, len(probs), dtype=np.int64)
        self.tail_cdf = np.cumsum(tail)
        self.p = joint.p

    def children_sums(self, founders: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw per entry of Sum_{i<=founders} xi_plus_i."""
        counts = rng.multinomial(founders, self.pvals)
        sums = counts[:, :-1] @ self.small_values
        nbig = counts[:, -1]
        total_big = int(nbig.sum())
        if total_big:
            u = rng.random(total_big) * self.tail_cdf[-1]
            vals = self.tail_values[np.searchsorted(self.tail_cdf, u, side="right")]
            offsets = np.zeros(len(nbig) + 1, dtype=np.int64)
            np.cumsum(nbig, out=offsets[1:])
            has = nbig > 0
            sums[has] += np.add.reduceat(vals, offsets[:-1][has])
        return sums


def population_pair_batch(
    founders,
    joint: JointLaw,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
    max_generations: Optional[int] = None,
    big_threshold: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched exact draws of (T0, M1) from per-replicate founder counts.

    Simulates the founders' type generation by generation: children sums via
    the group sampler, mutants split off by one binomial per generation.
    Returns (T0, M1, capped); replicates whose population hit ``node_cap``
    are flagged and carry their partial counts.
    """
    g = np.asarray(founders, dtype=np.int64).copy()
    nrep = len(g)
    t0 = np.zeros(nrep, dtype=np.int64)
    m1 = np.zeros(nrep, dtype=np.int64)
    capped = np.zeros(nrep, dtype=bool)
    sampler = _GroupSampler(joint, big_threshold)
    active = g > 0
    gen = 0
    while np.any(active):
        idx = np.nonzero(active)[0]
        t0[idx] += g[idx]
        over = t0[idx] > node_cap
        if np.any(over):
            capped[idx[over]] = True
            active[idx[over]] = False
            idx = idx[~over]
            if len(idx) == 0:
                break
        children = sampler.children_sums(g[idx], rng)
        muts = rng.binomial(children, joint.p)
        m1[idx] += muts
        g[idx] = children - muts
        active[idx] = g[idx] > 0
        gen += 1
        if max_generations is not None and gen >= max_generations:
            capped[active] = True
            break
    return t0, m1, capped


def walk_pair_batch(
    a: int,
    joint: JointLaw,
    nrep: int,
    rng: np.random.Generator,
    step_cap: int = DEFAULT_WALK_CAP,
    block: int = 256,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched (T0, M1) via the first-passage walk S_k = a + sum(xi_c - 1).

    The walk is skip-free downward, so the first k with S_k = 0 is hit
    exactly; T0 is that k and M1 the mutant total accumulated on the way.
    Replicates exceeding ``step_cap`` steps are flagged.
    """
    pos = np.full(nrep, a, dtype=np.int64)
    t0 = np.zeros(nrep, dtype=np.int64)
    m1 = np.zeros(nrep, dtype=np.int64)
    flagged = np.zeros(nrep, dtype=bool)
    cdf = joint.plus.cdf_table()
    active = pos > 0
    while np.any(active):
        idx = np.nonzero(active)[0]
        nact = len(idx)
        u = rng.random((nact, block)) * cdf[-1]
        totals = np.searchsorted(cdf, u, side="right")
        muts = rng.binomial(totals, joint.p)
        clones = totals - muts
        path = pos[idx, None] + np.cumsum(clones - 1, axis=1)
        hit = path == 0
        hits_any = hit.any(axis=1)
        first = np.argmax(hit, axis=1)
        done = idx[hits_any]
        steps_done = first[hits_any]
        t0[done] += steps_done + 1
        msums = np.cumsum(muts, axis=1)
        m1[done] += msums[hits_any, steps_done]
        active[done] = False
        cont = idx[~hits_any]
        if len(cont):
            t0[cont] += block
            m1[cont] += msums[~hits_any, -1]
            pos[cont] = path[~hits_any, -1]
            over = t0[cont] >= step_cap
            if np.any(over):
                flagged[cont[over]] = True
                active[cont[over]] = False
    return t0, m1, flagged


def sample_T0M1_by_walk(
    a: int,
    joint: JointLaw,
    rng: np.random.Generator,
    step_cap: int = DEFAULT_WALK_CAP,
) -> tuple[int, int]:
    """Single draw of (T0, M1) by the first-passage walk; exact in law."""
    t0, m1, flagged = walk_pair_batch(a, joint, 1, rng, step_cap=step_cap)
    if flagged[0]:
        raise WalkCapExceeded(f"no passage within {step_cap} steps")
    return int(t0[0]), int(m1[0])


def simulate_type_chain(
    a: int,
    joint: JointLaw,
    horizon: int,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
) -> TypeChain:
    """The chain ((T_k, M_{k+1})) for ``horizon`` steps via the group sampler."""
    t, m, capped = chain_batch(a, joint, horizon, 1, rng, node_cap=node_cap)
    if capped[0]:
        raise PopulationCapExceeded(partial=(t[:, 0], m[:, 0]))
    pairs = []
    for k in range(horizon):
        pairs.append((int(t[k, 0]), int(m[k, 0])))
        if m[k, 0] == 0:
            break
    return TypeChain(pairs=pairs, ancestors=a)


def chain_batch(
    a: int,
    joint: JointLaw,
    horizon: int,
    nrep: int,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched chain trajectories: arrays T[k, rep], M1[k, rep] for k < horizon."""
    t = np.zeros((horizon, nrep), dtype=np.int64)
    m = np.zeros((horizon, nrep), dtype=np.int64)
    capped = np.zeros(nrep, dtype=bool)
    state = np.full(nrep, a, dtype=np.int64)
    for k in range(horizon):
        tk, mk, ck = population_pair_batch(state, joint, rng, node_cap=node_cap)
        t[k] = tk
        m[k] = mk
        capped |= ck
        state = mk
    return t, m, capped


# ---------------------------------------------------------------------------
# the conditioned (mutant-survival) chain and its allele tree
# ---------------------------------------------------------------------------


class _SpineSampler:
    """Exact sampler of the size-biased founder pair (weight l / m).

    Construction: a spine of clone-ancestors of the distinguished mutant
    child, of geometric length with ratio E xi_c; spine individuals reproduce
    with the clone-count-biased pair law, the last one with the mutant-count-
    biased law, and every off-spine clone child spawns an ordinary family
    (delegated as a batch to the group sampler).
    """

    def __init__(self, joint: JointLaw):
        self.joint = joint
        probs = joint.plus.probs / joint.plus.probs.sum()
        k = np.arange(len(probs), dtype=np.float64)
        mean = float(np.dot(k, probs))
        self.clone_mean = (1.0 - joint.p) * mean
        if self.clone_mean >= 1.0:
            raise InvalidRegime("clone line must be subcritical for the spine construction")
        sb = k * probs
        self.sb_cdf = np.cumsum(sb)

    def _size_biased_totals(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(n) * self.sb_cdf[-1]
        return np.searchsorted(self.sb_cdf, u, side="right").astype(np.int64)

    def sample(
        self, nrep: int, rng: np.random.Generator, node_cap: int = DEFAULT_NODE_CAP
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.joint.p
        depth = rng.geometric(1.0 - self.clone_mean, size=nrep) - 1
        total_nodes = int(depth.sum())
        # interior spine nodes: clone-biased pairs, one clone continues the spine
        tot_int = self._size_biased_totals(total_nodes, rng)
        k_int = 1 + rng.binomial(np.maximum(tot_int - 1, 0), 1.0 - p)
        l_int = tot_int - k_int
        offsets = np.zeros(nrep + 1, dtype=np.int64)
        np.cumsum(depth, out=offsets[1:])
        bush = np.zeros(nrep, dtype=np.int64)
        spine_muts = np.zeros(nrep, dtype=np.int64)
        has = depth > 0
        if total_nodes:
            bush[has] = np.add.reduceat(k_int - 1, offsets[:-1][has])
            spine_muts[has] = np.add.reduceat(l_int, offsets[:-1][has])
        # final spine node: mutant-biased pair, all clones spawn families
        tot_fin = self._size_biased_totals(nrep, rng)
        l_fin = 1 + rng.binomial(np.maximum(tot_fin - 1, 0), p)
        k_fin = tot_fin - l_fin
        bush += k_fin
        spine_muts += l_fin
        t_bush, m_bush, capped = population_pair_batch(
            bush, self.joint, rng, node_cap=node_cap
        )
        t = depth + 1 + t_bush
        m = spine_muts + m_bush
        return t, m, capped


def conditioned_chain_batch(
    a: int,
    joint: JointLaw,
    horizon: int,
    nrep: int,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched trajectories of the chain conditioned on mutant-line survival.

    One step from j founders is the sum of j - 1 ordinary founder families
    and one size-biased spine family, which realizes the transform weighted
    by l q**(l-j) / (j f'(q)) in the almost-surely-extinct regime (q = 1).
    """
    if mutant_mean(joint) > 1.0 + 1e-12:
        raise InvalidRegime("mutant chain must be critical or subcritical")
    spine = _SpineSampler(joint)
    t = np.zeros((horizon, nrep), dtype=np.int64)
    m = np.zeros((horizon, nrep), dtype=np.int64)
    capped = np.zeros(nrep, dtype=bool)
    state = np.full(nrep, a, dtype=np.int64)
    for k in range(horizon):
        t_ord, m_ord, c1 = population_pair_batch(state - 1, joint, rng, node_cap=node_cap)
        t_sp, m_sp, c2 = spine.sample(nrep, rng, node_cap=node_cap)
        t[k] = t_ord + t_sp
        m[k] = m_ord + m_sp
        capped |= c1 | c2
        state = m[k]
    return t, m, capped


def simulate_conditioned_chain(
    a: int,
    joint: JointLaw,
    horizon: int,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
) -> TypeChain:
    """Single conditioned trajectory; the mutant count never hits zero."""
    t, m, capped = conditioned_chain_batch(a, joint, horizon, 1, rng, node_cap=node_cap)
    if capped[0]:
        raise PopulationCapExceeded(partial=(t[:, 0], m[:, 0]))
    return TypeChain(pairs=[(int(t[k, 0]), int(m[k, 0])) for k in range(horizon)], ancestors=a)


def build_allele_tree_with_immigration(
    joint: JointLaw,
    depth: int,
    rng: np.random.Generator,
    node_cap: int = DEFAULT_NODE_CAP,
) -> AlleleTree:
    """Tree of alleles of the conditioned population, built by replacement.

    Level by level: every subfamily slot draws an ordinary founder family,
    except one uniformly chosen slot which draws the size-biased family that
    keeps the conditioned line alive; children are then ranked by size with
    uniform tie-break.  Level sums reproduce the conditioned chain exactly.
    """
    if mutant_mean(joint) > 1.0 + 1e-12:
        raise InvalidRegime("mutant chain must be critical or subcritical")
    spine = _SpineSampler(joint)
    tree = AlleleTree()
    t_sp, m_sp, capped = spine.sample(1, rng, node_cap=node_cap)
    if capped[0]:
        raise PopulationCapExceeded()
    tree.nodes[()] = (int(t_sp[0]), int(m_sp[0]))
    frontier = [((), int(t_sp[0]), int(m_sp[0]))]
    for _ in range(depth):
        slots = sum(d for _, _, d in frontier)
        if slots == 0:
            break
        chosen = int(rng.integers(slots))  # which slot carries the surviving line
        t_ord, m_ord, c_ord = population_pair_batch(
            np.ones(slots, dtype=np.int64), joint, rng, node_cap=node_cap
        )
        t_spn, m_spn, c_spn = spine.sample(1, rng, node_cap=node_cap)
        if bool(c_ord.any()) or c_spn[0]:
            raise PopulationCapExceeded()
        t_ord[chosen], m_ord[chosen] = t_spn[0], m_spn[0]
        nxt = []
        pos = 0
        for label, _, d in frontier:
            sizes = t_ord[pos : pos + d]
            degs = m_ord[pos : pos + d]
            order = _rank_families(list(sizes), rng)
            for j, idx in enumerate(order, start=1):
                lab = (*label, j)
                tree.nodes[lab] = (int(sizes[idx]), int(degs[idx]))
                nxt.append((lab, int(sizes[idx]), int(degs[idx])))
            pos += d
        frontier = nxt
    return tree
