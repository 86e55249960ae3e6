"""Finite nested Kingman coalescent and the random m2m spaces it induces.

Individuals are pairs ``(i, j)`` (species ``i``, individual ``j``, both
1-based). Gene lineages may only merge while their species share a block
of the species coalescent. The simulation is a Gillespie loop on the
total rate ``gamma_s C(s,2) + gamma_g sum_b C(k_b,2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import integrate, stats

from .core import AtomicMeasure, FiniteMetricSpace, M2MSpace, TwoLevelMeasure
from .errors import DegenerateParams, UnknownLeaf, UnknownSpecies, ValidationError
from .functionals import TestFunctionalSpec, eval_tf


@dataclass(frozen=True)
class CoalescentParams:
    gamma_s: float
    gamma_g: float
    M: int
    N: int

    def __post_init__(self):
        if not (self.gamma_s > 0 and self.gamma_g > 0):
            raise ValidationError("rates must be positive")
        if self.M < 1 or self.N < 1:
            raise ValidationError("M and N must be >= 1")


def derived_rng(seed, i: int) -> np.random.Generator:
    """Independent stream for replicate ``i`` of a run seeded with ``seed``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(i)])


class GeneDendrogram:
    """Merge forest of a nested coalescent run.

    Leaves are numbered ``0 .. L-1`` in the order of :attr:`leaves`; the
    ``e``-th gene merge creates node ``L + e``. Species blocks are numbered
    the same way starting from the ``M`` initial species.
    """

    def __init__(self, leaves, merge_events, species_events, n_species: int):
        self.leaves = list(leaves)
        self.merge_events = list(merge_events)
        self.species_events = list(species_events)
        self.n_species = n_species
        self._index = {x: k for k, x in enumerate(self.leaves)}
        L = len(self.leaves)
        times = [t for t, _, _ in self.merge_events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("gene merge times are not strictly increasing")
        self.parent = np.full(L + len(self.merge_events), -1, dtype=np.int64)
        self.node_time = np.zeros(L + len(self.merge_events))
        for e, (t, a, b) in enumerate(self.merge_events):
            self.parent[a] = self.parent[b] = L + e
            self.node_time[L + e] = t

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf_index(self, x) -> int:
        try:
            return self._index[tuple(x)]
        except (KeyError, TypeError):
            raise UnknownLeaf(f"{x!r} is not a leaf of this dendrogram") from None

    def species_sizes(self) -> dict:
        sizes: dict[int, int] = {}
        for i, _ in self.leaves:
            sizes[i] = sizes.get(i, 0) + 1
        return sizes

    # parent-pointer walk (reference path, one pair at a time)
    def _lca_time(self, a: int, b: int) -> float:
        if a == b:
            return 0.0
        seen = set()
        v = a
        while v >= 0:
            seen.add(v)
            v = self.parent[v]
        v = b
        while v >= 0 and v not in seen:
            v = self.parent[v]
        if v < 0:
            return math.inf
        return float(self.node_time[v])

    def pairwise_distance(self, x, y) -> float:
        """Coalescence time of individuals ``x`` and ``y``."""
        return self._lca_time(self.leaf_index(x), self.leaf_index(y))

    # leaf order + range maximum (vectorized path)
    @cached_property
    def _order(self):
        L = self.n_leaves
        if not self.merge_events:
            return np.arange(L), np.zeros(max(L - 1, 0))
        root = L + len(self.merge_events) - 1
        children = {L + e: (a, b) for e, (_, a, b) in enumerate(self.merge_events)}
        order, gaps = [], []
        stack = [(root, False)]
        # in-order: left subtree, gap at this node's time, right subtree
        while stack:
            v, expanded = stack.pop()
            if v < L:
                order.append(v)
                continue
            if expanded:
                gaps.append(self.node_time[v])
                continue
            a, b = children[v]
            stack.append((b, False))
            stack.append((v, True))
            stack.append((a, False))
        # gaps were recorded between the subtrees; pair them with leaf order
        pos = np.empty(L, dtype=np.int64)
        pos[np.asarray(order)] = np.arange(L)
        return pos, np.asarray(gaps, dtype=float)

    @cached_property
    def _sparse_table(self):
        _, gaps = self._order
        table = [gaps]
        span = 1
        while 2 * span <= len(gaps):
            prev = table[-1]
            table.append(np.maximum(prev[:-span], prev[span:]))
            span *= 2
        return table

    def leaf_distances(self, a, b) -> np.ndarray:
        """Vectorized distances between leaf indices (broadcasting)."""
        if len(self.merge_events) != max(self.n_leaves - 1, 0):
            raise ValidationError("distances need a fully coalesced dendrogram")
        pos, _ = self._order
        pa, pb = pos[np.asarray(a)], pos[np.asarray(b)]
        lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
        out = np.zeros(lo.shape)
        diff = hi != lo
        if not diff.any():
            return out
        lo, hi = lo[diff], hi[diff]
        # hi - lo gaps separate the two leaves; cover them with two power-of-two windows
        k = np.floor(np.log2(hi - lo)).astype(np.int64)
        vals = np.empty(lo.shape)
        table = self._sparse_table
        for level in np.unique(k):
            sel = k == level
            t = table[level]
            vals[sel] = np.maximum(t[lo[sel]], t[hi[sel] - (1 << level)])
        out[diff] = vals
        return out

    def distance_matrix(self) -> np.ndarray:
        idx = np.arange(self.n_leaves)
        return self.leaf_distances(idx[:, None], idx[None, :])


class UltrametricSpace(FiniteMetricSpace):
    """Leaves of a dendrogram with the coalescence-time metric, computed on demand."""

    def __init__(self, dendrogram: GeneDendrogram):
        self.dendrogram = dendrogram
        self.labels = tuple(dendrogram.leaves)
        self._dense = None

    @property
    def distance(self) -> np.ndarray:
        if self._dense is None:
            d = self.dendrogram.distance_matrix()
            d.setflags(write=False)
            self._dense = d
        return self._dense

    def pair_distances(self, a, b) -> np.ndarray:
        return self.dendrogram.leaf_distances(a, b)

    def pair_distribution(self, ia, wa, ib, wb):
        """Law of ``r(x, y)``, ``x ~ wa``, ``y ~ wb``, without the dense block.

        Along the leaf order the distance of two leaves is the largest gap
        between them, so each gap collects the weight of all pairs for which
        it is the maximum (nearest-greater ranges via a monotone stack).
        """
        d = self.dendrogram
        idx = np.union1d(ia, ib)
        w1 = np.zeros(idx.size)
        w2 = np.zeros(idx.size)
        w1[np.searchsorted(idx, ia)] = wa
        w2[np.searchsorted(idx, ib)] = wb
        pos, _ = d._order
        order = np.argsort(pos[idx])
        idx, w1, w2 = idx[order], w1[order], w2[order]
        diag = float(np.dot(w1, w2))
        if idx.size < 2:
            return np.array([0.0]), np.array([diag])
        gaps = d.leaf_distances(idx[:-1], idx[1:])
        n = gaps.size
        left = np.empty(n, dtype=np.int64)   # first leaf of the range where gap k is the max
        right = np.empty(n, dtype=np.int64)  # last leaf of that range
        g = gaps.tolist()
        stack = []
        for k in range(n):
            while stack and g[stack[-1]] < g[k]:
                stack.pop()
            left[k] = stack[-1] + 1 if stack else 0
            stack.append(k)
        stack = []
        for k in range(n - 1, -1, -1):
            while stack and g[stack[-1]] <= g[k]:
                stack.pop()
            right[k] = stack[-1] if stack else n
            stack.append(k)
        c1 = np.concatenate([[0.0], np.cumsum(w1)])
        c2 = np.concatenate([[0.0], np.cumsum(w2)])
        k = np.arange(n)
        l1, l2 = c1[k + 1] - c1[left], c2[k + 1] - c2[left]
        r1, r2 = c1[right + 1] - c1[k + 1], c2[right + 1] - c2[k + 1]
        weights = l1 * r2 + l2 * r1
        return np.concatenate([[0.0], gaps]), np.concatenate([[diag], weights])

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


def _simulate_sizes(sizes: Sequence[int], gamma_s: float, gamma_g: float, rng) -> GeneDendrogram:
    leaves = [(i + 1, j + 1) for i, n in enumerate(sizes) for j in range(n)]
    L = len(leaves)
    M = len(sizes)
    # species block id -> list of gene node ids
    blocks: dict[int, list] = {}
    start = 0
    for i, n in enumerate(sizes):
        blocks[i] = list(range(start, start + n))
        start += n
    species_ids = list(range(M))
    pairs_in = {b: len(g) * (len(g) - 1) // 2 for b, g in blocks.items()}
    gene_pairs = sum(pairs_in.values())
    n_genes = L
    t = 0.0
    merges, species_events = [], []
    next_node, next_species = L, M
    buf, pos = [], 0
    while n_genes > 1:
        if pos + 5 > len(buf):
            buf, pos = rng.random(320).tolist(), 0
        u_time, u_kind, u1, u2, u3 = buf[pos:pos + 5]
        pos += 5
        s = len(species_ids)
        rate_s = gamma_s * s * (s - 1) / 2
        rate_g = gamma_g * gene_pairs
        total = rate_s + rate_g
        dt = -math.log1p(-u_time) / total
        if dt <= 0.0 or t + dt == t:
            raise ValidationError("simultaneous events: waiting time vanished in floating point")
        t += dt
        if u_kind * total < rate_s:
            a = int(u1 * s)
            b = int(u2 * (s - 1))
            if b >= a:
                b += 1
            sa, sb = species_ids[a], species_ids[b]
            merged = blocks.pop(sa) + blocks.pop(sb)
            gene_pairs -= pairs_in.pop(sa) + pairs_in.pop(sb)
            new = next_species
            next_species += 1
            blocks[new] = merged
            pairs_in[new] = len(merged) * (len(merged) - 1) // 2
            gene_pairs += pairs_in[new]
            species_ids.pop(max(a, b))
            species_ids.pop(min(a, b))
            species_ids.append(new)
            species_events.append((t, sa, sb))
        else:
            target = u1 * gene_pairs
            acc = 0
            for sp in species_ids:
                acc += pairs_in[sp]
                if target < acc:
                    break
            genes = blocks[sp]
            k = len(genes)
            a = int(u2 * k)
            b = int(u3 * (k - 1))
            if b >= a:
                b += 1
            ga, gb = genes[a], genes[b]
            # drop b by moving the tail into its slot, then overwrite a
            last = genes.pop()
            if b < k - 1:
                genes[b] = last
            genes[b if a == k - 1 else a] = next_node
            merges.append((t, ga, gb))
            next_node += 1
            pairs_in[sp] -= k - 1
            gene_pairs -= k - 1
            n_genes -= 1
    return GeneDendrogram(leaves, merges, species_events, M)


def simulate(params: CoalescentParams, seed=0) -> GeneDendrogram:
    """One run of the finite nested Kingman coalescent until full coalescence."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _simulate_sizes([params.N] * params.M, params.gamma_s, params.gamma_g, rng)


def replay_nested(d: GeneDendrogram) -> bool:
    """Replay the event log and check that every gene merge stays inside one species block."""
    species_of = {}
    for k, (i, _) in enumerate(d.leaves):
        species_of[k] = i - 1
    sp_parent = list(range(d.n_species))

    def find(s):
        while sp_parent[s] != s:
            s = sp_parent[s]
        return s

    events = sorted([(t, "g", a, b) for t, a, b in d.merge_events]
                    + [(t, "s", a, b) for t, a, b in d.species_events])
    L = d.n_leaves
    next_node, next_sp = L, d.n_species
    for t, kind, a, b in events:
        if kind == "s":
            sp_parent.append(next_sp)
            sp_parent[a] = sp_parent[b] = next_sp
            next_sp += 1
        else:
            if find(species_of[a]) != find(species_of[b]):
                return False
            species_of[next_node] = species_of[a]
            next_node += 1
    return True


def build_m2m(d: GeneDendrogram, params: CoalescentParams | None = None) -> M2MSpace:
    """``(leaves, r_g, nu_{M,N})`` with uniform species, then uniform individual."""
    sizes = d.species_sizes()
    if params is not None and (len(sizes) != params.M or set(sizes.values()) != {params.N}):
        raise ValidationError("dendrogram leaves do not match {1..M} x {1..N}")
    space = UltrametricSpace(d)
    M = len(sizes)
    atoms = []
    for i, n in sorted(sizes.items()):
        idx = sorted(d.leaf_index((i, j)) for j in range(1, n + 1))
        # distinct indices with equal weights are already canonical
        atoms.append((1.0 / M, AtomicMeasure(tuple(idx), (1.0 / n,) * n)))
    return M2MSpace(space, TwoLevelMeasure.from_atoms(atoms))


def _mean_stderr(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two replicates")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def estimate_Q(spec: TestFunctionalSpec, params: CoalescentParams, replicates: int, seed=0):
    """Mean and standard error of ``Phi(Z, r, nu_{M,N})`` over coalescent runs."""
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    vals = [eval_tf(spec, build_m2m(simulate(params, derived_rng(seed, i)), params))
            for i in range(replicates)]
    return _mean_stderr(vals)


def estimate_limit_statistic(spec: TestFunctionalSpec, gamma_s: float, gamma_g: float,
                             replicates: int, seed=0):
    """Monte-Carlo value of the functional under the ``M, N -> infinity`` limit.

    In the limit every sampled species and individual is distinct, so each
    replicate simulates only ``m`` species with ``n_i`` individuals.
    """
    if spec.kind not in ("TF3", "TF4"):
        raise ValueError("limit statistic needs a TF3 or TF4 spec")
    if spec.m * max(spec.n) > 12:
        raise ValueError("spec too large for the limit statistic (m * max n > 12)")
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    scale = float(spec.psi(np.ones(spec.m)))
    if spec.kind == "TF3":
        scale *= float(spec.chi(1.0))
    idx = np.arange(spec.size)
    vals = np.empty(replicates)
    for r in range(replicates):
        d = _simulate_sizes(spec.n, gamma_s, gamma_g, derived_rng(seed, r))
        R = d.leaf_distances(idx[:, None], idx[None, :])
        vals[r] = spec.phi(R[None])[0]
    return _mean_stderr(scale * vals)


def relative_frequency(d: GeneDendrogram, i: int, l: int, t: float) -> float:
    """``(1/N) #{n <= N : r_g((i,1), (l,n)) <= t}``."""
    sizes = d.species_sizes()
    for s in (i, l):
        if s not in sizes:
            raise UnknownSpecies(f"species {s} is not in this dendrogram")
    N = sizes[l]
    x = d.leaf_index((i, 1))
    ys = np.array([d.leaf_index((l, n)) for n in range(1, N + 1)])
    dist = d.leaf_distances(np.full(N, x), ys)
    return float(np.count_nonzero(dist <= t)) / N


def block_counts(d: GeneDendrogram, t_grid) -> list[tuple]:
    """``(t, gene_blocks, species_blocks)`` alive at each time in ``t_grid``."""
    gt = np.array([t for t, _, _ in d.merge_events])
    st = np.sort(np.array([t for t, _, _ in d.species_events]))
    out = []
    for t in t_grid:
        g = d.n_leaves - int(np.searchsorted(gt, t, side="right"))
        s = d.n_species - int(np.searchsorted(st, t, side="right"))
        out.append((float(t), g, s))
    return out


# -- distance law -------------------------------------------------------------

def hypoexp_cdf(t, gamma_s: float, gamma_g: float, branch: str = "auto"):
    """CDF of ``Exp(gamma_g) * Exp(gamma_s)``.

    ``branch`` is ``"hypo"`` (distinct rates), ``"erlang"`` (equal rates) or
    ``"auto"``, which picks Erlang when the rates agree to 1e-12.
    """
    t = np.maximum(np.asarray(t, dtype=float), 0.0)
    close = abs(gamma_s - gamma_g) < 1e-12
    if branch == "auto":
        branch = "erlang" if close else "hypo"
    if branch == "erlang":
        g = 0.5 * (gamma_s + gamma_g)
        return 1.0 - np.exp(-g * t) * (1.0 + g * t)
    if branch != "hypo":
        raise ValueError(f"unknown branch {branch!r}")
    if close:
        raise DegenerateParams("rates coincide; use the Erlang branch")
    return 1.0 - (gamma_s * np.exp(-gamma_g * t) - gamma_g * np.exp(-gamma_s * t)) / (gamma_s - gamma_g)


def convolution_cdf(t: float, gamma_s: float, gamma_g: float) -> float:
    """Quadrature of ``P(S + G <= t)`` with ``S ~ Exp(gamma_s)``, ``G ~ Exp(gamma_g)``."""
    if t <= 0:
        return 0.0
    f = lambda s: gamma_s * math.exp(-gamma_s * s) * (1.0 - math.exp(-gamma_g * (t - s)))
    val, _ = integrate.quad(f, 0.0, t, epsabs=1e-13, epsrel=1e-12)
    return val


@dataclass
class DistanceLawResult:
    ks_same: float
    ks_cross: float
    same: np.ndarray = field(repr=False)
    cross: np.ndarray = field(repr=False)


def sample_pair_distances(params: CoalescentParams, pairs: int, seed=0):
    """Replicate distances of ``(1,1)-(1,2)`` and ``(1,1)-(2,1)``."""
    if params.M < 2 or params.N < 2:
        raise ValidationError("need M >= 2 and N >= 2 for both pair types")
    same = np.empty(pairs)
    cross = np.empty(pairs)
    for r in range(pairs):
        d = simulate(params, derived_rng(seed, r))
        same[r] = d.pairwise_distance((1, 1), (1, 2))
        cross[r] = d.pairwise_distance((1, 1), (2, 1))
    return same, cross


def distance_law_check(params: CoalescentParams, pairs: int, seed=0, branch: str = "auto") -> DistanceLawResult:
    """KS statistics of simulated distances against Exp(gamma_g) and the hypoexponential law."""
    if pairs < 100:
        raise ValueError("pairs must be >= 100")
    if branch == "hypo" and abs(params.gamma_s - params.gamma_g) < 1e-12:
        raise DegenerateParams("rates coincide; use the Erlang branch")
    same, cross = sample_pair_distances(params, pairs, seed)
    ks_same = stats.kstest(same, stats.expon(scale=1.0 / params.gamma_g).cdf).statistic
    ks_cross = stats.kstest(cross, lambda t: hypoexp_cdf(t, params.gamma_s, params.gamma_g, branch)).statistic
    return DistanceLawResult(float(ks_same), float(ks_cross), same, cross)
