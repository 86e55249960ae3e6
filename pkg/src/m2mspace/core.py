"""Finite metric two-level measure spaces.

A finite m2m space is a finite metric space ``(X, r)`` together with a
finite, purely atomic measure ``nu`` on finite atomic measures on ``X``.
Every integral reduces to a finite sum, so all quantities here are exact
up to floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching, shortest_path

from .errors import (
    Asymmetric,
    NegativeEntry,
    NonZeroDiagonal,
    TriangleViolation,
    UnmappedPoint,
    ValidationError,
)

METRIC_TOL = 1e-12
DEFAULT_TOL = 1e-9


class FiniteMetricSpace:
    """A finite point set with a dense distance matrix.

    Use :func:`validate_space` to build one from untrusted input. Subclasses
    may compute distances lazily; everything in this package only reads
    distances through :meth:`pair_distances` and :meth:`submatrix`.
    """

    def __init__(self, distance, labels=None):
        d = np.array(distance, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            if d.size == 0:
                d = np.zeros((0, 0))
            else:
                raise ValidationError(f"distance matrix must be square, got shape {d.shape}")
        d.setflags(write=False)
        self._distance = d
        n = d.shape[0]
        self.labels = tuple(range(n)) if labels is None else tuple(labels)
        if len(self.labels) != n:
            raise ValidationError(f"{len(self.labels)} labels for {n} points")

    @property
    def distance(self) -> np.ndarray:
        return self._distance

    def __len__(self):
        return len(self.labels)

    def pair_distances(self, a, b) -> np.ndarray:
        """Vectorized ``r(a[k], b[k])``; broadcasting follows numpy rules."""
        return self.distance[np.asarray(a), np.asarray(b)]

    def pair_distribution(self, ia, wa, ib, wb):
        """Atoms ``(values, weights)`` of ``r_*(mu_a x mu_b)``, possibly repeated."""
        D = self.pair_distances(np.asarray(ia)[:, None], np.asarray(ib)[None, :])
        return D.ravel(), np.outer(wa, wb).ravel()

    def submatrix(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int)
        return self.pair_distances(idx[:, None], idx[None, :])

    def diameter(self, idx=None) -> float:
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(list(idx), dtype=int)
        if idx.size == 0:
            return 0.0
        return float(self.submatrix(idx).max())

    def subspace(self, idx) -> FiniteMetricSpace:
        idx = [int(i) for i in idx]
        return FiniteMetricSpace(self.submatrix(idx) if idx else np.zeros((0, 0)),
                                 [self.labels[i] for i in idx])

    def __eq__(self, other):
        if not isinstance(other, FiniteMetricSpace):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.distance, other.distance)

    def __hash__(self):
        return hash((self.labels, self.distance.tobytes()))

    def __repr__(self):
        return f"FiniteMetricSpace(n={len(self)})"


def validate_space(matrix, labels=None, tol: float = METRIC_TOL) -> FiniteMetricSpace:
    """Check the metric axioms and wrap ``matrix`` as a space.

    Violations raise the matching :class:`ValidationError` subclass; a
    triangle violation carries the witness triple ``(i, j, k)`` with
    ``d[i, k] > d[i, j] + d[j, k]``.
    """
    d = np.asarray(matrix, dtype=float)
    if d.size == 0:
        return FiniteMetricSpace(np.zeros((0, 0)), labels or ())
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError(f"distance matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValidationError("distance matrix has non-finite entries")
    n = d.shape[0]
    bad = np.flatnonzero(np.abs(np.diag(d)) > tol)
    if bad.size:
        i = int(bad[0])
        raise NonZeroDiagonal(f"distance({i},{i}) = {float(d[i, i])!r} is not zero")
    neg = np.argwhere(d < -tol)
    if neg.size:
        i, j = map(int, neg[0])
        raise NegativeEntry(f"distance({i},{j}) = {float(d[i, j])!r} is negative")
    asym = np.argwhere(np.abs(d - d.T) > tol)
    if asym.size:
        i, j = map(int, asym[0])
        raise Asymmetric(f"distance({i},{j}) = {float(d[i, j])!r} but distance({j},{i}) = {float(d[j, i])!r}")
    # d[i, k] <= d[i, j] + d[j, k], one intermediate point j at a time
    for j in range(n):
        excess = d - (d[:, j][:, None] + d[j, :][None, :])
        hit = np.argwhere(excess > tol)
        if hit.size:
            i, k = map(int, hit[0])
            raise TriangleViolation(
                f"distance({i},{k}) = {float(d[i, k])!r} > distance({i},{j}) + distance({j},{k})"
                f" = {float(d[i, j] + d[j, k])!r}",
                witness=(i, j, k),
            )
    return FiniteMetricSpace(d, labels)


def _check_weight(w, where) -> float:
    w = float(w)
    if not np.isfinite(w):
        raise ValidationError(f"non-finite weight {w!r} at {where}")
    if w < 0:
        raise NegativeEntry(f"weight {w!r} at {where} is negative")
    return w


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite measure ``sum_x w_x delta_x`` over point indices.

    Stored canonically: ``support`` strictly increasing, all ``weights > 0``.
    The empty measure is the null measure ``o``.
    """

    support: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if len(self.support) != len(self.weights):
            raise ValidationError("support and weights differ in length")

    @classmethod
    def from_pairs(cls, pairs) -> AtomicMeasure:
        """Build from ``{index: weight}`` or an iterable of ``(index, weight)``."""
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        acc: dict[int, float] = {}
        for idx, w in pairs:
            i = int(idx)
            if i < 0:
                raise ValidationError(f"negative point index {idx!r}")
            acc[i] = acc.get(i, 0.0) + _check_weight(w, f"point {i}")
        items = sorted((i, w) for i, w in acc.items() if w > 0)
        return cls(tuple(i for i, _ in items), tuple(w for _, w in items))

    @classmethod
    def null(cls) -> AtomicMeasure:
        return cls()

    @classmethod
    def dirac(cls, i: int, w: float = 1.0) -> AtomicMeasure:
        return cls.from_pairs([(i, w)])

    @property
    def is_null(self) -> bool:
        return not self.support

    @property
    def mass(self) -> float:
        return float(sum(self.weights))

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.weights))

    def weight(self, i: int) -> float:
        try:
            return self.weights[self.support.index(i)]
        except ValueError:
            return 0.0

    def scaled(self, c: float) -> AtomicMeasure:
        return AtomicMeasure.from_pairs((i, c * w) for i, w in zip(self.support, self.weights))

    def sort_key(self):
        return (self.mass, tuple(zip(self.support, self.weights)))

    def __len__(self):
        return len(self.support)

    def __repr__(self):
        if self.is_null:
            return "AtomicMeasure(o)"
        return "AtomicMeasure(" + ", ".join(f"{i}:{w:g}" for i, w in zip(self.support, self.weights)) + ")"


@dataclass(frozen=True)
class TwoLevelMeasure:
    """Finite atomic measure ``sum_k a_k delta_{mu_k}`` on atomic measures.

    Canonical form: equal inner measures merged by summing their outer
    weights, atoms sorted by ``(mass, weight map)``, all ``a_k > 0``.
    """

    atoms: tuple = ()

    @classmethod
    def from_atoms(cls, atoms) -> TwoLevelMeasure:
        acc: dict[AtomicMeasure, float] = {}
        for a, mu in atoms:
            a = _check_weight(a, "outer weight")
            if not isinstance(mu, AtomicMeasure):
                mu = AtomicMeasure.from_pairs(mu)
            acc[mu] = acc.get(mu, 0.0) + a
        items = sorted(((a, mu) for mu, a in acc.items() if a > 0), key=lambda t: t[1].sort_key())
        return cls(tuple(items))

    @classmethod
    def null(cls) -> TwoLevelMeasure:
        return cls()

    @property
    def mass(self) -> float:
        return float(sum(a for a, _ in self.atoms))

    @property
    def outer_weights(self) -> np.ndarray:
        return np.array([a for a, _ in self.atoms], dtype=float)

    @property
    def inner(self) -> list:
        return [mu for _, mu in self.atoms]

    def scaled(self, c: float) -> TwoLevelMeasure:
        return TwoLevelMeasure.from_atoms((c * a, mu) for a, mu in self.atoms)

    def max_index(self) -> int:
        return max((max(mu.support) for _, mu in self.atoms if mu.support), default=-1)

    def __len__(self):
        return len(self.atoms)


@dataclass(frozen=True)
class M2MSpace:
    """A finite metric space paired with a two-level measure over it."""

    space: FiniteMetricSpace
    nu: TwoLevelMeasure = field(default_factory=TwoLevelMeasure)

    def __post_init__(self):
        if self.nu.max_index() >= len(self.space):
            raise ValidationError(
                f"inner measure charges point {self.nu.max_index()} "
                f"but the space has {len(self.space)} points"
            )


def mass(m) -> float:
    """Total mass; the outer mass for a two-level measure."""
    return m.mass


def normalize(m):
    """``m / mass(m)``, with the null measure mapped to itself."""
    total = m.mass
    if total <= 0:
        return m
    return m.scaled(1.0 / total)


def moment_measure(nu: TwoLevelMeasure) -> AtomicMeasure:
    """First moment (intensity) measure ``sum_k a_k mu_k``."""
    acc: dict[int, float] = {}
    for a, mu in nu.atoms:
        for i, w in zip(mu.support, mu.weights):
            acc[i] = acc.get(i, 0.0) + a * w
    return AtomicMeasure.from_pairs(acc)


def effective_support(nu: TwoLevelMeasure) -> frozenset:
    return frozenset(moment_measure(nu).support)


def restrict_to_support(X: M2MSpace) -> M2MSpace:
    """Equivalent space living on the support of the moment measure only."""
    supp = sorted(effective_support(X.nu))
    if supp == list(range(len(X.space))):
        return X
    relabel = {old: new for new, old in enumerate(supp)}
    return M2MSpace(X.space.subspace(supp), two_level_pushforward(relabel, X.nu))


def pushforward(f, mu: AtomicMeasure) -> AtomicMeasure:
    """Image measure ``mu o f^{-1}``.

    ``f`` maps point index to point index: a mapping, a sequence or a callable.
    """
    get = f if callable(f) else f.__getitem__
    out: dict[int, float] = {}
    for i, w in zip(mu.support, mu.weights):
        try:
            j = int(get(i))
        except (KeyError, IndexError):
            raise UnmappedPoint(f"point {i} is not in the domain of the map") from None
        out[j] = out.get(j, 0.0) + w
    return AtomicMeasure.from_pairs(out)


def two_level_pushforward(f, nu: TwoLevelMeasure) -> TwoLevelMeasure:
    return TwoLevelMeasure.from_atoms((a, pushforward(f, mu)) for a, mu in nu.atoms)


# -- equivalence -----------------------------------------------------------

def _atoms_match(nu_atoms, lam_atoms, tol) -> bool:
    """Multiset equality of weighted inner measures, entrywise within ``tol``."""
    if len(nu_atoms) != len(lam_atoms):
        return False
    n = len(nu_atoms)
    if n == 0:
        return True
    rows, cols = [], []
    for p, (a, mu) in enumerate(nu_atoms):
        for q, (b, eta) in enumerate(lam_atoms):
            if abs(a - b) > tol or mu.support != eta.support:
                continue
            if all(abs(u - v) <= tol for u, v in zip(mu.weights, eta.weights)):
                rows.append(p)
                cols.append(q)
    if not rows:
        return False
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return bool(np.all(match >= 0))


def are_equivalent(X: M2MSpace, Y: M2MSpace, tol: float = DEFAULT_TOL):
    """Search for a measure-preserving isometry between effective supports.

    Returns ``(True, witness)`` where ``witness`` maps point indices of ``X``
    to point indices of ``Y`` (original indexing), or ``(False, None)``.
    """
    supp_x = sorted(effective_support(X.nu))
    supp_y = sorted(effective_support(Y.nu))
    if abs(X.nu.mass - Y.nu.mass) > tol or len(supp_x) != len(supp_y):
        return False, None
    if len(X.nu) != len(Y.nu):
        return False, None
    rx, ry = restrict_to_support(X), restrict_to_support(Y)
    n = len(supp_x)
    if n == 0:
        return True, {}

    mx, my = moment_measure(rx.nu), moment_measure(ry.nu)
    mm_x = np.array([mx.weight(i) for i in range(n)])
    mm_y = np.array([my.weight(i) for i in range(n)])
    if np.any(np.abs(np.sort(mm_x) - np.sort(mm_y)) > tol):
        return False, None
    dx, dy = rx.space.distance, ry.space.distance
    prof_x = np.sort(dx, axis=1)
    prof_y = np.sort(dy, axis=1)

    # heaviest points first; ties broken by distance profile
    order_x = sorted(range(n), key=lambda i: (-mm_x[i], tuple(prof_x[i])))
    order_y = sorted(range(n), key=lambda j: (-mm_y[j], tuple(prof_y[j])))
    candidates = {
        i: [j for j in order_y
            if abs(mm_x[i] - mm_y[j]) <= tol and np.all(np.abs(prof_x[i] - prof_y[j]) <= tol)]
        for i in order_x
    }
    if any(not c for c in candidates.values()):
        return False, None

    assign = [-1] * n
    used = [False] * n

    def consistent(i, j, depth):
        for prev in order_x[:depth]:
            if abs(dx[i, prev] - dy[j, assign[prev]]) > tol:
                return False
        return True

    def search(depth):
        if depth == n:
            mapped = two_level_pushforward(assign, rx.nu)
            return _atoms_match(mapped.atoms, ry.nu.atoms, tol)
        i = order_x[depth]
        for j in candidates[i]:
            if used[j] or not consistent(i, j, depth):
                continue
            assign[i], used[j] = j, True
            if search(depth + 1):
                return True
            assign[i], used[j] = -1, False
        return False

    if not search(0):
        return False, None
    return True, {supp_x[i]: supp_y[assign[i]] for i in range(n)}


# -- random instances ------------------------------------------------------

def random_metric(n: int, rng: np.random.Generator, max_edge: int = 8) -> np.ndarray:
    """Shortest-path closure of random positive edge weights (quarter units)."""
    if n == 1:
        return np.zeros((1, 1))
    w = rng.integers(1, max_edge + 1, size=(n, n)) / 4.0
    w = np.triu(w, 1)
    w = w + w.T
    d = shortest_path(w, method="FW", directed=False)
    np.fill_diagonal(d, 0.0)
    return d


def random_measure(support_size: int, n_points: int, rng, scale: float = 1.0) -> AtomicMeasure:
    k = int(rng.integers(1, min(support_size, n_points) + 1))
    pts = rng.choice(n_points, size=k, replace=False)
    ws = rng.integers(1, 9, size=k) / 4.0 * scale
    return AtomicMeasure.from_pairs(zip(pts.tolist(), ws.tolist()))


def random_m2m(n_points: int, max_atoms: int, max_inner: int, mass_scale: float = 1.0,
               rng_seed=0, null_atom_prob: float = 0.0) -> M2MSpace:
    """Random element of the dense class of finite atomic m2m spaces.

    Metric entries and weights are small multiples of 1/4 (times
    ``mass_scale`` for weights), so sums are exact in binary floating point.
    """
    if min(n_points, max_atoms, max_inner) < 1:
        raise ValueError("n_points, max_atoms and max_inner must be >= 1")
    rng = np.random.default_rng(rng_seed)
    space = FiniteMetricSpace(random_metric(n_points, rng), [f"p{i}" for i in range(n_points)])
    k = int(rng.integers(1, max_atoms + 1))
    atoms = []
    for _ in range(k):
        a = float(rng.integers(1, 9)) / 4.0 * mass_scale
        if null_atom_prob > 0 and rng.random() < null_atom_prob:
            atoms.append((a, AtomicMeasure.null()))
        else:
            atoms.append((a, random_measure(max_inner, n_points, rng, mass_scale)))
    return M2MSpace(space, TwoLevelMeasure.from_atoms(atoms))


def relabel(X: M2MSpace, perm: Sequence[int]) -> M2MSpace:
    """Copy of ``X`` with point ``i`` moved to index ``perm[i]``."""
    perm = np.asarray(perm, dtype=int)
    n = len(X.space)
    inv = np.empty(n, dtype=int)
    inv[perm] = np.arange(n)
    d = X.space.distance[np.ix_(inv, inv)]
    labels = [X.space.labels[i] for i in inv]
    return M2MSpace(FiniteMetricSpace(d, labels), two_level_pushforward(perm, X.nu))


def check_metric(space: FiniteMetricSpace, tol: float = METRIC_TOL) -> None:
    """Re-run the metric checks on an existing space (raises on failure)."""
    validate_space(space.distance, space.labels, tol)
