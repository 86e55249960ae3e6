"""Test functionals, distance/mass distributions and compactness diagnostics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import families
from .core import (
    AtomicMeasure,
    FiniteMetricSpace,
    M2MSpace,
    TwoLevelMeasure,
    effective_support,
    moment_measure,
)
from .errors import BudgetExceeded, IndexOutOfRange, InvalidSpec, PreconditionViolated

EXACT_BUDGET = 10**7
_CHUNK = 1 << 17


@dataclass(frozen=True)
class RealDistribution:
    """Finite atomic measure on the reals, ``{value: weight}``."""

    atoms: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs) -> RealDistribution:
        acc: dict[float, float] = {}
        for v, w in pairs:
            if w < 0:
                raise ValueError(f"negative weight {w} at {v}")
            if w > 0:
                acc[float(v)] = acc.get(float(v), 0.0) + float(w)
        return cls(dict(sorted(acc.items())))

    @property
    def total(self) -> float:
        return float(sum(self.atoms.values()))

    def mean(self) -> float:
        t = self.total
        return sum(v * w for v, w in self.atoms.items()) / t if t > 0 else 0.0

    def max(self) -> float:
        return max(self.atoms, default=0.0)

    def rows(self):
        return list(self.atoms.items())

    def __len__(self):
        return len(self.atoms)


class Estimate(NamedTuple):
    value: float
    stderr: float


# -- test functional specs -------------------------------------------------

KINDS = ("TF1", "TF2", "TF3", "TF4")


@dataclass(frozen=True)
class TestFunctionalSpec:
    """One test functional: its kind, dimensions and chi/psi/phi slots.

    Slots hold family instances (see :mod:`m2mspace.families`) or, for
    in-process use, arbitrary vectorized callables.
    """

    __test__ = False  # not a pytest class

    kind: str
    m: int = 1
    n: tuple = ()
    chi: object = None
    psi: object = None
    phi: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown kind {self.kind!r}")
        if int(self.m) < 1:
            raise InvalidSpec("m must be a positive integer")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "n", tuple(int(k) for k in self.n))
        for slot in ("chi", "psi", "phi"):
            object.__setattr__(self, slot, families.build(slot, getattr(self, slot)))
        needs = {"TF1": ("chi",), "TF2": ("chi", "psi"), "TF3": ("chi", "psi", "phi"), "TF4": ("psi", "phi")}
        for slot in needs[self.kind]:
            if getattr(self, slot) is None:
                raise InvalidSpec(f"{self.kind} needs a {slot} function")
        if self.kind in ("TF3", "TF4"):
            if len(self.n) != self.m or any(k < 1 for k in self.n):
                raise InvalidSpec(f"n must list {self.m} positive integers, got {self.n}")
            if isinstance(self.phi, families.Family):
                self.phi.check_arity(self.m, sum(self.n))
        if self.chi is not None and not isinstance(self.chi, families.Family):
            if float(self.chi(0.0)) != 0.0:
                raise InvalidSpec("chi(0) must be 0")
        if self.psi is not None and not isinstance(self.psi, families.Family):
            a = np.ones((self.m, self.m)) - np.eye(self.m)
            if np.any(np.asarray(self.psi(a)) != 0):
                raise InvalidSpec("psi must vanish when a coordinate is 0")

    @property
    def size(self) -> int:
        return sum(self.n)

    @classmethod
    def from_dict(cls, d: dict) -> TestFunctionalSpec:
        if not isinstance(d, dict) or "kind" not in d:
            raise InvalidSpec("spec must be a JSON object with a 'kind'")
        try:
            return cls(kind=d["kind"], m=d.get("m", 1), n=tuple(d.get("n", ())),
                       chi=d.get("chi"), psi=d.get("psi"), phi=d.get("phi"))
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidSpec):
                raise
            raise InvalidSpec(str(e)) from None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "m": self.m}
        if self.n:
            out["n"] = list(self.n)
        for slot in ("chi", "psi", "phi"):
            f = getattr(self, slot)
            if f is None:
                continue
            if not isinstance(f, families.Family):
                raise InvalidSpec(f"{slot} is a plain callable and cannot be serialized")
            out[slot] = f.to_dict()
        return out


def distance_matrix(space: FiniteMetricSpace, pts) -> np.ndarray:
    """``R[i, j] = r(pts[i], pts[j])``."""
    pts = np.asarray(pts, dtype=int)
    if pts.size and (pts.min() < 0 or pts.max() >= len(space)):
        raise IndexOutOfRange(f"point indices must lie in [0, {len(space)})")
    return space.submatrix(pts)


def enumeration_size(spec: TestFunctionalSpec, nu: TwoLevelMeasure) -> int:
    """Number of tuples the exact evaluation visits."""
    if spec.kind == "TF1":
        return 1
    counts = [len(mu) for mu in nu.inner]
    if spec.kind == "TF2":
        return len(counts) ** spec.m
    return math.prod(sum(c ** k for c in counts) for k in spec.n)


def _outer(spec, nu):
    weights = nu.outer_weights
    if spec.kind != "TF4":
        weights = weights / nu.mass
    masses = np.array([mu.mass for mu in nu.inner])
    return weights, masses


def _single_entry_integral(spec, space, atoms) -> float:
    """Same integral when ``phi`` reads one entry: only that pair's law matters."""
    i, j = spec.phi.entry
    size = spec.size
    if i == j:
        return float(spec.phi(np.zeros((1, size, size)))[0])
    slot = np.repeat(np.arange(spec.m), spec.n)
    a, b = atoms[slot[i]], atoms[slot[j]]
    vals, w = space.pair_distribution(np.asarray(a.support), np.asarray(a.weights) / a.mass,
                                      np.asarray(b.support), np.asarray(b.weights) / b.mass)
    R = np.zeros((len(vals), size, size))
    R[:, i, j] = R[:, j, i] = vals
    return float(np.dot(w, spec.phi(R)))


def _inner_integral(spec, space, atoms) -> float:
    """``int phi(R) d(normalized mu_1^{n_1} x ... x mu_m^{n_m})`` by enumeration."""
    if isinstance(spec.phi, families.PhiClipEntry):
        return _single_entry_integral(spec, space, atoms)
    supp, prob = [], []
    for mu, k in zip(atoms, spec.n):
        s = np.asarray(mu.support, dtype=int)
        p = np.asarray(mu.weights, dtype=float) / mu.mass
        supp += [s] * k
        prob += [p] * k
    shape = tuple(len(s) for s in supp)
    total = math.prod(shape)
    acc = 0.0
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total))
        idx = np.unravel_index(flat, shape)
        pts = np.stack([s[i] for s, i in zip(supp, idx)], axis=1)
        w = np.prod(np.stack([p[i] for p, i in zip(prob, idx)], axis=1), axis=1)
        R = space.pair_distances(pts[:, :, None], pts[:, None, :])
        acc += float(np.dot(w, spec.phi(R)))
    return acc


def eval_tf(spec: TestFunctionalSpec, X: M2MSpace, budget: int = EXACT_BUDGET) -> float:
    """Exact value: every integral replaced by a finite weighted sum."""
    nu = X.nu
    total_mass = nu.mass
    if total_mass == 0:
        return 0.0
    chi = float(spec.chi(total_mass)) if spec.kind != "TF4" else 1.0
    if spec.kind == "TF1":
        return chi
    size = enumeration_size(spec, nu)
    if size > budget:
        raise BudgetExceeded(f"exact evaluation needs {size} tuples, budget is {budget}")
    weights, masses = _outer(spec, nu)
    M = len(weights)
    tuples = np.indices((M,) * spec.m).reshape(spec.m, -1).T
    tw = np.prod(weights[tuples], axis=1)
    psi = np.asarray(spec.psi(masses[tuples]), dtype=float)
    if spec.kind == "TF2":
        return chi * float(np.dot(tw, psi))
    inner = nu.inner
    acc = 0.0
    for t, w, ps in zip(tuples, tw, psi):
        if ps == 0 or any(inner[k].is_null for k in t):
            continue
        acc += w * ps * _inner_integral(spec, X.space, [inner[k] for k in t])
    return chi * acc


def monte_carlo_tf(spec: TestFunctionalSpec, X: M2MSpace, samples: int, seed=0) -> Estimate:
    """Unbiased sampling estimate with its standard error.

    For TF4 the sampled integrand carries the factor ``mass(nu) ** m``, so the
    standard error grows with that power as well.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    nu = X.nu
    total_mass = nu.mass
    if total_mass == 0:
        return Estimate(0.0, 0.0)
    chi = float(spec.chi(total_mass)) if spec.kind != "TF4" else total_mass ** spec.m
    if spec.kind == "TF1":
        return Estimate(chi, 0.0)
    rng = np.random.default_rng(seed)
    probs = nu.outer_weights / total_mass
    masses = np.array([mu.mass for mu in nu.inner])
    draws = rng.choice(len(probs), size=(samples, spec.m), p=probs)
    vals = np.asarray(spec.psi(masses[draws]), dtype=float)
    if spec.kind in ("TF3", "TF4"):
        cols = np.repeat(np.arange(spec.m), spec.n)
        atom_of = draws[:, cols]  # atom index feeding each matrix coordinate
        pts = np.zeros(atom_of.shape, dtype=int)
        for k, mu in enumerate(nu.inner):
            where = atom_of == k
            cnt = int(where.sum())
            if cnt == 0 or mu.is_null:
                continue
            pts[where] = rng.choice(np.asarray(mu.support), size=cnt, p=np.asarray(mu.weights) / mu.mass)
        live = vals != 0
        phi = np.zeros(samples)
        if live.any():
            p = pts[live]
            phi[live] = spec.phi(X.space.pair_distances(p[:, :, None], p[:, None, :]))
        vals = vals * phi
    vals = chi * vals
    return Estimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples)))


def default_spec_library() -> list[TestFunctionalSpec]:
    """A fixed menu of functionals covering all four kinds."""
    clip10 = {"family": "clip", "C": 10}
    S = TestFunctionalSpec
    return [
        S("TF1", chi=clip10),
        S("TF1", chi={"family": "tanh", "C": 2}),
        S("TF2", m=1, chi=clip10, psi={"family": "clip_product", "C": 10}),
        S("TF2", m=2, chi={"family": "power_clip", "C": 50, "p": 2}, psi={"family": "tanh_product", "C": 1}),
        S("TF3", m=1, n=(2,), chi=clip10, psi={"family": "clip_product", "C": 10},
          phi={"family": "clip_min_entry", "C": 10}),
        S("TF3", m=1, n=(3,), chi=clip10, psi={"family": "clip_product", "C": 10},
          phi={"family": "exp", "lambda": 0.5}),
        S("TF3", m=2, n=(1, 1), chi=clip10, psi={"family": "clip_product", "C": 10},
          phi={"family": "clip_min_entry", "C": 10}),
        S("TF3", m=2, n=(2, 1), chi={"family": "tanh", "C": 3}, psi={"family": "tanh_product", "C": 2},
          phi={"family": "clip_poly", "C": 20, "terms": [[1.0, 0, 1, 2], [-0.5, 1, 2, 1]]}),
        S("TF3", m=1, n=(2,), chi=clip10, psi={"family": "clip_product", "C": 1},
          phi={"family": "clip_poly", "C": 5, "terms": [[1.0, 0, 1, 2]]}),
        S("TF4", m=1, n=(2,), psi={"family": "clip_product", "C": 10},
          phi={"family": "clip_min_entry", "C": 10}),
        S("TF4", m=2, n=(1, 2), psi={"family": "tanh_product", "C": 1},
          phi={"family": "exp", "lambda": 0.25}),
        S("TF4", m=1, n=(1,), psi={"family": "clip_product", "C": 10},
          phi={"family": "constant", "value": 1.0}),
    ]


# -- distributions -----------------------------------------------------------

def mass_distribution(nu: TwoLevelMeasure) -> RealDistribution:
    """Push-forward of ``nu`` under the mass map."""
    return RealDistribution.from_pairs((mu.mass, a) for a, mu in nu.atoms)


def distance_distribution(mu: AtomicMeasure, space: FiniteMetricSpace) -> RealDistribution:
    """``r_* (mu x mu)``, including the diagonal at 0."""
    s = np.asarray(mu.support, dtype=int)
    w = np.asarray(mu.weights, dtype=float)
    if s.size == 0:
        return RealDistribution()
    D = space.submatrix(s)
    W = np.outer(w, w)
    vals, inv = np.unique(D.ravel(), return_inverse=True)
    sums = np.bincount(inv.ravel(), weights=W.ravel())
    return RealDistribution.from_pairs(zip(vals.tolist(), sums.tolist()))


def _ball_structure(mu: AtomicMeasure, space):
    s = np.asarray(mu.support, dtype=int)
    D = space.submatrix(s) if s.size else np.zeros((0, 0))
    return D, np.asarray(mu.weights, dtype=float)


def thin_mass(mu: AtomicMeasure, space, eps: float, delta: float) -> float:
    """``mu({x : mu(B(x, eps)) <= delta})`` with open balls."""
    D, w = _ball_structure(mu, space)
    balls = (D < eps) @ w
    return float(w[balls <= delta].sum())


def modulus_mass_distribution(mu: AtomicMeasure, space, delta: float) -> float:
    """Exact modulus of mass distribution ``V_delta(mu)``.

    The thin-point mass is constant on each interval between consecutive
    pairwise distances, so the infimum is found by scanning those intervals.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    D, w = _ball_structure(mu, space)
    if w.size == 0:
        return 0.0
    edges = np.concatenate([[0.0], np.unique(D[D > 0]), [np.inf]])
    for j in range(len(edges) - 1):
        balls = (D <= edges[j]) @ w  # ball mass for eps in (edges[j], edges[j+1]]
        g = float(w[balls <= delta].sum())
        if g <= edges[j + 1]:
            return max(float(edges[j]), g)
    return float(w.sum())  # pragma: no cover


def covering_set(mu: AtomicMeasure, space, eps: float, delta: float) -> list:
    """A set ``A`` with ``|A| <= max(1, mass/delta)`` and ``mu(B(A, eps)^c) < eps``.

    Requires ``V_delta(mu) < eps``. Greedy maximal eps-separated subset of the
    thick points, heaviest balls first; if that overshoots the size bound,
    subsets of the thick points are searched exhaustively. Returns point
    indices, or raises ``ValueError`` when no such set exists.
    """
    if not modulus_mass_distribution(mu, space, delta) < eps:
        raise ValueError("covering set requires V_delta(mu) < eps")
    D, w = _ball_structure(mu, space)
    s = list(mu.support)
    total = float(w.sum())
    bound = max(1.0, total / delta)
    if total <= eps:
        return s[:1]
    balls = (D < eps) @ w
    thick = [i for i in np.argsort(-balls, kind="stable") if balls[i] > delta]

    def uncovered(A):
        if not A:
            return total
        near = (D[A] < eps).any(axis=0)
        return float(w[~near].sum())

    chosen: list[int] = []
    for i in thick:
        if all(D[i, j] >= eps for j in chosen):
            chosen.append(int(i))
    if len(chosen) <= bound and uncovered(chosen) < eps:
        return [s[i] for i in chosen]
    for size in range(1, int(math.floor(bound)) + 1):
        for A in itertools.combinations(thick, size):
            if uncovered(list(A)) < eps:
                return [s[i] for i in A]
    raise ValueError("no covering set within the size bound")


def g_cutoff(x, K: float):
    """Piecewise-linear cutoff: 1 on [0, K/2], 2 - 2x/K on (K/2, K], 0 beyond."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= K / 2, 1.0, np.where(x <= K, 2.0 - 2.0 * x / K, 0.0))


def apply_fK(nu: TwoLevelMeasure, K: float) -> TwoLevelMeasure:
    """Reweight each atom by ``g_K(mass(mu))``, dropping atoms that reach 0."""
    if K <= 0:
        raise ValueError("K must be positive")
    return TwoLevelMeasure.from_atoms((a * float(g_cutoff(mu.mass, K)), mu) for a, mu in nu.atoms)


# -- sampling and reconstruction ------------------------------------------

def sample_two_level(nu: TwoLevelMeasure, m: int, n: int, seed=0):
    """Draw ``m`` inner measures from ``nu`` and ``n`` points from each.

    Returns ``(masses, points)``: the drawn masses (length ``m``) and an
    ``m x n`` array of point indices sampled from the normalized measures.
    """
    if abs(nu.mass - 1.0) > 1e-9:
        raise PreconditionViolated(f"nu must be a probability measure, mass is {nu.mass}")
    if any(mu.is_null for mu in nu.inner):
        raise PreconditionViolated("nu charges the null measure")
    rng = np.random.default_rng(seed)
    which = rng.choice(len(nu), size=m, p=nu.outer_weights / nu.mass)
    masses = np.array([nu.inner[k].mass for k in which])
    points = np.empty((m, n), dtype=int)
    for k, mu in enumerate(nu.inner):
        rows = np.flatnonzero(which == k)
        if rows.size:
            p = np.asarray(mu.weights) / mu.mass
            points[rows] = rng.choice(np.asarray(mu.support), size=(rows.size, n), p=p)
    return masses, points


def reconstruct_two_level(masses, points, space=None) -> TwoLevelMeasure:
    """``(1/m) sum_i delta_{m_i * empirical(row i)}``."""
    masses = np.asarray(masses, dtype=float)
    points = np.asarray(points, dtype=int)
    if points.ndim != 2 or points.shape[0] != masses.shape[0]:
        raise ValueError("points must be an m x n array matching masses")
    m, n = points.shape
    if space is not None and points.size and points.max() >= len(space):
        raise IndexOutOfRange("sampled point outside the space")
    atoms = []
    for mi, row in zip(masses, points):
        idx, cnt = np.unique(row, return_counts=True)
        atoms.append((1.0 / m, AtomicMeasure.from_pairs(zip(idx.tolist(), (mi * cnt / n).tolist()))))
    return TwoLevelMeasure.from_atoms(atoms)


# -- compactness diagnostics -----------------------------------------------

@dataclass(frozen=True)
class ProfileRow:
    K: float
    delta: float
    modulus: float
    dd_total: float
    dd_mean: float
    dd_max: float
    md_total: float
    md_mean: float
    md_max: float


def compactness_profile(X: M2MSpace, K_grid, delta_grid) -> list[ProfileRow]:
    """``V_delta`` and DD of ``mm(f_K nu)`` plus mass-distribution summaries on a grid."""
    K_grid, delta_grid = list(K_grid), list(delta_grid)
    if not K_grid or not delta_grid:
        raise ValueError("grids must be nonempty")
    if min(K_grid) <= 0 or min(delta_grid) <= 0:
        raise ValueError("grid values must be positive")
    rows = []
    for K in K_grid:
        cut = apply_fK(X.nu, K)
        mm = moment_measure(cut)
        dd = distance_distribution(mm, X.space)
        md = mass_distribution(cut)
        for delta in delta_grid:
            rows.append(ProfileRow(float(K), float(delta), modulus_mass_distribution(mm, X.space, delta),
                                   dd.total, dd.mean(), dd.max(), md.total, md.mean(), md.max()))
    return rows


def is_in_A_N(X: M2MSpace, N: int) -> bool:
    """Membership in the compact set of spaces bounded by ``N`` in size, diameter and mass."""
    if N < 1:
        raise ValueError("N must be >= 1")
    supp = sorted(effective_support(X.nu))
    return (
        len(supp) <= N
        and X.space.diameter(supp) <= N
        and X.nu.mass <= N
        and all(mu.mass <= N for mu in X.nu.inner)
    )
