"""Prokhorov distances and two-level Gromov-Prokhorov bounds.

Both Prokhorov conditions only look at which pairs ``(x, y)`` with
``x`` in one support and ``y`` in the other are closer than ``eps``, so
everything here works on a *cross-distance matrix* between the two
supports. Subsets are enumerated on the smaller support only: for the
larger side the worst sets are ``{x : N(x) <= T}`` where ``N(x)`` is the
ball-neighbourhood of ``x`` in the smaller support, and their masses for
every ``T`` come from one subset-sum (zeta) transform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import AtomicMeasure, FiniteMetricSpace, M2MSpace, TwoLevelMeasure
from .errors import OptimizerBudgetExceeded, SupportTooLarge, ValidationError

MAX_ENUM_SUPPORT = 22


# -- one-level Prokhorov ---------------------------------------------------

def _subset_sums(g: np.ndarray, k: int) -> np.ndarray:
    """Zeta transform over the subset lattice: ``F[T] = sum_{S <= T} g[S]``."""
    f = g.astype(float).copy()
    for b in range(k):
        v = f.reshape(-1, 2, 1 << b)
        v[:, 1, :] += v[:, 0, :]
    return f


class _CrossProblem:
    """Prokhorov feasibility between weights ``a`` (rows) and ``b`` (cols)."""

    def __init__(self, wa, wb, cross):
        wa = np.asarray(wa, dtype=float)
        wb = np.asarray(wb, dtype=float)
        cross = np.asarray(cross, dtype=float).reshape(len(wa), len(wb))
        # enumerate subsets of the smaller side; the conditions are symmetric
        if len(wa) > len(wb):
            wa, wb, cross = wb, wa, cross.T
        if len(wa) > MAX_ENUM_SUPPORT:
            raise SupportTooLarge(
                f"both supports exceed {MAX_ENUM_SUPPORT} points ({len(wa)}, {len(wb)})"
            )
        self.k = len(wa)
        self.small = wa
        self.large = wb
        self.cross = cross
        self.mass_small = float(wa.sum())
        self.mass_large = float(wb.sum())
        bits = np.int64(1) << np.arange(self.k, dtype=np.int64)
        self._bits = bits
        self._small_sums = _subset_sums(
            np.bincount(bits, weights=wa, minlength=1 << self.k) if self.k else np.zeros(1), self.k
        )

    def required_eps(self, neighbour: np.ndarray) -> float:
        """Smallest ``eps`` the conditions demand for a fixed ball structure.

        ``neighbour[i, j]`` says whether small point ``i`` and large point
        ``j`` lie in each other's ``eps``-ball.
        """
        k = self.k
        full = (1 << k) - 1
        masks = (neighbour * self._bits[:, None]).sum(axis=0) if k else np.zeros(len(self.large), dtype=np.int64)
        g = np.bincount(masks, weights=self.large, minlength=1 << k)
        inside = _subset_sums(g, k)  # large({x : N(x) <= T})
        subsets = np.arange(1 << k)
        # small(A) <= large(B(A, eps)) + eps, with large(B(A)) = total - inside[~A]
        c1 = self._small_sums - (self.mass_large - inside[full ^ subsets])
        # large({x : N(x) <= T}) <= small(T) + eps
        c2 = inside - self._small_sums
        return max(0.0, float(c1.max()), float(c2.max()))

    def feasible(self, eps: float) -> bool:
        return self.required_eps(self.cross < eps) <= eps

    def breakpoints(self):
        return np.unique(self.cross[self.cross > 0])

    def exact(self) -> float:
        """Exact infimum by scanning the finitely many ball structures."""
        edges = np.concatenate([[0.0], self.breakpoints(), [np.inf]])
        for j in range(len(edges) - 1):
            c = self.required_eps(self.cross <= edges[j])
            if c <= edges[j + 1]:
                return max(edges[j], c)
        return max(self.mass_small, self.mass_large)  # pragma: no cover

    def is_zero(self) -> bool:
        """True when the infimum is exactly 0 (identical up to zero distances).

        Subset sums are accumulated in different orders on the two sides, so
        a few ulps of the total mass are read as zero.
        """
        slack = 16 * np.finfo(float).eps * (self.mass_small + self.mass_large)
        return self.required_eps(self.cross <= 0) <= slack

    def bracket(self, tol: float):
        lo, hi = 0.0, max(self.mass_small, self.mass_large) + tol
        if self.is_zero():
            return 0.0, 0.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.feasible(mid):
                hi = mid
            else:
                lo = mid
        return lo, hi


def _cross(mu: AtomicMeasure, eta: AtomicMeasure, space) -> np.ndarray:
    a = np.asarray(mu.support, dtype=int)
    b = np.asarray(eta.support, dtype=int)
    if isinstance(space, FiniteMetricSpace):
        return space.pair_distances(a[:, None], b[None, :]).reshape(len(a), len(b))
    d = np.asarray(space, dtype=float)
    return d[np.ix_(a, b)]


def _problem(mu, eta, space) -> _CrossProblem:
    return _CrossProblem(mu.weights, eta.weights, _cross(mu, eta, space))


def prokhorov_feasible(mu: AtomicMeasure, eta: AtomicMeasure, space, eps: float) -> bool:
    """Whether ``eps`` satisfies both Prokhorov enlargement inequalities (open balls)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return _problem(mu, eta, space).feasible(eps)


def prokhorov_bracket(mu, eta, space, tol: float = core.DEFAULT_TOL):
    """``(lo, hi)`` with ``lo <= d_P(mu, eta) <= hi`` and ``hi - lo <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    return _problem(mu, eta, space).bracket(tol)


def prokhorov(mu: AtomicMeasure, eta: AtomicMeasure, space, tol: float = core.DEFAULT_TOL) -> float:
    """Prokhorov distance by bisection on ``eps``; returns the feasible end."""
    return prokhorov_bracket(mu, eta, space, tol)[1]


def prokhorov_exact(mu: AtomicMeasure, eta: AtomicMeasure, space) -> float:
    """Prokhorov distance by a breakpoint scan; exact up to float rounding."""
    return _problem(mu, eta, space).exact()


def _real_problem(a, b) -> _CrossProblem:
    va, wa = _dist_arrays(a)
    vb, wb = _dist_arrays(b)
    return _CrossProblem(wa, wb, np.abs(va[:, None] - vb[None, :]))


def _dist_arrays(dist):
    atoms = dist.atoms if hasattr(dist, "atoms") else dict(dist)
    vals = np.array(sorted(atoms), dtype=float)
    return vals, np.array([atoms[v] for v in sorted(atoms)], dtype=float)


def prokhorov_real(a, b, tol: float = core.DEFAULT_TOL) -> float:
    """Prokhorov distance between two finite measures on the real line.

    ``a`` and ``b`` are ``{value: weight}`` maps or objects with an
    ``atoms`` map (e.g. :class:`~m2mspace.functionals.RealDistribution`).
    """
    return _real_problem(a, b).bracket(tol)[1]


# -- two-level Prokhorov ---------------------------------------------------

def _inner_cross(nu: TwoLevelMeasure, lam: TwoLevelMeasure, space) -> np.ndarray:
    out = np.empty((len(nu), len(lam)))
    for p, (_, mu) in enumerate(nu.atoms):
        for q, (_, eta) in enumerate(lam.atoms):
            out[p, q] = 0.0 if mu == eta else _problem(mu, eta, space).exact()
    return out


def two_level_bracket(nu: TwoLevelMeasure, lam: TwoLevelMeasure, space, tol: float = core.DEFAULT_TOL):
    if tol <= 0:
        raise ValueError("tol must be positive")
    cross = _inner_cross(nu, lam, space)
    # atoms closer than tol/10 are identified
    cross[cross <= tol / 10] = 0.0
    return _CrossProblem(nu.outer_weights, lam.outer_weights, cross).bracket(tol)


def two_level_prokhorov(nu: TwoLevelMeasure, lam: TwoLevelMeasure, space,
                        tol: float = core.DEFAULT_TOL) -> float:
    """Prokhorov distance on measures over the atom space with the inner Prokhorov metric."""
    return two_level_bracket(nu, lam, space, tol)[1]


# -- cross blocks and d2GP bounds -------------------------------------------

@dataclass
class DistanceBound:
    lower: float
    upper: float
    witness: np.ndarray | None = None
    starts_used: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if not 0 <= self.lower <= self.upper:
            raise ValueError(f"invalid interval [{self.lower}, {self.upper}]")


def validate_cross_block(C, X: FiniteMetricSpace, Y: FiniteMetricSpace, tol: float = 1e-9):
    """Check that ``C`` extends ``r`` and ``d`` to a pseudometric on ``X ⊔ Y``.

    Returns ``(True, None)`` or ``(False, witness)`` where the witness is a
    tuple ``(kind, i, j, k, excess)`` naming the first violated inequality.
    """
    C = np.asarray(C, dtype=float)
    r, d = X.distance, Y.distance
    if C.shape != (len(r), len(d)):
        raise ValidationError(f"cross block shape {C.shape} != {(len(r), len(d))}")
    if C.size and C.min() < -tol:
        i, j = np.unravel_index(np.argmin(C), C.shape)
        return False, ("negative", int(i), int(j), None, float(-C[i, j]))
    checks = [
        # |C(x,y) - C(x',y)| <= r(x,x')
        ("x-lipschitz", np.abs(C[:, None, :] - C[None, :, :]) - r[:, :, None]),
        # r(x,x') <= C(x,y) + C(x',y)
        ("x-triangle", r[:, :, None] - (C[:, None, :] + C[None, :, :])),
        # |C(x,y) - C(x,y')| <= d(y,y')
        ("y-lipschitz", (np.abs(C[:, :, None] - C[:, None, :]) - d[None, :, :]).transpose(1, 2, 0)),
        # d(y,y') <= C(x,y) + C(x,y')
        ("y-triangle", (d[None, :, :] - (C[:, :, None] + C[:, None, :])).transpose(1, 2, 0)),
    ]
    for kind, excess in checks:
        if excess.size and excess.max() > tol:
            idx = np.unravel_index(np.argmax(excess), excess.shape)
            return False, (kind, *map(int, idx), float(excess[idx]))
    return True, None


def _union_space(X: FiniteMetricSpace, Y: FiniteMetricSpace, C) -> np.ndarray:
    n = len(X)
    m = len(Y)
    D = np.zeros((n + m, n + m))
    D[:n, :n] = X.distance
    D[n:, n:] = Y.distance
    D[:n, n:] = C
    D[n:, :n] = np.asarray(C).T
    return D


def _shift(nu: TwoLevelMeasure, offset: int) -> TwoLevelMeasure:
    return TwoLevelMeasure(tuple(
        (a, AtomicMeasure(tuple(i + offset for i in mu.support), mu.weights)) for a, mu in nu.atoms
    ))


def block_objective(X: M2MSpace, Y: M2MSpace, C, tol: float = core.DEFAULT_TOL) -> float:
    """Two-level Prokhorov distance of the embedded measures on ``X ⊔ Y`` under ``C``."""
    D = _union_space(X.space, Y.space, C)
    return two_level_prokhorov(X.nu, _shift(Y.nu, len(X.space)), D, tol)


def correspondence_block(r: np.ndarray, d: np.ndarray, pairs) -> np.ndarray:
    """Cross block ``C(x,y) = min_(a,b) r(x,a) + dis/2 + d(b,y)`` from a relation.

    ``dis`` is the distortion of the relation; the result is always a valid
    pseudometric extension for any nonempty set of pairs.
    """
    a = np.array([p for p, _ in pairs], dtype=int)
    b = np.array([q for _, q in pairs], dtype=int)
    dis = float(np.abs(r[np.ix_(a, a)] - d[np.ix_(b, b)]).max())
    C = (r[:, a][:, :, None] + d[b, :][None, :, :]).min(axis=1)
    return C + dis / 2


def _feasible_interval(C, r, d, i, j, cap):
    col = np.delete(C[:, j], i)
    rx = np.delete(r[i], i)
    row = np.delete(C[i, :], j)
    dy = np.delete(d[j], j)
    lo = max(0.0,
             float(np.abs(col - rx).max()) if col.size else 0.0,
             float(np.abs(row - dy).max()) if row.size else 0.0)
    hi = min(cap,
             float((col + rx).min()) if col.size else cap,
             float((row + dy).min()) if row.size else cap)
    return lo, hi


class _Optimizer:
    def __init__(self, X: M2MSpace, Y: M2MSpace, grid_points: int, tol: float, max_evals: int):
        self.X, self.Y = X, Y
        self.r, self.d = X.space.distance, Y.space.distance
        self.grid_points = grid_points
        self.tol = tol
        self.max_evals = max_evals
        self.evals = 0
        self.cap = max(X.space.diameter(), Y.space.diameter()) + 1.0
        self.best = np.inf
        self.best_block = None

    def value(self, C) -> float:
        if self.evals >= self.max_evals:
            raise _Budget()
        self.evals += 1
        v = block_objective(self.X, self.Y, C, self.tol)
        if v < self.best:
            self.best, self.best_block = v, C.copy()
        return v

    def descend(self, C) -> float:
        """Coordinate descent, each entry moved inside its feasibility interval."""
        C = C.copy()
        current = self.value(C)
        improved = True
        while improved and current > 0:
            improved = False
            for i in range(C.shape[0]):
                for j in range(C.shape[1]):
                    lo, hi = _feasible_interval(C, self.r, self.d, i, j, self.cap)
                    if hi < lo:
                        continue
                    probes = np.linspace(lo, hi, self.grid_points)
                    inside = C[(C >= lo) & (C <= hi)]
                    dists = np.concatenate([self.r[i], self.d[j]])
                    probes = np.unique(np.concatenate([probes, inside, dists[(dists >= lo) & (dists <= hi)]]))
                    old = C[i, j]
                    for p in probes:
                        if p == old:
                            continue
                        C[i, j] = p
                        v = self.value(C)
                        if v < current - 1e-12:
                            current, old, improved = v, p, True
                    C[i, j] = old
        return current


class _Budget(Exception):
    pass


def _starts(X: M2MSpace, Y: M2MSpace, tol, multistarts: int, seed):
    r, d = X.space.distance, Y.space.distance
    n, m = len(r), len(d)
    blocks = [np.full((n, m), max(X.space.diameter(), Y.space.diameter()) / 2 + tol)]
    if n == 0 or m == 0:
        return blocks
    eq, witness = core.are_equivalent(X, Y, tol)
    if eq and witness:
        blocks.append(correspondence_block(r, d, sorted(witness.items())))
    # greedy alignment: points ranked by moment weight
    wx = np.array([core.moment_measure(X.nu).weight(i) for i in range(n)])
    wy = np.array([core.moment_measure(Y.nu).weight(j) for j in range(m)])
    ox, oy = np.argsort(-wx, kind="stable"), np.argsort(-wy, kind="stable")
    k = max(n, m)
    blocks.append(correspondence_block(r, d, [(int(ox[t * n // k]), int(oy[t * m // k])) for t in range(k)]))
    # greedy alignment of atoms: heaviest atoms paired, points by weight rank within
    pairs = set()
    ax = sorted(X.nu.atoms, key=lambda t: -t[0])
    ay = sorted(Y.nu.atoms, key=lambda t: -t[0])
    for (_, mu), (_, eta) in zip(ax, ay):
        if mu.is_null or eta.is_null:
            continue
        px = [mu.support[t] for t in np.argsort(-np.array(mu.weights), kind="stable")]
        py = [eta.support[t] for t in np.argsort(-np.array(eta.weights), kind="stable")]
        kk = max(len(px), len(py))
        pairs.update((px[t * len(px) // kk], py[t * len(py) // kk]) for t in range(kk))
    if pairs:
        blocks.append(correspondence_block(r, d, sorted(pairs)))
    for s in range(multistarts):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, s])
        size = int(rng.integers(1, k + 1))
        rel = list(zip(rng.integers(0, n, size).tolist(), rng.integers(0, m, size).tolist()))
        blocks.append(correspondence_block(r, d, rel))
    return blocks


def _extend_block(C_s, X: FiniteMetricSpace, Y: FiniteMetricSpace, sx, sy) -> np.ndarray:
    """Extend a block on supports to the full spaces by min-plus composition."""
    r, d = X.distance, Y.distance
    if not sx or not sy:
        return np.full((len(r), len(d)), max(X.diameter(), Y.diameter()) / 2)
    rs = r[:, sx]
    step = (rs[:, :, None] + C_s[None, :, :]).min(axis=1)  # |X| x |supp Y|
    ds = d[sy, :]
    return (step[:, :, None] + ds[None, :, :]).min(axis=1)


def _one_way(X, Y, multistarts, grid_points, tol, seed, max_evals):
    opt = _Optimizer(X, Y, grid_points, tol, max_evals)
    starts = _starts(X, Y, tol, multistarts, seed)
    used = 0
    try:
        for C in starts:
            used += 1
            if opt.value(C) == 0:
                break
        # refine the most promising starts
        for C in starts[:]:
            if opt.best == 0:
                break
            opt.descend(C)
        exhausted = False
    except _Budget:
        exhausted = True
    return opt.best, opt.best_block, used, exhausted


def d2gp_bounds(X: M2MSpace, Y: M2MSpace, multistarts: int = 4, grid_points: int = 5,
                tol: float = core.DEFAULT_TOL, seed=0, max_evals: int = 20000) -> DistanceBound:
    """Certified interval for the two-level Gromov-Prokhorov distance.

    The upper end is attained by an explicit cross block (returned as
    ``witness``, on the full spaces); the lower end comes from the mass
    distributions, which the mass map carries over 1-Lipschitz.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    rx, ry = core.restrict_to_support(X), core.restrict_to_support(Y)
    sx, sy = sorted(core.effective_support(X.nu)), sorted(core.effective_support(Y.nu))

    forward = _one_way(rx, ry, multistarts, grid_points, tol, seed, max_evals)
    backward = _one_way(ry, rx, multistarts, grid_points, tol, seed, max_evals)
    if backward[0] < forward[0]:
        best, block = backward[0], backward[1].T
    else:
        best, block = forward[0], forward[1]
    starts_used = forward[2] + backward[2]

    from .functionals import mass_distribution
    lo_md = _real_problem(mass_distribution(X.nu), mass_distribution(Y.nu)).bracket(tol)[0]
    lower = max(abs(X.nu.mass - Y.nu.mass), lo_md)
    lower = min(lower, best)
    bound = DistanceBound(lower, best, _extend_block(block, X.space, Y.space, sx, sy),
                          starts_used, time.perf_counter() - t0)
    if forward[3] or backward[3]:
        raise OptimizerBudgetExceeded(f"optimizer stopped after {max_evals} evaluations", bound)
    return bound
