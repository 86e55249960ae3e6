import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2mspace import core, functionals as F, metrics as P
from m2mspace.core import AtomicMeasure, FiniteMetricSpace, M2MSpace, TwoLevelMeasure
from m2mspace.errors import OptimizerBudgetExceeded, SupportTooLarge

seeds = st.integers(min_value=0, max_value=2**32 - 1)
TOL = 1e-9


def am(*pairs):
    return AtomicMeasure.from_pairs(pairs)


def tl(*atoms):
    return TwoLevelMeasure.from_atoms(atoms)


def pair_space(r):
    return FiniteMetricSpace([[0, r], [r, 0]])


def random_instance(seed, n=6, k=5):
    rng = np.random.default_rng(seed)
    S = FiniteMetricSpace(core.random_metric(n, rng))
    return S, rng


def random_float_measure(rng, n, k):
    pts = rng.choice(n, size=int(rng.integers(1, k + 1)), replace=False)
    return AtomicMeasure.from_pairs(zip(pts.tolist(), rng.uniform(0.05, 1.5, pts.size).tolist()))


# -- one-level Prokhorov -------------------------------------------------------------

def test_feasible_examples():
    S = pair_space(0.3)
    x, y = am((0, 1.0)), am((1, 1.0))
    assert P.prokhorov_feasible(x, x, S, 1e-6)
    assert not P.prokhorov_feasible(x, AtomicMeasure.null(), S, 0.9)
    assert P.prokhorov_feasible(x, AtomicMeasure.null(), S, 1.01)
    assert P.prokhorov_feasible(x, y, S, 0.31)
    assert not P.prokhorov_feasible(x, y, S, 0.29)


def test_prokhorov_self_is_zero():
    S, rng = random_instance(1)
    mu = random_float_measure(rng, 6, 5)
    assert P.prokhorov(mu, mu, S) == 0


@pytest.mark.parametrize("r", [0.1, 0.3, 0.99, 1.0, 2.5])
def test_prokhorov_unit_diracs(r):
    S = pair_space(r)
    assert P.prokhorov(am((0, 1.0)), am((1, 1.0)), S) == pytest.approx(min(r, 1.0), abs=2 * TOL)
    assert P.prokhorov_exact(am((0, 1.0)), am((1, 1.0)), S) == pytest.approx(min(r, 1.0), abs=1e-15)


def test_support_too_large():
    n = 24
    x = np.arange(n, dtype=float)
    S = FiniteMetricSpace(np.abs(x[:, None] - x[None, :]))
    mu = AtomicMeasure.from_pairs((i, 1.0) for i in range(23))
    eta = AtomicMeasure.from_pairs((i, 1.0) for i in range(1, 24))
    with pytest.raises(SupportTooLarge):
        P.prokhorov(mu, eta, S)
    # one small side is enough
    assert P.prokhorov(mu, am((0, 1.0)), S) <= 22 + TOL


@settings(max_examples=150, deadline=None)
@given(seed=seeds)
def test_mass_bounds(seed):
    S, rng = random_instance(seed)
    mu, eta = random_float_measure(rng, 6, 5), random_float_measure(rng, 6, 5)
    d = P.prokhorov(mu, eta, S)
    assert abs(mu.mass - eta.mass) <= d + TOL
    assert d <= max(mu.mass, eta.mass) + TOL


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_feasibility_monotone_in_eps(seed):
    S, rng = random_instance(seed)
    mu, eta = random_float_measure(rng, 6, 5), random_float_measure(rng, 6, 5)
    flags = [P.prokhorov_feasible(mu, eta, S, e) for e in np.linspace(0.01, 3.0, 40)]
    first = flags.index(True) if True in flags else len(flags)
    assert all(flags[first:])


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_bisection_matches_exact_scan(seed):
    S, rng = random_instance(seed)
    mu, eta = random_float_measure(rng, 6, 5), random_float_measure(rng, 6, 5)
    assert P.prokhorov(mu, eta, S) == pytest.approx(P.prokhorov_exact(mu, eta, S), abs=2 * TOL)


@settings(max_examples=80, deadline=None)
@given(seed=seeds)
def test_lipschitz_contraction(seed):
    S, rng = random_instance(seed)
    mu, eta = random_float_measure(rng, 6, 5), random_float_measure(rng, 6, 5)
    x0 = int(rng.integers(6))
    f = S.distance[x0]

    def image(m):
        return F.RealDistribution.from_pairs((f[i], w) for i, w in zip(m.support, m.weights))

    assert P.prokhorov_real(image(mu), image(eta)) <= P.prokhorov(mu, eta, S) + 2 * TOL


@settings(max_examples=60, deadline=None)
@given(seed=seeds, eps=st.floats(0.05, 2.0))
def test_pushforward_perturbation_bound(seed, eps):
    S, rng = random_instance(seed)
    mu = random_float_measure(rng, 6, 5)
    g, h = rng.integers(0, 6, size=6), rng.integers(0, 6, size=6)
    close = S.distance[g, h] < eps
    delta = sum(w for i, w in zip(mu.support, mu.weights) if not close[i])
    d = P.prokhorov(core.pushforward(g, mu), core.pushforward(h, mu), S)
    assert d <= max(eps, delta) + TOL


def test_prokhorov_real_examples():
    a = F.RealDistribution.from_pairs([(1.0, 1.0)])
    b = F.RealDistribution.from_pairs([(2.0, 1.0)])
    assert P.prokhorov_real(a, b) == pytest.approx(1.0, abs=2 * TOL)
    c = F.RealDistribution.from_pairs([(1.0, 0.5)])
    assert P.prokhorov_real(a, c) == pytest.approx(0.5, abs=2 * TOL)


# -- two-level Prokhorov ---------------------------------------------------------------

def test_two_level_self_is_zero():
    X = core.random_m2m(6, 4, 4, rng_seed=5)
    assert P.two_level_prokhorov(X.nu, X.nu, X.space) == 0


@pytest.mark.parametrize("r", [0.2, 0.7, 1.0, 3.0])
def test_two_level_nested_diracs(r):
    S = pair_space(r)
    d = P.two_level_prokhorov(tl((1.0, am((0, 1.0)))), tl((1.0, am((1, 1.0)))), S)
    assert d == pytest.approx(min(r, 1.0), abs=2 * TOL)


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_two_level_symmetric_and_metric(seed):
    X = core.random_m2m(5, 3, 3, rng_seed=seed)
    Y = core.random_m2m(5, 3, 3, rng_seed=seed + 1)
    Z = core.random_m2m(5, 3, 3, rng_seed=seed + 2)
    S = X.space
    d = lambda a, b: P.two_level_prokhorov(a.nu, b.nu, S)
    assert d(X, Y) == pytest.approx(d(Y, X), abs=TOL)
    assert d(X, Z) <= d(X, Y) + d(Y, Z) + 3 * TOL
    assert abs(X.nu.mass - Y.nu.mass) <= d(X, Y) + TOL


@settings(max_examples=40, deadline=None)
@given(seed=seeds, K=st.sampled_from([0.5, 1.0, 2.0, 4.0]))
def test_fK_distance_bounded_by_removed_mass(seed, K):
    X = core.random_m2m(5, 4, 3, rng_seed=seed)
    cut = F.apply_fK(X.nu, K)
    removed = X.nu.mass - cut.mass
    assert P.two_level_prokhorov(cut, X.nu, X.space) <= removed + TOL


# -- cross blocks and d2GP -------------------------------------------------------------

def test_constant_block_valid_and_zero_block_invalid():
    X = FiniteMetricSpace([[0, 1], [1, 0]])
    Y = FiniteMetricSpace([[0, 2], [2, 0]])
    ok, _ = P.validate_cross_block(np.full((2, 2), 1.0), X, Y)
    assert ok
    ok, witness = P.validate_cross_block(np.zeros((2, 2)), X, Y)
    assert not ok and witness is not None


def test_correspondence_block_is_valid():
    X = core.random_m2m(5, 1, 1, rng_seed=3).space
    Y = core.random_m2m(4, 1, 1, rng_seed=4).space
    C = P.correspondence_block(X.distance, Y.distance, [(0, 0), (1, 2), (4, 3)])
    assert P.validate_cross_block(C, X, Y)[0]


def test_d2gp_point_masses():
    pt = FiniteMetricSpace(np.zeros((1, 1)))
    X = M2MSpace(pt, tl((1.0, am((0, 1.0)))))
    Y = M2MSpace(pt, tl((1.0, am((0, 2.0)))))
    b = P.d2gp_bounds(X, Y)
    one_dim = P.prokhorov_real(F.mass_distribution(X.nu), F.mass_distribution(Y.nu))
    assert b.lower == pytest.approx(one_dim, abs=2 * TOL)
    assert b.lower <= b.upper
    assert b.upper == pytest.approx(1.0, abs=2 * TOL)


@settings(max_examples=15, deadline=None)
@given(seed=seeds)
def test_d2gp_bounds_valid_and_symmetric(seed):
    X = core.random_m2m(4, 2, 3, rng_seed=seed)
    Y = core.random_m2m(3, 2, 2, rng_seed=seed + 7)
    a = P.d2gp_bounds(X, Y, multistarts=2, seed=seed)
    b = P.d2gp_bounds(Y, X, multistarts=2, seed=seed)
    assert 0 <= a.lower <= a.upper
    assert a.upper == pytest.approx(b.upper, abs=TOL)
    assert a.witness.shape == (4, 3)
    assert P.validate_cross_block(a.witness, X.space, Y.space)[0]
    # the witness reproduces the reported upper bound
    assert P.block_objective(X, Y, a.witness) <= a.upper + TOL
    # upper bound never beats the two-level distance in a shared space
    if len(X.space) == len(Y.space) and X.space == Y.space:
        assert a.lower <= P.two_level_prokhorov(X.nu, Y.nu, X.space) + TOL


def test_d2gp_shared_space_upper_below_two_level():
    X = core.random_m2m(4, 2, 3, rng_seed=8)
    Y = M2MSpace(X.space, core.random_m2m(4, 2, 3, rng_seed=9).nu)
    b = P.d2gp_bounds(X, Y, seed=1)
    # the identity embedding is one candidate among all extensions
    assert b.upper <= P.two_level_prokhorov(X.nu, Y.nu, X.space) + TOL


def test_d2gp_budget_reports_bound():
    X = core.random_m2m(5, 3, 3, rng_seed=2)
    Y = core.random_m2m(5, 3, 3, rng_seed=3)
    with pytest.raises(OptimizerBudgetExceeded) as e:
        P.d2gp_bounds(X, Y, max_evals=3)
    assert e.value.bound is not None and e.value.bound.lower <= e.value.bound.upper
