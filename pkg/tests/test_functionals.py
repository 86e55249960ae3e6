import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2mspace import core, functionals as F, metrics
from m2mspace.core import AtomicMeasure, FiniteMetricSpace, M2MSpace, TwoLevelMeasure
from m2mspace.errors import BudgetExceeded, IndexOutOfRange, InvalidSpec, PreconditionViolated
from m2mspace.functionals import TestFunctionalSpec

seeds = st.integers(min_value=0, max_value=2**32 - 1)

CLIP = {"family": "clip", "C": 10}
PSI = {"family": "clip_product", "C": 10}
PHI12 = {"family": "clip_min_entry", "C": 10}


def am(*pairs):
    return AtomicMeasure.from_pairs(pairs)


def tl(*atoms):
    return TwoLevelMeasure.from_atoms(atoms)


def two_points(r=1.0):
    return FiniteMetricSpace([[0, r], [r, 0]])


def tf3(m=1, n=(2,), phi=PHI12):
    return TestFunctionalSpec("TF3", m=m, n=n, chi=CLIP, psi=PSI, phi=phi)


# -- distance_matrix -------------------------------------------------------------

def test_distance_matrix_repeated_point():
    assert np.array_equal(F.distance_matrix(two_points(), [1, 1, 1]), np.zeros((3, 3)))


def test_distance_matrix_pair():
    assert F.distance_matrix(two_points(), [0, 1]).tolist() == [[0, 1], [1, 0]]


def test_distance_matrix_out_of_range():
    with pytest.raises(IndexOutOfRange):
        F.distance_matrix(two_points(), [0, 2])


@settings(max_examples=50, deadline=None)
@given(seed=seeds, pts=st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_distance_matrix_symmetric_zero_diagonal(seed, pts):
    X = core.random_m2m(6, 1, 1, rng_seed=seed)
    R = F.distance_matrix(X.space, pts)
    assert np.array_equal(R, R.T) and not np.diag(R).any()


# -- spec construction ---------------------------------------------------------------

def test_spec_round_trip():
    spec = tf3()
    again = TestFunctionalSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict()


def test_spec_rejects_shifted_chi():
    with pytest.raises(InvalidSpec):
        TestFunctionalSpec("TF1", chi={"family": "clip", "C": 10, "shift": 1})


def test_spec_rejects_unknown_family_and_bad_arity():
    with pytest.raises(InvalidSpec):
        TestFunctionalSpec("TF1", chi={"family": "nope"})
    with pytest.raises(InvalidSpec):
        TestFunctionalSpec("TF3", m=2, n=(2,), chi=CLIP, psi=PSI, phi=PHI12)
    with pytest.raises(InvalidSpec):
        TestFunctionalSpec("TF3", m=1, n=(1,), chi=CLIP, psi=PSI, phi=PHI12)


def test_spec_rejects_callable_chi_not_vanishing():
    with pytest.raises(InvalidSpec):
        TestFunctionalSpec("TF1", chi=lambda x: x + 1.0)


# -- eval_tf -------------------------------------------------------------------------

def test_tf1_mass_three():
    X = M2MSpace(two_points(), tl((1.0, am((0, 1.0))), (2.0, am((1, 1.0)))))
    assert F.eval_tf(TestFunctionalSpec("TF1", chi=CLIP), X) == 3


def test_tf1_null_measure():
    X = M2MSpace(two_points(), TwoLevelMeasure.null())
    assert F.eval_tf(TestFunctionalSpec("TF1", chi=CLIP), X) == 0


def test_tf3_two_points_half():
    X = M2MSpace(two_points(), tl((1.0, am((0, 0.5), (1, 0.5)))))
    assert F.eval_tf(tf3(), X) == pytest.approx(0.5, abs=1e-15)


def test_tf3_null_atoms_contribute_nothing():
    X = M2MSpace(two_points(), tl((1.0, am((0, 0.5), (1, 0.5))), (1.0, AtomicMeasure.null())))
    # chi(2) * (1/2) * psi(1) * 0.5, the null atom has psi(0) = 0
    assert F.eval_tf(tf3(), X) == pytest.approx(2 * 0.5 * 0.5)


def test_single_entry_shortcut_matches_enumeration():
    # exp(-0 * R) * ... forces the generic path; compare on a phi reading one entry
    X = core.random_m2m(6, 3, 4, rng_seed=21)
    generic = {"family": "clip_poly", "C": 10, "terms": [[1.0, 0, 2, 1]]}
    fast = {"family": "clip_min_entry", "C": 10, "i": 0, "j": 2}
    for m, n in ((1, (3,)), (2, (2, 1))):
        a = F.eval_tf(tf3(m, n, generic), X)
        b = F.eval_tf(tf3(m, n, fast), X)
        assert a == pytest.approx(b, abs=1e-12)


def naive_tf3(spec, X):
    """Direct nested sums over ordered atom tuples and point tuples."""
    atoms = X.nu.atoms
    total = X.nu.mass
    val = 0.0
    for combo in itertools.product(range(len(atoms)), repeat=spec.m):
        w_outer = math.prod(atoms[k][0] / total for k in combo)
        mus = [atoms[k][1] for k in combo]
        masses = np.array([mu.mass for mu in mus])
        psi = float(spec.psi(masses))
        if psi == 0:
            continue
        coords = [mus[i] for i in range(spec.m) for _ in range(spec.n[i])]
        inner = 0.0
        for pts in itertools.product(*[range(len(mu)) for mu in coords]):
            w = math.prod(mu.weights[p] / mu.mass for mu, p in zip(coords, pts))
            idx = [mu.support[p] for mu, p in zip(coords, pts)]
            inner += w * float(spec.phi(F.distance_matrix(X.space, idx)))
        val += w_outer * psi * inner
    return float(spec.chi(total)) * val


@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_eval_tf3_matches_naive_sum(seed):
    X = core.random_m2m(5, 3, 3, rng_seed=seed, null_atom_prob=0.2)
    phi = {"family": "exp", "lambda": 0.3}
    for m, n in ((1, (2,)), (2, (1, 2))):
        spec = tf3(m, n, phi)
        assert F.eval_tf(spec, X) == pytest.approx(naive_tf3(spec, X), abs=1e-12)


def test_budget_exceeded():
    X = core.random_m2m(8, 4, 8, rng_seed=3)
    spec = tf3(3, (4, 4, 4), {"family": "exp", "lambda": 0.1})
    with pytest.raises(BudgetExceeded):
        F.eval_tf(spec, X, budget=1000)


def test_tf1_tf2_depend_only_on_mass_distribution():
    nu = tl((0.5, am((0, 1.0), (1, 1.0))), (1.5, am((2, 3.0))))
    X = M2MSpace(FiniteMetricSpace(np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], float)), nu)
    Y = M2MSpace(FiniteMetricSpace(np.array([[0, 5, 5], [5, 0, 5], [5, 5, 0]], float)), nu)
    for spec in F.default_spec_library():
        if spec.kind in ("TF1", "TF2"):
            assert F.eval_tf(spec, X) == F.eval_tf(spec, Y)


def test_tf4_uses_unnormalized_outer_weights():
    X = M2MSpace(two_points(), tl((2.0, am((0, 1.0)))))
    spec = TestFunctionalSpec("TF4", m=1, n=(1,), psi=PSI, phi={"family": "constant", "value": 1.0})
    assert F.eval_tf(spec, X) == pytest.approx(2.0)


def test_monte_carlo_agrees_with_exact():
    library = F.default_spec_library()
    for seed in range(20):
        X = core.random_m2m(5, 3, 3, rng_seed=seed)
        spec = library[seed % len(library)]
        exact = F.eval_tf(spec, X)
        est = F.monte_carlo_tf(spec, X, 10**5, seed)
        assert abs(est.value - exact) <= 4 * est.stderr + 1e-12, (seed, spec, exact, est)


def test_monte_carlo_deterministic():
    X = core.random_m2m(5, 3, 3, rng_seed=1)
    spec = tf3()
    assert F.monte_carlo_tf(spec, X, 1000, 5) == F.monte_carlo_tf(spec, X, 1000, 5)


# -- distributions ---------------------------------------------------------------------

def test_mass_distribution_examples():
    assert F.mass_distribution(tl((1.0, am((0, 2.0))))).atoms == {2.0: 1.0}
    assert F.mass_distribution(TwoLevelMeasure.null()).atoms == {}
    md = F.mass_distribution(tl((0.3, am((0, 1.0))), (0.7, am((1, 1.0)))))
    assert md.atoms == {1.0: pytest.approx(1.0)}


def test_distance_distribution_examples():
    S = two_points()
    assert F.distance_distribution(am((0, 1.0)), S).atoms == {0.0: 1.0}
    dd = F.distance_distribution(am((0, 0.5), (1, 0.5)), S)
    assert dd.atoms == {0.0: 0.5, 1.0: 0.5}


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_distance_distribution_totals(seed):
    rng = np.random.default_rng(seed)
    S = FiniteMetricSpace(core.random_metric(6, rng))
    mu = core.random_measure(6, 6, rng)
    dd = F.distance_distribution(mu, S)
    assert dd.total == pytest.approx(mu.mass**2, rel=1e-12)
    assert dd.atoms.get(0.0, 0.0) >= sum(w * w for w in mu.weights) - 1e-12


# -- modulus of mass distribution ---------------------------------------------------------

def test_modulus_single_atom():
    S = two_points()
    assert F.modulus_mass_distribution(am((0, 2.0)), S, 1.0) == 0
    assert F.modulus_mass_distribution(am((0, 2.0)), S, 2.0) == 2.0


def test_modulus_two_unit_points():
    assert F.modulus_mass_distribution(am((0, 1.0), (1, 1.0)), two_points(), 0.5) == 0


def grid_modulus(mu, space, delta, grid):
    """Smallest grid eps whose thin-point mass is at most eps."""
    return next(e for e in grid if F.thin_mass(mu, space, e, delta) <= e)


@settings(max_examples=60, deadline=None)
@given(seed=seeds, delta=st.floats(0.05, 4.0))
def test_modulus_agrees_with_fine_grid(seed, delta):
    rng = np.random.default_rng(seed)
    S = FiniteMetricSpace(core.random_metric(5, rng))
    mu = core.random_measure(5, 5, rng)
    v = F.modulus_mass_distribution(mu, S, delta)
    h = 1e-3
    grid = np.arange(h, mu.mass + 2 * h, h)
    g = grid_modulus(mu, S, delta, grid)
    assert v <= g + 1e-12 and g <= v + h + 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_modulus_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    S = FiniteMetricSpace(core.random_metric(6, rng))
    mu = core.random_measure(6, 6, rng)
    deltas = [0.01, 0.1, 0.3, 0.7, 1.5, 3.0, 10.0]
    vals = [F.modulus_mass_distribution(mu, S, d) for d in deltas]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= mu.mass
    assert vals[0] == 0  # below the smallest weight, 0.25


def test_covering_set_requires_small_modulus():
    with pytest.raises(ValueError):
        F.covering_set(am((0, 2.0)), two_points(), 1.0, 2.0)


# -- cutoff --------------------------------------------------------------------------

def test_g_cutoff_values():
    assert F.g_cutoff(7.5, 10) == pytest.approx(0.5)
    assert F.g_cutoff(10, 10) == 0
    assert F.g_cutoff(5, 10) == 1


def test_apply_fK_examples():
    nu = tl((1.0, am((0, 1.0))), (2.0, am((1, 2.0))))
    assert F.apply_fK(nu, 10) == nu
    dropped = F.apply_fK(tl((1.0, am((0, 10.0)))), 10)
    assert dropped.mass == 0
    half = F.apply_fK(tl((1.0, am((0, 7.5)))), 10)
    assert half.mass == pytest.approx(0.5)


# -- sampling and reconstruction -------------------------------------------------------

def test_sample_point_masses():
    masses, points = F.sample_two_level(tl((1.0, am((1, 1.0)))), 5, 3, seed=0)
    assert masses.tolist() == [1.0] * 5 and (points == 1).all()
    masses, points = F.sample_two_level(tl((1.0, am((1, 2.0)))), 5, 3, seed=0)
    assert masses.tolist() == [2.0] * 5 and (points == 1).all()


def test_sample_preconditions():
    with pytest.raises(PreconditionViolated):
        F.sample_two_level(tl((2.0, am((0, 1.0)))), 3, 3)
    with pytest.raises(PreconditionViolated):
        F.sample_two_level(tl((0.5, am((0, 1.0))), (0.5, AtomicMeasure.null())), 3, 3)


def test_reconstruct_examples():
    nu = tl((1.0, am((0, 1.0))))
    assert F.reconstruct_two_level(*F.sample_two_level(nu, 4, 4, seed=1)) == nu
    rebuilt = F.reconstruct_two_level([1.0, 1.0], [[0, 1], [0, 1]])
    assert len(rebuilt) == 1 and rebuilt.mass == pytest.approx(1.0)


def test_row_masses_follow_mass_distribution():
    nu = tl((0.3, am((0, 1.0))), (0.7, am((1, 2.0))))
    masses, _ = F.sample_two_level(nu, 10**4, 1, seed=3)
    vals, counts = np.unique(masses, return_counts=True)
    emp = F.RealDistribution.from_pairs(zip(vals, counts / masses.size))
    assert metrics.prokhorov_real(emp, F.mass_distribution(nu)) < 0.05


# -- profiles -------------------------------------------------------------------------

def test_profile_identity_regime():
    X = core.random_m2m(5, 1, 3, rng_seed=7)
    rows = F.compactness_profile(X, [100.0], [0.1, 0.5])
    mm = core.moment_measure(X.nu)
    for row in rows:
        assert row.modulus == F.modulus_mass_distribution(mm, X.space, row.delta)
        assert row.dd_total == pytest.approx(mm.mass**2)


def test_profile_modulus_shrinks_with_delta():
    X = core.random_m2m(6, 3, 4, rng_seed=2)
    rows = F.compactness_profile(X, [8.0], [2.0, 1.0, 0.5, 0.1, 0.01])
    mods = [r.modulus for r in rows]
    assert all(a >= b for a, b in zip(mods, mods[1:])) and mods[-1] == 0


def test_profile_rejects_bad_grids():
    X = core.random_m2m(3, 1, 1, rng_seed=0)
    with pytest.raises(ValueError):
        F.compactness_profile(X, [], [1.0])
    with pytest.raises(ValueError):
        F.compactness_profile(X, [1.0], [-1.0])


def test_is_in_A_N_examples():
    X = M2MSpace(FiniteMetricSpace(np.zeros((1, 1))), tl((1.0, am((0, 1.0)))))
    assert F.is_in_A_N(X, 1)
    Y = M2MSpace(FiniteMetricSpace([[0, 5], [5, 0]]), tl((1.0, am((0, 1.0), (1, 1.0)))))
    assert not F.is_in_A_N(Y, 4) and F.is_in_A_N(Y, 5)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, N=st.integers(1, 6))
def test_is_in_A_N_direct(seed, N):
    X = core.random_m2m(5, 3, 3, rng_seed=seed)
    supp = sorted(core.effective_support(X.nu))
    D = X.space.distance[np.ix_(supp, supp)]
    direct = (len(supp) <= N and D.max() <= N and X.nu.mass <= N
              and max(mu.mass for mu in X.nu.inner) <= N)
    assert F.is_in_A_N(X, N) == direct
