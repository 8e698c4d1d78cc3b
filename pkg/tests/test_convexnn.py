import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from implicitreg.convexnn import (UnitLibrary, balanced_factorization, equivalence_check,
                                  factorization_penalty, features, kkt_residual, l1_objective,
                                  library_net, sample_library, soft_threshold, solve_l1,
                                  solve_l1_features, trace_norm)
from implicitreg.model import forward
from implicitreg.numerics import Rng


def sign_pattern_oracle(Phi, y, lam):
    m = Phi.shape[1]
    best = l1_objective(Phi, y, np.zeros(m), lam)
    for pattern in itertools.product((-1, 0, 1), repeat=m):
        s = np.flatnonzero(pattern)
        if s.size == 0:
            continue
        sig = np.array(pattern, dtype=float)[s]
        A = Phi[:, s]
        w, *_ = np.linalg.lstsq(A.T @ A, A.T @ y - lam * sig, rcond=None)
        if np.all(np.sign(w) == sig):
            v = np.zeros(m)
            v[s] = w
            best = min(best, l1_objective(Phi, y, v, lam))
    return best


def instance(seed, n=8, d=3, m=5):
    r = Rng(seed)
    X = r.gaussian_matrix(n, d)
    y = r.gaussian(n)
    return sample_library(d, m, "gaussian_normalized", r.child(9)), X, y


def test_grid_library_four_points():
    lib = sample_library(2, 4, "grid_sphere_2d")
    np.testing.assert_allclose(lib.units, [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)


@pytest.mark.parametrize("m", [3, 7, 16, 100])
def test_library_rows_unit_norm(m):
    for lib in (sample_library(2, m, "grid_sphere_2d"), sample_library(5, m, rng=Rng(m))):
        n = np.linalg.norm(lib.units, axis=1)
        assert np.all((n <= 1) & (n >= 1 - 1e-12))


def test_grid_nesting_is_exact():
    for m in (4, 16, 64, 256):
        a = sample_library(2, m, "grid_sphere_2d").units
        b = sample_library(2, 2 * m, "grid_sphere_2d").units
        np.testing.assert_array_equal(a, b[::2])


def test_library_errors():
    with pytest.raises(ValueError):
        sample_library(3, 4, "grid_sphere_2d")
    with pytest.raises(ValueError):
        sample_library(2, 0)
    with pytest.raises(ValueError):
        sample_library(2, 4, "hexagonal")
    with pytest.raises(ValueError):
        UnitLibrary(np.array([[2.0, 0.0]]))


def test_features_examples():
    assert features(UnitLibrary(np.array([[1.0, 0.0]])), [[-2.0, 5.0]]).tolist() == [[0.0]]
    assert features(UnitLibrary(np.array([[0.0, 1.0]])), [[-2.0, 5.0]]).tolist() == [[5.0]]
    with pytest.raises(ValueError):
        features(UnitLibrary(np.array([[0.0, 1.0]])), [[1.0, 2.0, 3.0]])


def test_features_match_entry_loop(rng):
    lib = sample_library(3, 6, rng=rng)
    X = rng.gaussian_matrix(5, 3)
    F = features(lib, X)
    for t in range(5):
        for i in range(6):
            z = sum(lib.units[i, j] * X[t, j] for j in range(3))
            assert F[t, i] == pytest.approx(max(z, 0.0), rel=1e-15, abs=1e-16)


def test_soft_threshold():
    assert soft_threshold(np.array([3.0, -3.0, 0.5]), 1.0).tolist() == [2.0, -2.0, 0.0]


def test_zero_threshold_is_exact():
    for seed in range(10):
        lib, X, y = instance(seed)
        Phi = features(lib, X)
        lam0 = float(np.abs(Phi.T @ y).max())
        at = solve_l1(lib, X, y, lam0)
        assert at.converged and not at.v.any() and at.iterations == 0
        below = solve_l1(lib, X, y, lam0 * (1 - 1e-6))
        assert below.v.any()


def test_single_feature_closed_form():
    r = Rng(4)
    for t in range(10):
        phi = np.abs(r.child(t).gaussian(8))
        y = r.child(t, 1).gaussian(8)
        lam = 0.3 * abs(phi @ y)
        sol = solve_l1_features(phi[:, None], y, lam)
        expect = soft_threshold(phi @ y, lam) / (phi @ phi)
        assert sol.v[0] == pytest.approx(expect, abs=1e-10)


def test_matches_sign_pattern_enumeration():
    for seed in range(20):
        lib, X, y = instance(seed)
        Phi = features(lib, X)
        lam = 0.1 * float(np.abs(Phi.T @ y).max())
        sol = solve_l1(lib, X, y, lam)
        assert sol.converged
        assert abs(sol.objective - sign_pattern_oracle(Phi, y, lam)) <= 1e-8
        assert sol.kkt_residual <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.0, 2.0))
def test_certificate_and_monotone_history(seed, frac):
    lib, X, y = instance(seed, n=12, d=4, m=20)
    Phi = features(lib, X)
    lam = frac * float(np.abs(Phi.T @ y).max())
    sol = solve_l1(lib, X, y, lam, tol=1e-8)
    h = np.array(sol.objective_history)
    assert np.all(np.diff(h) <= 4 * np.finfo(float).eps * np.abs(h[:-1]))
    assert sol.kkt_residual >= 0
    if sol.converged:
        assert kkt_residual(Phi, y, sol.v, lam) <= 1e-8


def test_nonconverged_status_is_reported():
    lib, X, y = instance(1, n=30, d=4, m=200)
    sol = solve_l1(lib, X, y, 1e-3, tol=1e-14, max_iter=3)
    assert not sol.converged and sol.iterations == 3 and sol.kkt_residual > 1e-14


def test_library_net_reproduces_features(rng):
    lib, X, y = instance(2)
    v = rng.gaussian(5)
    np.testing.assert_allclose(forward(library_net(lib, v), X)[:, 0], features(lib, X) @ v,
                               rtol=1e-13)


def test_negative_lambda_rejected():
    lib, X, y = instance(0)
    with pytest.raises(ValueError):
        solve_l1(lib, X, y, -1.0)


def test_nested_libraries_do_not_increase_objective():
    r = Rng(7)
    X = r.gaussian_matrix(10, 2)
    y = r.gaussian(10)
    prev, v = np.inf, None
    for m in (4, 8, 16, 32, 64, 128):
        lib = sample_library(2, m, "grid_sphere_2d")
        v0 = None if v is None else np.repeat(v, 2) * np.tile([1.0, 0.0], m // 2)
        sol = solve_l1(lib, X, y, 0.05, v0=v0)
        assert sol.objective <= prev * (1 + 1e-12)
        prev, v = sol.objective, sol.v


def test_equivalence_check_desk_instance():
    r = Rng(0)
    X = r.gaussian_matrix(10, 2)
    y = r.gaussian(10)
    rep = equivalence_check(X, y, 11, 0.05, [16, 32, 64, 128, 256, 512], r.child(1))
    assert rep.identity_rel_error <= 1e-10
    assert all(rep.library_converged)
    J = np.array(rep.library_objectives)
    assert np.all(np.diff(J) <= 1e-12 * J[:-1])
    gaps = np.abs(rep.library_gaps)
    assert np.all(np.diff(gaps) <= 1e-12) and gaps[-1] < 1e-2 * gaps[0]
    assert rep.objective_balanced <= rep.objective_trained + 1e-12


def test_equivalence_check_requires_wide_net():
    with pytest.raises(ValueError):
        equivalence_check(np.zeros((5, 2)), np.zeros(5), 5, 0.1, [4], Rng(0))


def test_trace_norm_examples():
    assert trace_norm(np.eye(2)) == pytest.approx(2.0, rel=1e-15)
    a, b = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
    assert trace_norm(np.outer(a, b)) == pytest.approx(15.0, rel=1e-14)


def test_factorizations_bound_trace_norm():
    r = Rng(13)
    for t in range(10):
        W = r.child(t).gaussian_matrix(5, 5)
        tn = trace_norm(W)
        for j in range(20):
            A = r.child(t, j).gaussian_matrix(5, 5)
            V, U = A, np.linalg.solve(A, W).T
            np.testing.assert_allclose(V @ U.T, W, atol=1e-9)
            assert factorization_penalty(U, V) >= tn * (1 - 1e-12)
        U, V = balanced_factorization(W)
        np.testing.assert_allclose(V @ U.T, W, atol=1e-12)
        assert factorization_penalty(U, V) == pytest.approx(tn, rel=1e-8)
