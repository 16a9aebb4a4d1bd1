import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icleq.numerics import ContractViolation, SingularityError, make_rng, sample_cgauss, solve_hpd


def random_hpd(rng, n, shift=0.5):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return A @ A.conj().T + shift * np.eye(n)


def test_solve_identity_is_exact():
    B = make_rng(1).standard_normal((3, 2)) + 0j
    X = solve_hpd(np.eye(3), B)
    assert np.max(np.abs(X - B)) <= 1e-14


def test_solve_scaled_identity():
    B = np.array([[1 + 2j, 3], [-1j, 4]])
    np.testing.assert_allclose(solve_hpd(2 * np.eye(2), B), B / 2, atol=1e-15)


def test_solve_small_hermitian_residual():
    A = np.array([[2, 1j], [-1j, 2]])
    rng = make_rng(2)
    B = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    X = solve_hpd(A, B)
    assert np.linalg.norm(A @ X - B) <= 1e-10


def test_solve_vector_rhs_keeps_shape():
    A = np.array([[2, 1j], [-1j, 2]])
    x = solve_hpd(A, np.array([1.0, 2.0]))
    assert x.shape == (2,)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), m=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_solve_residual_property(n, m, seed):
    rng = make_rng(seed)
    A = random_hpd(rng, n)
    B = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
    X = solve_hpd(A, B)
    assert np.linalg.norm(A @ X - B) / max(1.0, np.linalg.norm(B)) <= 1e-8


def test_non_hermitian_is_rejected():
    with pytest.raises(ContractViolation):
        solve_hpd(np.array([[1.0, 1.0], [0.0, 1.0]]), np.ones(2))


def test_indefinite_reports_pivot():
    A = np.diag([1.0, -1.0, 2.0])
    with pytest.raises(SingularityError) as exc:
        solve_hpd(A, np.ones(3))
    assert exc.value.pivot == 1


def test_singular_gram_fails():
    H = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularityError):
        solve_hpd(H.T @ H, np.ones(2))


def test_cgauss_zero_variance():
    z = sample_cgauss(make_rng(0), 3, 4, var=0.0)
    assert z.shape == (3, 4) and not np.any(z)


def test_cgauss_negative_variance():
    with pytest.raises(ContractViolation):
        sample_cgauss(make_rng(0), 2, 2, var=-1.0)


def test_cgauss_moments():
    z = sample_cgauss(make_rng(3), 100_000, var=1.0)
    assert abs(z.mean()) <= 0.02
    assert 0.97 <= np.mean(np.abs(z) ** 2) <= 1.03
    assert 0.47 <= z.real.var() <= 0.53
    assert 0.47 <= z.imag.var() <= 0.53


def test_cgauss_is_reproducible():
    a = sample_cgauss(make_rng(42), 5, 5, var=2.0)
    b = sample_cgauss(make_rng(42), 5, 5, var=2.0)
    assert np.array_equal(a, b)


def test_rng_streams_differ_by_index():
    a = make_rng(7, 0).standard_normal(4)
    b = make_rng(7, 1).standard_normal(4)
    assert not np.array_equal(a, b)
