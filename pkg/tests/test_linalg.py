import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from netdeconv.errors import ContractError, ShapeError
from netdeconv.services.linalg import (
    frobenius_norm,
    is_symmetric,
    matmul,
    random_spd,
    seeded_rng,
    sym_eig,
)


# matmul

def test_matmul_matches_numpy(rng):
    a = rng.normal(size=(37, 11))
    b = rng.normal(size=(11, 5))
    np.testing.assert_allclose(matmul(a, b, block_rows=8), a @ b, rtol=1e-12, atol=1e-12)


def test_matmul_independent_of_thread_count(rng):
    a = rng.normal(size=(101, 17))
    b = rng.normal(size=(17, 9))
    single = matmul(a, b, block_rows=10, workers=1)
    threaded = matmul(a, b, block_rows=10, workers=4)
    assert np.array_equal(single, threaded)


def test_matmul_is_associative(rng):
    a, b, c = rng.normal(size=(20, 8)), rng.normal(size=(8, 13)), rng.normal(size=(13, 6))
    left = matmul(matmul(a, b, block_rows=7), c, block_rows=7)
    right = matmul(a, matmul(b, c, block_rows=3), block_rows=7)
    assert frobenius_norm(left - right) <= 1e-9 * frobenius_norm(left)


def test_matmul_rejects_inner_mismatch(rng):
    with pytest.raises(ShapeError):
        matmul(rng.normal(size=(3, 4)), rng.normal(size=(5, 2)))


def test_frobenius_norm():
    assert frobenius_norm(np.array([[3.0, 4.0]])) == pytest.approx(5.0)


# sym_eig

def test_jacobi_reconstructs_spd(rng):
    A = random_spd(rng, 12, condition=1e3)
    values, V = sym_eig(A, method="jacobi")
    assert np.all(np.diff(values) >= 0)
    np.testing.assert_allclose(V @ np.diag(values) @ V.T, A, atol=1e-9)
    np.testing.assert_allclose(V.T @ V, np.eye(12), atol=1e-10)
    np.testing.assert_allclose(values, np.linalg.eigvalsh(A), rtol=1e-8, atol=1e-10)


def test_auto_delegates_above_threshold(rng):
    A = random_spd(rng, 130, condition=10.0)
    values, V = sym_eig(A)
    np.testing.assert_allclose(V @ np.diag(values) @ V.T, A, atol=1e-9)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ContractError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6).map(lambda n: (n, n)),
              elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False)))
def test_jacobi_property_reconstruction(M):
    A = M + M.T
    values, V = sym_eig(A, method="jacobi")
    scale = max(1.0, frobenius_norm(A))
    np.testing.assert_allclose(V @ np.diag(values) @ V.T, A, atol=1e-8 * scale)
    np.testing.assert_allclose(V.T @ V, np.eye(A.shape[0]), atol=1e-9)


def test_is_symmetric_tolerance():
    A = np.array([[1.0, 2.0], [2.0 + 1e-14, 1.0]])
    assert is_symmetric(A)
    assert not is_symmetric(np.ones((2, 3)))


# Generadores

def test_seeded_rng_is_deterministic():
    assert np.array_equal(seeded_rng(5).normal(size=10), seeded_rng(5).normal(size=10))
    assert not np.array_equal(seeded_rng(5).normal(size=10), seeded_rng(6).normal(size=10))


def test_random_spd_spectrum(rng):
    values = np.linalg.eigvalsh(random_spd(rng, 8, condition=100.0))
    assert values.min() == pytest.approx(1.0)
    assert values.max() == pytest.approx(100.0)
