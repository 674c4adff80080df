import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from tdoanet.errors import ConfigError
from tdoanet.matlib import as_mat, block_diag, eigvals, kron, mat_pow, spectral_radius

small = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _eig_tol(A) -> float:
    # eigenvalues of an n x n Jordan block move by ~ eps^(1/n) under rounding
    n = A.shape[0]
    return 1e-6 + 4 * np.finfo(float).eps ** (1 / n) * (1 + np.linalg.norm(A, 2))


def test_rotation_scaling_radius_frozen():
    # eigenvalues 0.5 +- 0.5i, modulus sqrt(1/2)
    A = np.array([[0.5, 1.0], [-0.25, 0.5]])
    assert spectral_radius(A) == pytest.approx(0.7071067811865476, abs=1e-15)


def test_companion_radius_frozen():
    # companion of (z - 0.9)(z + 0.95)(z - 0.2): radius 0.95
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-0.171, 0.865, 0.15]])
    assert spectral_radius(A) == pytest.approx(0.95, abs=1e-12)
    assert oracles.spectral_radius_oracle(A) == pytest.approx(0.95, abs=1e-12)


def test_empty_and_scalar():
    assert spectral_radius(np.zeros((0, 0))) == 0.0
    assert spectral_radius([[-2.5]]) == 2.5


@given(arrays(float, (4, 4), elements=small))
def test_radius_matches_charpoly_oracle(A):
    got = spectral_radius(A)
    want = oracles.spectral_radius_oracle(A)
    assert abs(got - want) <= _eig_tol(A)


@given(arrays(float, (2, 3), elements=small), arrays(float, (3, 2), elements=small))
def test_kron_matches_loops(a, b):
    np.testing.assert_array_equal(kron(a, b), oracles.kron_loops(a, b))


@given(arrays(float, (3, 3), elements=small), st.integers(0, 6))
def test_mat_pow_matches_repeated_product(A, e):
    want = np.eye(3)
    for _ in range(e):
        want = want @ A
    np.testing.assert_allclose(mat_pow(A, e), want, rtol=1e-12, atol=1e-9)


def test_block_diag_layout():
    B = block_diag([np.ones((1, 1)), 2 * np.ones((2, 3))])
    assert B.shape == (3, 4)
    assert B[0, 0] == 1 and B[1:, 1:].sum() == 12 and B[0, 1:].sum() == 0 and B[1:, 0].sum() == 0


@pytest.mark.parametrize(
    "call",
    [
        lambda: as_mat([1.0, 2.0]),
        lambda: as_mat([[np.nan]]),
        lambda: eigvals(np.ones((2, 3))),
        lambda: mat_pow(np.eye(2), -1),
        lambda: mat_pow(np.eye(2), 1.5),
        lambda: block_diag([]),
    ],
)
def test_rejects_bad_input(call):
    with pytest.raises(ConfigError):
        call()


@given(arrays(float, (3, 3), elements=small))
def test_radius_invariant_under_similarity(A):
    P = np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 0.5], [1.0, 0.0, 1.0]])
    B = P @ A @ np.linalg.inv(P)
    assert abs(spectral_radius(B) - spectral_radius(A)) <= _eig_tol(B)
