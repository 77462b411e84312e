import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unroll_lgm.linop import (
    BandedOperator,
    DenseOperator,
    DiagonalOperator,
    IdentityOperator,
    OrthoTransformOperator,
    PosteriorPrecisionOperator,
    RowMaskOperator,
    banded_matvec,
    matvec,
    matvec_count,
    to_dense,
)


def test_diagonal_action():
    np.testing.assert_array_equal(matvec(DiagonalOperator([1, 2, 3]), np.ones(3)), [1, 2, 3])


def test_row_mask_selects_rows():
    op = RowMaskOperator([0, 2], 3)
    np.testing.assert_array_equal(matvec(op, np.array([5.0, 6, 7])), [5, 7])
    np.testing.assert_array_equal(op.apply_transpose(np.array([1.0, 2])), [1, 0, 2])


def test_row_mask_rejects_bad_indices():
    with pytest.raises(ValueError):
        RowMaskOperator([3], 3)
    with pytest.raises(ValueError):
        RowMaskOperator([2, 1], 3)


def test_to_dense_diagonal():
    np.testing.assert_array_equal(to_dense(DiagonalOperator([2.0, 3.0])), [[2, 0], [0, 3]])


def test_cosine_transform_is_orthonormal():
    d = to_dense(OrthoTransformOperator(16))
    np.testing.assert_allclose(d.T @ d, np.eye(16), atol=1e-10)
    np.testing.assert_allclose(to_dense(OrthoTransformOperator(16).T), d.T, atol=1e-12)


def test_cosine_transform_requires_square():
    with pytest.raises(ValueError):
        OrthoTransformOperator(15)


def test_tridiagonal_hand_example():
    a = np.array([[2.0, -1, 0], [-1, 2, -1], [0, -1, 2]])
    op = BandedOperator.from_dense(a, 1, 1)
    np.testing.assert_allclose(banded_matvec(op, np.ones(3)), [1, 0, 1])
    sym = BandedOperator.from_dense(a, 0, 1, symmetric=True)
    np.testing.assert_allclose(banded_matvec(sym, np.ones(3)), [1, 0, 1])


def test_zero_bandwidth_is_diagonal(rng):
    d = rng.standard_normal(7)
    op = BandedOperator(d[None, :], 0, 0)
    v = rng.standard_normal(7)
    np.testing.assert_allclose(banded_matvec(op, v), DiagonalOperator(d).apply(v))


def _random_banded(rng, n, lower, upper):
    a = rng.standard_normal((n, n))
    i, j = np.indices((n, n))
    a[(j - i > upper) | (i - j > lower)] = 0.0
    return a


def test_banded_matches_dense_large(rng):
    a = _random_banded(rng, 200, 5, 5)
    op = BandedOperator.from_dense(a, 5, 5)
    v = rng.standard_normal(200)
    np.testing.assert_allclose(banded_matvec(op, v), a @ v, atol=1e-12)
    np.testing.assert_allclose(op.apply_transpose(v), a.T @ v, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 12),
    lower=st.integers(0, 4),
    upper=st.integers(0, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_banded_dense_round_trip(n, lower, upper, seed):
    rng = np.random.default_rng(seed)
    a = _random_banded(rng, n, lower, upper)
    op = BandedOperator.from_dense(a, lower, upper)
    np.testing.assert_allclose(to_dense(op), a, atol=1e-13)
    np.testing.assert_allclose(to_dense(op.T), a.T, atol=1e-13)


def _random_posterior(rng, D=8, M=6, batched=False):
    G = rng.standard_normal((D, D))
    gamma = G @ G.T + D * np.eye(D)
    phi = rng.standard_normal((M, D))
    psi = np.exp(rng.standard_normal(M))
    if batched:
        mask = (rng.random((M, 3)) < 0.6).astype(float)
    else:
        mask = RowMaskOperator.from_bool(rng.random(M) < 0.6)
    op = PosteriorPrecisionOperator(DenseOperator(gamma), DenseOperator(phi), psi, mask)
    return op, gamma, phi, psi, mask


def test_posterior_precision_matches_dense_assembly(rng):
    op, gamma, phi, psi, mask = _random_posterior(rng)
    Om = to_dense(mask)
    dense = gamma + phi.T @ Om.T @ Om @ np.diag(psi) @ Om.T @ Om @ phi
    np.testing.assert_allclose(to_dense(op), dense, atol=1e-12)
    v = rng.standard_normal(8)
    np.testing.assert_allclose(matvec(op, v), dense @ v, atol=1e-12)


def test_batched_columns_use_their_own_mask(rng):
    op, gamma, phi, psi, W = _random_posterior(rng, batched=True)
    X = rng.standard_normal((8, 3))
    out = matvec(op, X)
    for c in range(3):
        dense = gamma + phi.T @ np.diag(W[:, c] * psi) @ phi
        np.testing.assert_allclose(out[:, c], dense @ X[:, c], atol=1e-12)
        np.testing.assert_allclose(to_dense(op.column(c)), dense, atol=1e-12)
    with pytest.raises(ValueError):
        to_dense(op)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_symmetric_operators_are_symmetric(seed):
    rng = np.random.default_rng(seed)
    op = _random_posterior(rng)[0]
    band = BandedOperator.from_dense(_sym_band(rng, 12), 0, 2, symmetric=True)
    for sym in (op, band):
        for _ in range(4):
            v = rng.standard_normal(sym.cols)
            w = rng.standard_normal(sym.cols)
            lhs, rhs = w @ sym.apply(v), v @ sym.apply(w)
            assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(v) * np.linalg.norm(w) * max(
                1.0, np.abs(to_dense(sym)).max()
            )


def _sym_band(rng, n):
    a = _random_banded(rng, n, 2, 2)
    return a + a.T


def test_counter_increments_once_per_vector(rng):
    op = DiagonalOperator(np.ones(4))
    before = matvec_count()
    matvec(op, np.ones(4))
    assert matvec_count() - before == 1
    before = matvec_count()
    matvec(op, np.ones((4, 5)))
    assert matvec_count() - before == 5
    before = matvec_count()
    op.apply(np.ones(4))  # uncounted
    assert matvec_count() == before


def test_cosine_posterior_costs_two_transforms():
    T = OrthoTransformOperator(16)
    op = PosteriorPrecisionOperator(DiagonalOperator(np.ones(16)), T, np.ones(16), np.ones(16))
    before = T.transform_calls
    matvec(op, np.ones(16))
    assert T.transform_calls - before == 2


def test_dense_cap_enforced():
    with pytest.raises(ValueError, match="cap"):
        to_dense(IdentityOperator(10), cap=50)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        matvec(DiagonalOperator(np.ones(3)), np.ones(4))
