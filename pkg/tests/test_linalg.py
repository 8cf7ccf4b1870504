"""Dense-kernel tests: products, least squares, standardization, vec."""

import numpy as np
import pytest

from morphkit.errors import NotFiniteError, ShapeError, SingularMatrixError
from morphkit.linalg import (
    least_squares,
    matmul,
    ridge_fallback,
    standardize_columns,
    unstandardize_columns,
    vectorize,
)


def naive_matmul(a, b):
    """Triple-loop reference product."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def gauss_solve(a, b):
    """Independent linear solver: Gaussian elimination with partial pivoting."""
    a = a.astype(float).copy()
    b = b.astype(float).copy()
    n = a.shape[0]
    for col in range(n):
        pivot = col + np.argmax(np.abs(a[col:, col]))
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]
    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(matmul(np.eye(3), b), b)

    def test_hand_example(self):
        out = matmul([[1, 2], [3, 4]], [[1], [1]])
        np.testing.assert_array_equal(out, [[3], [7]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() <= 1e-12

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"7x5.*3x2"):
            matmul(np.ones((7, 5)), np.ones((3, 2)))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(
            matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9
        )

    def test_rejects_non_finite(self):
        with pytest.raises(NotFiniteError):
            matmul([[np.nan, 1.0]], [[1.0], [1.0]])


class TestLeastSquares:
    def test_identity_design(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=(4, 2))
        np.testing.assert_allclose(least_squares(np.eye(4), y), y, atol=1e-12)

    def test_recovers_exact_system(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(25, 6))
        w0 = rng.normal(size=(6, 3))
        w = least_squares(x, x @ w0)
        np.testing.assert_allclose(w, w0, atol=1e-8)

    def test_consistent_residual_small(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 5))
        y = x @ rng.normal(size=(5, 4))
        w = least_squares(x, y)
        assert np.linalg.norm(y - x @ w) <= 1e-8 * np.linalg.norm(y)

    def test_against_gaussian_elimination(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 6))
        y = rng.normal(size=(40, 3))
        expected = gauss_solve(x.T @ x, x.T @ y)
        assert np.abs(least_squares(x, y) - expected).max() <= 1e-9

    def test_stationarity(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(40, 6))
        y = rng.normal(size=(40, 3))
        for ridge in (0.0, 0.5):
            w = least_squares(x, y, ridge)
            grad = x.T @ (x @ w - y) + ridge * w
            assert np.abs(grad).max() <= 1e-8 * np.abs(x.T @ y).max()

    def test_singular_raises_with_hint(self):
        x = np.ones((10, 3))  # duplicate columns
        with pytest.raises(SingularMatrixError, match="ridge"):
            least_squares(x, np.ones((10, 1)))

    def test_ridge_rescues_singular(self):
        x = np.ones((10, 3))
        w = least_squares(x, np.ones((10, 1)), ridge_fallback(x))
        assert np.isfinite(w).all()

    def test_ridge_fallback_value(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(12, 4))
        expected = 1e-8 * np.trace(x.T @ x) / 4
        np.testing.assert_allclose(ridge_fallback(x), expected, rtol=1e-12)

    def test_negative_ridge_rejected(self):
        with pytest.raises(ValueError):
            least_squares(np.eye(3), np.eye(3), ridge=-1.0)


class TestStandardize:
    def test_center_only_example(self):
        out, info = standardize_columns(np.array([[1.0], [2.0], [3.0]]), "center_only")
        np.testing.assert_allclose(out[:, 0], [-1.0, 0.0, 1.0], atol=1e-15)
        assert info.scales[0] == 1.0

    def test_center_and_scale_example(self):
        out, _ = standardize_columns(np.array([[0.0], [2.0]]), "center_and_scale")
        np.testing.assert_allclose(out[:, 0], [-1.0, 1.0], atol=1e-15)
        assert out[:, 0] @ out[:, 0] == pytest.approx(2.0)

    def test_random_matrix_normalization(self):
        rng = np.random.default_rng(9)
        m = rng.normal(size=(20, 4)) * [1.0, 5.0, 0.1, 2.0]
        out, _ = standardize_columns(m, "center_and_scale")
        assert np.abs(out.mean(axis=0)).max() <= 1e-12
        norms = np.einsum("ij,ij->j", out, out)
        np.testing.assert_allclose(norms, 20.0, atol=1e-9)

    def test_roundtrip(self):
        rng = np.random.default_rng(10)
        m = rng.normal(size=(15, 5)) * rng.uniform(0.1, 8.0, size=5) + rng.normal(size=5)
        for mode in ("center_only", "center_and_scale"):
            out, info = standardize_columns(m, mode)
            np.testing.assert_allclose(
                unstandardize_columns(out, info), m, rtol=1e-12, atol=1e-12
            )

    def test_constant_column_flagged_not_rejected(self):
        m = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
        out, info = standardize_columns(m, "center_and_scale")
        assert info.constant_mask.tolist() == [True, False]
        assert info.scales[0] == 1.0
        np.testing.assert_allclose(out[:, 0], 0.0, atol=1e-15)

    def test_too_few_rows(self):
        with pytest.raises(ShapeError):
            standardize_columns(np.ones((1, 2)))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            standardize_columns(np.ones((3, 2)), "scale_only")


class TestVectorize:
    def test_column_stacking(self):
        np.testing.assert_array_equal(
            vectorize([[1.0, 2.0], [3.0, 4.0]]), [1.0, 3.0, 2.0, 4.0]
        )

    def test_zero_matrix(self):
        np.testing.assert_array_equal(vectorize(np.zeros((2, 3))), np.zeros(6))

    def test_frobenius_identity(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(3, 3))
        v = vectorize(m)
        np.testing.assert_allclose(v @ v, np.linalg.norm(m) ** 2, rtol=1e-12)
