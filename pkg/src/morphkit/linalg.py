"""Dense matrix kernel: products, normal-equation least squares, column
standardization, and column-stacking vectorization.

Matrices are plain 2-D float64 numpy arrays, validated at API boundaries:
every operation checks that its inputs and outputs are finite. All
functions are pure; arrays are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotFiniteError, ShapeError, SingularMatrixError

# Columns whose centered standard deviation falls below this (relative to
# the column mean magnitude) are flagged constant rather than rescaled.
CONSTANT_COLUMN_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate `a` as a finite 2-D float64 array and return it."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise NotFiniteError(f"{name}: contains non-finite entries")
    return arr


def ensure_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NotFiniteError(f"{name}: produced non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with conformance and finiteness checks."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by "
            f"{b.shape[0]}x{b.shape[1]}: inner dimensions differ"
        )
    return ensure_finite(a @ b, "matmul result")


def least_squares(x, y, ridge: float = 0.0) -> np.ndarray:
    """Solve argmin_W ||y - xW||_F^2 + ridge*||W||_F^2 via normal equations.

    Uses a Cholesky factorization of x.T x + ridge*I. With ridge == 0 a
    rank-deficient system raises SingularMatrixError; callers can retry
    with `ridge_fallback(x)`.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(
            f"design has {x.shape[0]} rows but response has {y.shape[0]}"
        )
    if x.shape[0] < 1:
        raise ShapeError("least_squares requires at least one row")
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    gram = x.T @ x
    if ridge > 0:
        gram = gram + ridge * np.eye(x.shape[1])
    rhs = x.T @ y
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            f"normal equations for a {x.shape[0]}x{x.shape[1]} design are "
            f"singular; retry with ridge > 0 (ridge_fallback(x) suggests "
            f"{ridge_fallback(x):.3e})"
        ) from exc
    w = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    return ensure_finite(w, "least_squares solution")


def ridge_fallback(x) -> float:
    """Default ridge for a rank-deficient design: 1e-8 * trace(x.T x) / cols."""
    x = as_matrix(x, "x")
    return 1e-8 * float(np.einsum("ij,ij->", x, x)) / x.shape[1]


@dataclass(frozen=True)
class StandardizeInfo:
    """Per-column centering/scaling parameters and constant-column flags.

    Scales are strictly positive; flagged constant columns keep scale 1 so
    the transform stays invertible and the caller decides their fate.
    """

    means: np.ndarray
    scales: np.ndarray
    constant_mask: np.ndarray


def standardize_columns(m, mode: str = "center_and_scale") -> tuple[np.ndarray, StandardizeInfo]:
    """Center each column; with mode="center_and_scale" also rescale so that
    col.T col equals the row count. Zero-variance columns are flagged in the
    returned info and left at scale 1 rather than rejected.
    """
    if mode not in ("center_only", "center_and_scale"):
        raise ValueError(f"unknown standardization mode: {mode!r}")
    m = as_matrix(m, "m")
    n = m.shape[0]
    if n < 2:
        raise ShapeError(f"standardize_columns requires >= 2 rows, got {n}")
    means = m.mean(axis=0)
    centered = m - means
    # col.T col / n after centering; sqrt gives the scale that maps to col.T col == n
    meansq = np.einsum("ij,ij->j", centered, centered) / n
    constant = np.sqrt(meansq) <= CONSTANT_COLUMN_TOL * np.maximum(1.0, np.abs(means))
    if mode == "center_only":
        scales = np.ones(m.shape[1])
        out = centered
    else:
        scales = np.where(constant, 1.0, np.sqrt(np.where(constant, 1.0, meansq)))
        out = centered / scales
    return out, StandardizeInfo(means=means, scales=scales, constant_mask=constant)


def unstandardize_columns(m, info: StandardizeInfo) -> np.ndarray:
    """Invert standardize_columns: m * scales + means."""
    m = as_matrix(m, "m")
    return m * info.scales + info.means


def vectorize(m) -> np.ndarray:
    """Column-stacking vectorization: stacks columns top to bottom."""
    m = as_matrix(m, "m")
    return m.flatten(order="F")
