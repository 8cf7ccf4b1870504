"""Similarity-penalized sparse solvers for neuron selection.

Two cyclic coordinate-descent solvers minimize a least-squares data term
plus lambda * (||beta||_1 + (alpha/2) |beta|^T R |beta|), where R is a
pairwise similarity penalty built from column correlations. The penalty
discourages keeping groups of near-duplicate neurons: as two columns
approach collinearity their R entry blows up (capped at r_cap) and one of
the pair is driven to zero. alpha = 0 recovers plain Lasso.

`iilasso_diag` handles the diagonal design, one response column per
coefficient: (1/2N) sum_j ||o_j - beta_j x_j||^2. `iilasso_residual`
handles a shared response reconstructed by a weighted sum of rank-one
contribution matrices: after column-stacking each contribution, it is a
standard design-matrix problem over N*q stacked entries, and the tracked
objective averages over all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotFiniteError, ShapeError, SingularMatrixError, StandardizationError
from .linalg import as_matrix, least_squares, ridge_fallback, vectorize

# Column norms may deviate from the nominal value by this relative amount
# before the input is rejected as unstandardized.
NORM_RTOL = 1e-6


@dataclass(frozen=True)
class SparseConfig:
    """Penalty weights and termination knobs shared by both solvers.

    lam scales the whole penalty, alpha the similarity part. A sweep loop
    stops once sweeps reach max_itr, the largest single-coefficient change
    falls below tol, or the nonzero count drops to target_nnz.
    """

    lam: float = 0.1
    alpha: float = 0.1
    max_itr: int = 1000
    target_nnz: int = 0
    tol: float = 1e-7
    r_cap: float = 1e6

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be nonnegative")
        if self.max_itr < 1:
            raise ValueError("max_itr must be >= 1")
        if self.target_nnz < 0:
            raise ValueError("target_nnz must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.r_cap <= 0:
            raise ValueError("r_cap must be positive")


@dataclass
class SparseSolution:
    """Solver outcome: coefficients, surviving indices, and the per-sweep
    objective trace (index 0 is the value at the starting iterate)."""

    beta: np.ndarray
    active_set: np.ndarray
    objective_trace: np.ndarray
    sweeps_run: int
    stop_reason: str


def soft_threshold(a, b):
    """Shrinkage operator sgn(a) * max(|a| - b, 0)."""
    return np.sign(a) * np.maximum(np.abs(a) - b, 0.0)


def similarity_matrix(x, cfg: SparseConfig) -> np.ndarray:
    """Pairwise similarity penalties R from a column-normalized matrix.

    With r_jk = |x_j.T x_k| / N in [0, 1], off-diagonal entries are
    r / (1 - r) capped at cfg.r_cap; the diagonal is exactly zero. Columns
    must satisfy col.T col == N (the row count) up to a small tolerance.
    """
    x = as_matrix(x, "x")
    n = x.shape[0]
    gram = x.T @ x
    norms = np.diag(gram)
    if np.abs(norms - n).max() > NORM_RTOL * n:
        worst = int(np.abs(norms - n).argmax())
        raise StandardizationError(
            f"column {worst} has squared norm {norms[worst]:.6g}, expected "
            f"{n}; normalize columns before building the similarity matrix"
        )
    r = np.clip(np.abs(gram) / n, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        penalties = np.where(r < 1.0, r / np.maximum(1.0 - r, 1e-300), np.inf)
    penalties = np.minimum(penalties, cfg.r_cap)
    penalties = 0.5 * (penalties + penalties.T)
    np.fill_diagonal(penalties, 0.0)
    return penalties


def coordinate_update(rho: float, threshold: float, r_jj: float, cfg: SparseConfig) -> float:
    """Closed-form minimizer of either objective restricted to one
    coefficient: S(rho, threshold) / (1 + alpha * lam * R_jj).

    R_jj is zero by construction so the denominator is exactly 1; the
    written form is kept deliberately.
    """
    return float(soft_threshold(rho, threshold)) / (1.0 + cfg.alpha * cfg.lam * r_jj)


def coordinate_threshold(r_row: np.ndarray, beta: np.ndarray, j: int, cfg: SparseConfig) -> float:
    """Shrinkage threshold for coefficient j given the others:
    lam * (1 + alpha * sum_{c != j} R_jc |beta_c|)."""
    cross = float(r_row @ np.abs(beta)) - float(r_row[j]) * abs(float(beta[j]))
    return cfg.lam * (1.0 + cfg.alpha * cross)


def _penalty(beta: np.ndarray, r: np.ndarray, cfg: SparseConfig) -> float:
    ab = np.abs(beta)
    return cfg.lam * (float(ab.sum()) + 0.5 * cfg.alpha * float(ab @ r @ ab))


def diag_objective(x, o, beta, r, cfg: SparseConfig) -> float:
    """(1/2N) sum_j ||o_j - beta_j x_j||^2 plus the penalty."""
    x = np.asarray(x)
    o = np.asarray(o)
    resid = o - x * np.asarray(beta)[None, :]
    return 0.5 / x.shape[0] * float(np.einsum("ij,ij->", resid, resid)) + _penalty(
        np.asarray(beta), r, cfg
    )


def stacked_objective(z, y_vec, beta, r, cfg: SparseConfig) -> float:
    """(1/2M) ||y_vec - z beta||^2 plus the penalty, M = len(y_vec)."""
    resid = np.asarray(y_vec) - np.asarray(z) @ np.asarray(beta)
    return 0.5 / resid.shape[0] * float(resid @ resid) + _penalty(np.asarray(beta), r, cfg)


def _check_square(r: np.ndarray, d: int) -> np.ndarray:
    r = as_matrix(r, "similarity matrix")
    if r.shape != (d, d):
        raise ShapeError(f"similarity matrix is {r.shape}, expected ({d}, {d})")
    return r


def _finish(beta, trace, sweeps, reason) -> SparseSolution:
    return SparseSolution(
        beta=beta,
        active_set=np.flatnonzero(beta),
        objective_trace=np.asarray(trace),
        sweeps_run=sweeps,
        stop_reason=reason,
    )


def _stop_reason(beta, max_delta, sweeps, cfg: SparseConfig) -> str | None:
    if int(np.count_nonzero(beta)) <= cfg.target_nnz:
        return "target_nnz"
    if max_delta < cfg.tol:
        return "converged"
    if sweeps >= cfg.max_itr:
        return "max_itr"
    return None


def iilasso_diag(x, o, r, cfg: SparseConfig, beta0=None) -> SparseSolution:
    """Coordinate descent on the diagonal-design objective.

    x holds the candidate columns (normalized to col.T col == N), o the
    per-column response; coefficient j only ever multiplies x_j. Each
    update sets beta_j = S((1/N) o_j.T x_j, lam * (1 + alpha *
    sum_{c != j} R_jc |beta_c|)) / (1 + alpha lam R_jj), which is the exact
    minimizer over that coefficient with the others held at their current
    values.
    """
    x = as_matrix(x, "x")
    o = as_matrix(o, "o")
    if x.shape != o.shape:
        raise ShapeError(f"x is {x.shape} but o is {o.shape}; shapes must match")
    n, d = x.shape
    norms = np.einsum("ij,ij->j", x, x)
    if d and np.abs(norms - n).max() > NORM_RTOL * n:
        worst = int(np.abs(norms - n).argmax())
        raise StandardizationError(
            f"design column {worst} has squared norm {norms[worst]:.6g}, "
            f"expected {n}; standardize before solving"
        )
    r = _check_square(r, d)
    corr = np.einsum("ij,ij->j", o, x) / n
    beta = np.ones(d) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    if beta.shape != (d,):
        raise ShapeError(f"beta0 has shape {beta.shape}, expected ({d},)")

    trace = [diag_objective(x, o, beta, r, cfg)]
    sweeps = 0
    reason = _stop_reason(beta, np.inf, sweeps, cfg)
    while reason is None:
        max_delta = 0.0
        for j in range(d):
            thr = coordinate_threshold(r[j], beta, j, cfg)
            new = coordinate_update(corr[j], thr, r[j, j], cfg)
            max_delta = max(max_delta, abs(new - beta[j]))
            beta[j] = new
        sweeps += 1
        obj = diag_objective(x, o, beta, r, cfg)
        if not np.isfinite(obj):
            raise NotFiniteError(
                f"objective became non-finite at sweep {sweeps}; trace so far: {trace}"
            )
        trace.append(obj)
        reason = _stop_reason(beta, max_delta, sweeps, cfg)
    return _finish(beta, trace, sweeps, reason)


def stack_contributions(t) -> np.ndarray:
    """Column-stack each contribution matrix into one design column."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeError(
            f"expected a sequence of equally shaped matrices, got ndim={t.ndim}"
        )
    return np.stack([vectorize(t[i]) for i in range(t.shape[0])], axis=1)


def iilasso_residual(t, y, r, cfg: SparseConfig, beta0=None) -> SparseSolution:
    """Coordinate descent on the shared-response objective.

    t is a sequence of D contribution matrices (N, q), each scaled so its
    stacked column z_i = vec(t_i) has squared norm M = N*q; y is the (N, q)
    response, centered by the caller. The model is y ~ sum_i beta_i t_i.
    Each update sets beta_j = S((1/M) [vec(y) - sum_{i != j} beta_i
    vec(t_i)].T vec(t_j), lam * (1 + alpha sum_{c != j} R_jc |beta_c|)) /
    (1 + alpha lam R_jj), the exact minimizer over that coefficient.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeError(f"t must be a sequence of matrices, got ndim={t.ndim}")
    if not np.isfinite(t).all():
        raise NotFiniteError("contribution matrices contain non-finite entries")
    y = as_matrix(y, "y")
    d = t.shape[0]
    if t.shape[1:] != y.shape:
        raise ShapeError(
            f"contribution matrices are {t.shape[1:]} but the response is {y.shape}"
        )
    z = stack_contributions(t)
    y_vec = vectorize(y)
    m = y_vec.shape[0]
    norms = np.einsum("ij,ij->j", z, z)
    if d and np.abs(norms - m).max() > NORM_RTOL * m:
        worst = int(np.abs(norms - m).argmax())
        raise StandardizationError(
            f"contribution {worst} has squared stacked norm "
            f"{norms[worst]:.6g}, expected {m}; rescale before solving"
        )
    r = _check_square(r, d)
    beta = np.ones(d) if beta0 is None else np.asarray(beta0, dtype=np.float64).copy()
    if beta.shape != (d,):
        raise ShapeError(f"beta0 has shape {beta.shape}, expected ({d},)")

    resid = y_vec - z @ beta
    trace = [stacked_objective(z, y_vec, beta, r, cfg)]
    sweeps = 0
    reason = _stop_reason(beta, np.inf, sweeps, cfg)
    while reason is None:
        max_delta = 0.0
        for j in range(d):
            rho = float(resid @ z[:, j]) / m + beta[j]
            thr = coordinate_threshold(r[j], beta, j, cfg)
            new = coordinate_update(rho, thr, r[j, j], cfg)
            if new != beta[j]:
                resid -= (new - beta[j]) * z[:, j]
                max_delta = max(max_delta, abs(new - beta[j]))
                beta[j] = new
        sweeps += 1
        obj = 0.5 / m * float(resid @ resid) + _penalty(beta, r, cfg)
        if not np.isfinite(obj):
            raise NotFiniteError(
                f"objective became non-finite at sweep {sweeps}; trace so far: {trace}"
            )
        trace.append(obj)
        reason = _stop_reason(beta, max_delta, sweeps, cfg)
    return _finish(beta, trace, sweeps, reason)


def refit_w1(a1, o_new, beta, ridge: float = 0.0) -> np.ndarray:
    """Refit the inserted-layer weights holding the coefficients fixed.

    Solves min_W ||o_new - a1 W diag(beta)||_F^2 columnwise: active columns
    get (1/beta_j) times the least-squares fit of o_new_j on a1; columns
    with beta_j == 0 are returned as zeros. A rank-deficient a1 falls back
    to a small automatic ridge.
    """
    a1 = as_matrix(a1, "a1")
    o_new = as_matrix(o_new, "o_new")
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.shape[0] != o_new.shape[1]:
        raise ShapeError(
            f"beta has shape {beta.shape}, expected ({o_new.shape[1]},)"
        )
    if not np.isfinite(beta).all():
        raise NotFiniteError("beta contains non-finite entries")
    try:
        w_ls = least_squares(a1, o_new, ridge)
    except SingularMatrixError:
        w_ls = least_squares(a1, o_new, ridge + ridge_fallback(a1))
    w = np.zeros_like(w_ls)
    active = beta != 0
    w[:, active] = w_ls[:, active] / beta[active]
    return w
