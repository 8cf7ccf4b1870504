"""Function-preserving layer insertion with compact width selection.

All four entry points insert one hidden layer after a chosen position in a
trained parent and refit the downstream layer by least squares so the
child's downstream pre-activations track the parent's on a probe batch.
They differ in how the inserted width is selected:

* `morph_alg1` scores each candidate neuron against its own output with
  the similarity-penalized solver and drops zero-coefficient columns.
* `morph_alg2` alternates that scoring with a least-squares refit of the
  inserted weights, re-deriving the candidate outputs after each refit.
* `morph_alg3` scores each candidate by its rank-one contribution to the
  downstream reconstruction and prunes matched column/row pairs.
* `morph_baseline` keeps the full width (no sparsification).

Parents are never mutated; identical inputs produce bit-identical children.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLayerError, MorphkitError, ShapeError, SingularMatrixError
from .linalg import as_matrix, least_squares, ridge_fallback, standardize_columns, vectorize
from .network import Layer, Mlp, apply_activation, forward, init_weights
from .sparse import SparseConfig, iilasso_diag, iilasso_residual, refit_w1, similarity_matrix

# Largest candidate-count * probe-rows * downstream-width product morph_alg3
# will materialize without row sampling.
ALG3_VALUE_BUDGET = 2**27

# Contribution matrices with squared norm at or below this are dead.
DEAD_CONTRIBUTION_TOL = 1e-30

ALGORITHM_NAMES = ("alg1", "alg2", "alg3", "baseline")


@dataclass(frozen=True)
class MorphSpec:
    """Insertion request: where, how wide, and how to sparsify."""

    insert_after: int
    width: int
    activation: str = "relu"
    algorithm: str = "alg1"
    sparse: SparseConfig = field(default_factory=SparseConfig)
    seed: int = 0
    fold_beta: bool = False
    alg3_row_sample: int | None = None

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.algorithm not in ALGORITHM_NAMES:
            raise ValueError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHM_NAMES}"
            )
        if self.alg3_row_sample is not None and self.alg3_row_sample < 1:
            raise ValueError("alg3_row_sample must be >= 1 when set")


@dataclass
class MorphReport:
    """Outcome of one insertion run; accuracy fields are filled by the
    experiment harness, not by the morph itself."""

    algorithm: str
    activation: str
    n_redundant: int
    n_sparse: int
    compression_ratio: float
    preservation_max: float
    preservation_rms: float
    sparse_stop_reason: str
    wall_time_s: float
    ridge_fallbacks: int = 0
    run_id: str = ""
    acc_parent: float = float("nan")
    acc_post_morph: float = float("nan")
    acc_after_finetune: float = float("nan")


def sample_rows(n_total: int, count: int | None, seed: int) -> np.ndarray:
    """Sorted uniform row subsample; a count covering every row is a no-op."""
    if count is None or count >= n_total:
        return np.arange(n_total)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=count, replace=False))


def fold_beta(w1, beta, activation: str) -> np.ndarray:
    """Scale each inserted-layer column by its coefficient.

    Legal only where h(s*x) == s*h(x): identity for any s, relu for s >= 0.
    """
    w1 = as_matrix(w1, "w1")
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (w1.shape[1],):
        raise ShapeError(f"beta has shape {beta.shape}, expected ({w1.shape[1]},)")
    if activation not in ("relu", "identity"):
        raise MorphkitError(
            f"cannot fold scale factors through {activation!r}: "
            f"h(s*x) != s*h(x) for that activation"
        )
    if activation == "relu" and (beta < 0).any():
        raise MorphkitError(
            "cannot fold negative factors through relu: h(s*x) == s*h(x) "
            "only holds for s >= 0"
        )
    return w1 * beta[None, :]


def preservation_error(parent: Mlp, child: Mlp, probe, at_layer: int) -> tuple[float, float]:
    """Max-abs and RMS difference between the downstream pre-activations of
    child and parent on the probe batch. `at_layer` is the position the
    insertion happened after; the layer compared is the next one."""
    offset = len(child.layers) - len(parent.layers)
    parent_idx = at_layer + 1
    child_idx = parent_idx + offset
    if not 0 <= parent_idx < len(parent.layers):
        raise ShapeError(
            f"at_layer={at_layer} has no downstream layer in a "
            f"{len(parent.layers)}-layer parent"
        )
    if not 0 <= child_idx < len(child.layers):
        raise ShapeError(
            f"at_layer={at_layer} has no downstream layer in a "
            f"{len(child.layers)}-layer child"
        )
    diff = (
        forward(child, probe).pre_activations[child_idx]
        - forward(parent, probe).pre_activations[parent_idx]
    )
    return float(np.abs(diff).max()), float(np.linalg.norm(diff) / np.sqrt(diff.size))


def _prepare(mlp: Mlp, spec: MorphSpec, probe, w1_init):
    if not 0 <= spec.insert_after <= len(mlp.layers) - 2:
        raise ShapeError(
            f"insert_after={spec.insert_after} must index a non-final layer "
            f"of a {len(mlp.layers)}-layer network"
        )
    probe = as_matrix(probe, "probe")
    d1 = mlp.layers[spec.insert_after].d_out
    forced = probe.shape[0] < max(spec.width, d1)
    if forced:
        warnings.warn(
            f"probe has {probe.shape[0]} rows but the regressions involve up "
            f"to {max(spec.width, d1)} unknowns; applying an automatic ridge",
            RuntimeWarning,
            stacklevel=3,
        )
    if w1_init is None:
        w1 = init_weights(d1, spec.width, spec.activation, spec.seed)
    else:
        w1 = as_matrix(w1_init, "w1_init")
        if w1.shape != (d1, spec.width):
            raise ShapeError(
                f"w1_init has shape {w1.shape}, expected ({d1}, {spec.width})"
            )
    taps = forward(mlp, probe)
    a1 = taps.activations[spec.insert_after]
    downstream_pre = taps.pre_activations[spec.insert_after + 1]
    return probe, a1, downstream_pre, w1, forced


def _fit_readout(a_new, target, with_bias: bool, forced: bool):
    """Least-squares fit of the downstream layer, with an automatic ridge
    when the normal equations are singular (or the probe underdetermined).
    Returns (weight, bias or None, fallback_count)."""
    n = a_new.shape[0]
    design = np.hstack([a_new, np.ones((n, 1))]) if with_bias else a_new
    ridge = ridge_fallback(design) if forced else 0.0
    fallbacks = 1 if forced else 0
    try:
        sol = least_squares(design, target, ridge)
    except SingularMatrixError:
        extra = ridge_fallback(design)
        if extra <= 0.0:
            raise
        sol = least_squares(design, target, ridge + extra)
        fallbacks += 1
    if with_bias:
        return sol[:-1], sol[-1], fallbacks
    return sol, None, fallbacks


def _assemble_child(parent: Mlp, p: int, w1, act: str, w2, b2) -> Mlp:
    old = parent.layers[p + 1]
    layers = (
        list(parent.layers[: p + 1])
        + [Layer(w1, None, act), Layer(w2, b2, old.activation)]
        + list(parent.layers[p + 2 :])
    )
    return Mlp(layers)


def _require_survivors(active: np.ndarray):
    if not active.any():
        raise EmptyLayerError(
            "lambda too large; child layer would be empty (no candidate "
            "neuron survived sparsification)"
        )


def _diag_select(x, response, cfg: SparseConfig, beta_warm=None):
    """Standardize design and response, drop constant candidates, solve the
    diagonal-design problem, and re-embed coefficients at full width."""
    xs, xinfo = standardize_columns(x, "center_and_scale")
    if response is x:
        os_, oinfo = xs, xinfo
    else:
        os_, oinfo = standardize_columns(response, "center_and_scale")
    live = ~(xinfo.constant_mask | oinfo.constant_mask)
    beta_full = np.zeros(x.shape[1])
    if not live.any():
        return beta_full, "target_nnz"
    r = similarity_matrix(xs[:, live], cfg)
    warm = None if beta_warm is None else beta_warm[live]
    sol = iilasso_diag(xs[:, live], os_[:, live], r, cfg, beta0=warm)
    beta_full[live] = sol.beta
    return beta_full, sol.stop_reason


def _finalize_diag(mlp, spec, probe, a1, downstream_pre, w1, beta_full, forced, stop_reason, t0, algorithm):
    active = beta_full != 0
    _require_survivors(active)
    w1_kept = w1[:, active]
    if spec.fold_beta:
        w1_kept = fold_beta(w1_kept, beta_full[active], spec.activation)
    a_new = apply_activation(spec.activation, a1 @ w1_kept)
    with_bias = mlp.layers[spec.insert_after + 1].bias is not None
    w2, b2, fallbacks = _fit_readout(a_new, downstream_pre, with_bias, forced)
    child = _assemble_child(mlp, spec.insert_after, w1_kept, spec.activation, w2, b2)
    pres_max, pres_rms = preservation_error(mlp, child, probe, spec.insert_after)
    n_sparse = int(active.sum())
    report = MorphReport(
        algorithm=algorithm,
        activation=spec.activation,
        n_redundant=spec.width,
        n_sparse=n_sparse,
        compression_ratio=n_sparse / spec.width,
        preservation_max=pres_max,
        preservation_rms=pres_rms,
        sparse_stop_reason=stop_reason,
        ridge_fallbacks=fallbacks,
        wall_time_s=time.perf_counter() - t0,
    )
    return child, report


def morph_alg1(mlp: Mlp, spec: MorphSpec, probe, w1_init=None) -> tuple[Mlp, MorphReport]:
    """Insert a layer, sparsify its columns against their own outputs, then
    refit the downstream layer by least squares."""
    t0 = time.perf_counter()
    probe, a1, downstream_pre, w1, forced = _prepare(mlp, spec, probe, w1_init)
    candidate_out = a1 @ w1
    beta_full, stop_reason = _diag_select(candidate_out, candidate_out, spec.sparse)
    return _finalize_diag(
        mlp, spec, probe, a1, downstream_pre, w1, beta_full, forced, stop_reason, t0, "alg1"
    )


def morph_alg2(mlp: Mlp, spec: MorphSpec, probe, w1_init=None) -> tuple[Mlp, MorphReport]:
    """Like morph_alg1, but alternates the coefficient solve with a
    least-squares refit of the inserted weights until the coefficient
    vector settles (same stopping rule as the solver)."""
    t0 = time.perf_counter()
    cfg = spec.sparse
    probe, a1, downstream_pre, w1, forced = _prepare(mlp, spec, probe, w1_init)
    response = a1 @ w1
    w_cur = w1
    x = response
    beta_full = np.ones(spec.width)
    stop_reason = "max_itr"
    for outer in range(1, cfg.max_itr + 1):
        prev = beta_full
        beta_full, inner_reason = _diag_select(x, response, cfg, beta_warm=prev)
        delta = float(np.abs(beta_full - prev).max())
        if int(np.count_nonzero(beta_full)) <= cfg.target_nnz:
            stop_reason = "target_nnz"
            break
        if delta < cfg.tol:
            stop_reason = "converged"
            break
        if outer >= cfg.max_itr:
            stop_reason = "max_itr"
            break
        w_cur = refit_w1(a1, response, beta_full)
        x = a1 @ w_cur
    return _finalize_diag(
        mlp, spec, probe, a1, downstream_pre, w_cur, beta_full, forced, stop_reason, t0, "alg2"
    )


def contribution_matrices(a_new, w2) -> np.ndarray:
    """Rank-one contribution of each inserted neuron to the downstream
    pre-activations: stack of outer products a_new[:, i] w2[i, :]."""
    a_new = as_matrix(a_new, "a_new")
    w2 = as_matrix(w2, "w2")
    if a_new.shape[1] != w2.shape[0]:
        raise ShapeError(
            f"a_new has {a_new.shape[1]} columns but w2 has {w2.shape[0]} rows"
        )
    return a_new.T[:, :, None] * w2[:, None, :]


def morph_alg3(mlp: Mlp, spec: MorphSpec, probe, w1_init=None) -> tuple[Mlp, MorphReport]:
    """Insert a layer, fit the downstream weights, then sparsify by scoring
    each neuron's rank-one contribution to the downstream reconstruction.
    Zero-coefficient neurons lose both their inserted column and their
    downstream row; surviving rows absorb their coefficients exactly."""
    t0 = time.perf_counter()
    cfg = spec.sparse
    probe, a1, downstream_pre, w1, forced = _prepare(mlp, spec, probe, w1_init)
    a_new_full = apply_activation(spec.activation, a1 @ w1)
    with_bias = mlp.layers[spec.insert_after + 1].bias is not None
    w2, b2, fallbacks = _fit_readout(a_new_full, downstream_pre, with_bias, forced)

    rows = sample_rows(probe.shape[0], spec.alg3_row_sample, spec.seed + 1)
    n_rows = rows.shape[0]
    d2 = downstream_pre.shape[1]
    if spec.width * n_rows * d2 > ALG3_VALUE_BUDGET and spec.alg3_row_sample is None:
        raise MorphkitError(
            f"contribution stack would hold {spec.width * n_rows * d2} values "
            f"(budget {ALG3_VALUE_BUDGET}); set alg3_row_sample to subsample "
            f"probe rows"
        )

    target = downstream_pre[rows]
    if with_bias:
        target = target - b2
        center = float(target.mean())
        target = target - center
    else:
        center = 0.0

    t = contribution_matrices(a_new_full[rows], w2)
    sq_norms = np.einsum("ijk,ijk->i", t, t)
    live = sq_norms > DEAD_CONTRIBUTION_TOL
    beta_full = np.zeros(spec.width)
    scales_full = np.zeros(spec.width)
    stop_reason = "target_nnz"
    if live.any():
        m = n_rows * d2
        scales = np.sqrt(m / sq_norms[live])
        t_scaled = t[live] * scales[:, None, None]
        stacked = np.stack(
            [vectorize(t_scaled[i]) for i in range(t_scaled.shape[0])], axis=1
        )
        r = similarity_matrix(stacked, cfg)
        sol = iilasso_residual(t_scaled, target, r, cfg)
        beta_full[live] = sol.beta
        scales_full[live] = scales
        stop_reason = sol.stop_reason

    active = beta_full != 0
    _require_survivors(active)
    effective = beta_full * scales_full  # coefficients on the unscaled contributions
    w1_kept = w1[:, active]
    w2_kept = w2[active] * effective[active][:, None]
    b2_kept = None if b2 is None else b2 + center
    child = _assemble_child(mlp, spec.insert_after, w1_kept, spec.activation, w2_kept, b2_kept)
    pres_max, pres_rms = preservation_error(mlp, child, probe, spec.insert_after)
    n_sparse = int(active.sum())
    report = MorphReport(
        algorithm="alg3",
        activation=spec.activation,
        n_redundant=spec.width,
        n_sparse=n_sparse,
        compression_ratio=n_sparse / spec.width,
        preservation_max=pres_max,
        preservation_rms=pres_rms,
        sparse_stop_reason=stop_reason,
        ridge_fallbacks=fallbacks,
        wall_time_s=time.perf_counter() - t0,
    )
    return child, report


def morph_baseline(mlp: Mlp, spec: MorphSpec, probe, w1_init=None) -> tuple[Mlp, MorphReport]:
    """Insert the full requested width and refit the downstream layer by
    least squares; no sparsification."""
    t0 = time.perf_counter()
    probe, a1, downstream_pre, w1, forced = _prepare(mlp, spec, probe, w1_init)
    a_new = apply_activation(spec.activation, a1 @ w1)
    with_bias = mlp.layers[spec.insert_after + 1].bias is not None
    w2, b2, fallbacks = _fit_readout(a_new, downstream_pre, with_bias, forced)
    child = _assemble_child(mlp, spec.insert_after, w1, spec.activation, w2, b2)
    pres_max, pres_rms = preservation_error(mlp, child, probe, spec.insert_after)
    report = MorphReport(
        algorithm="baseline",
        activation=spec.activation,
        n_redundant=spec.width,
        n_sparse=spec.width,
        compression_ratio=1.0,
        preservation_max=pres_max,
        preservation_rms=pres_rms,
        sparse_stop_reason="none",
        ridge_fallbacks=fallbacks,
        wall_time_s=time.perf_counter() - t0,
    )
    return child, report


_ALGORITHMS = {
    "alg1": morph_alg1,
    "alg2": morph_alg2,
    "alg3": morph_alg3,
    "baseline": morph_baseline,
}


def morph(mlp: Mlp, spec: MorphSpec, probe, w1_init=None) -> tuple[Mlp, MorphReport]:
    """Dispatch to the algorithm named in `spec.algorithm`."""
    return _ALGORITHMS[spec.algorithm](mlp, spec, probe, w1_init=w1_init)
