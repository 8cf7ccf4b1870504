"""Toolkit for inserting compact, function-preserving hidden layers into
trained multilayer perceptrons."""

from .errors import (
    EmptyLayerError,
    IdxFormatError,
    ModelFormatError,
    MorphkitError,
    NotFiniteError,
    ShapeError,
    SingularMatrixError,
    StandardizationError,
    TrainingDivergedError,
)
from .io import (
    Dataset,
    load_model,
    read_idx,
    save_model,
    synth_dataset,
    synth_lowrank_dataset,
    write_report_csv,
)
from .linalg import (
    StandardizeInfo,
    least_squares,
    matmul,
    ridge_fallback,
    standardize_columns,
    unstandardize_columns,
    vectorize,
)
from .morph import (
    MorphReport,
    MorphSpec,
    fold_beta,
    morph,
    morph_alg1,
    morph_alg2,
    morph_alg3,
    morph_baseline,
    preservation_error,
    sample_rows,
)
from .network import (
    Layer,
    Mlp,
    TapOutputs,
    TrainConfig,
    apply_activation,
    evaluate,
    forward,
    init_weights,
    loss_and_gradients,
    train_sgd,
)
from .sparse import (
    SparseConfig,
    SparseSolution,
    iilasso_diag,
    iilasso_residual,
    refit_w1,
    similarity_matrix,
    soft_threshold,
)

__version__ = "0.1.0"
