"""Model serialization, IDX dataset ingestion, synthetic data, and report
files.

Models are stored as UTF-8 JSON with an explicit schema version; floats go
through Python's shortest-exact repr so a load reproduces every weight
bit-for-bit. IDX files follow the classic big-endian layout (magic, dims,
unsigned bytes); gzipped files are handled transparently by extension.
"""

from __future__ import annotations

import csv
import dataclasses
import gzip
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError, ModelFormatError
from .morph import MorphReport
from .network import ACTIVATION_KINDS, Layer, Mlp

MODEL_SCHEMA_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

REPORT_CSV_COLUMNS = [
    "run_id",
    "algorithm",
    "activation",
    "n_redundant",
    "n_sparse",
    "compression_ratio",
    "preservation_max",
    "preservation_rms",
    "sparse_stop_reason",
    "acc_parent",
    "acc_post_morph",
    "acc_after_finetune",
    "wall_time_s",
]


@dataclass
class Dataset:
    """Feature matrix with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.labels.shape[0] if self.labels.ndim == 1 else '?'} labels "
                f"for {self.features.shape[0]} feature rows"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def save_model(mlp: Mlp, path, metadata: dict | None = None) -> None:
    """Write the network as versioned JSON; weights round-trip exactly."""
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "layers": [
            {
                "in": layer.d_in,
                "out": layer.d_out,
                "activation": layer.activation,
                "weights": layer.weight.tolist(),
                "bias": None if layer.bias is None else layer.bias.tolist(),
            }
            for layer in mlp.layers
        ],
        "metadata": dict(metadata or {}),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _require(doc: dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"{where}: missing required field {key!r}")
    return doc[key]


def load_model(path) -> tuple[Mlp, dict]:
    """Load a model file, returning the network and its metadata dict."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    version = _require(doc, "schema_version", str(path))
    if version != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(
            f"{path}: schema_version {version!r} is not supported "
            f"(expected {MODEL_SCHEMA_VERSION})"
        )
    raw_layers = _require(doc, "layers", str(path))
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ModelFormatError(f"{path}: layers: expected a nonempty list")
    layers = []
    for k, raw in enumerate(raw_layers):
        where = f"{path}: layers[{k}]"
        d_in = _require(raw, "in", where)
        d_out = _require(raw, "out", where)
        activation = _require(raw, "activation", where)
        if activation not in ACTIVATION_KINDS:
            raise ModelFormatError(f"{where}.activation: unknown kind {activation!r}")
        weights = np.asarray(_require(raw, "weights", where), dtype=np.float64)
        if weights.shape != (d_in, d_out):
            raise ModelFormatError(
                f"{where}.weights: shape {weights.shape} does not match "
                f"declared {d_in}x{d_out}"
            )
        bias_raw = _require(raw, "bias", where)
        bias = None if bias_raw is None else np.asarray(bias_raw, dtype=np.float64)
        if bias is not None and bias.shape != (d_out,):
            raise ModelFormatError(
                f"{where}.bias: length {bias.shape} does not match width {d_out}"
            )
        layers.append(Layer(weights, bias, activation))
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ModelFormatError(f"{path}: metadata: expected an object")
    return Mlp(layers), metadata


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(fh, path, what) -> int:
    data = fh.read(4)
    if len(data) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", data)[0]


def read_idx(images_path, labels_path) -> Dataset:
    """Decode an IDX image/label file pair into a Dataset.

    Pixels are flattened row-major per image and scaled to [0, 1].
    """
    with _open_maybe_gzip(images_path) as fh:
        magic = _read_be32(fh, images_path, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(fh, images_path, "image count")
        rows = _read_be32(fh, images_path, "row count")
        cols = _read_be32(fh, images_path, "column count")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: truncated pixel data "
                f"({len(raw)} of {count * rows * cols} bytes)"
            )
    features = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    features = features.astype(np.float64) / 255.0

    with _open_maybe_gzip(labels_path) as fh:
        magic = _read_be32(fh, labels_path, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(fh, labels_path, "label count")
        if label_count != count:
            raise IdxFormatError(
                f"{labels_path}: {label_count} labels for {count} images"
            )
        raw = fh.read(label_count)
        if len(raw) != label_count:
            raise IdxFormatError(
                f"{labels_path}: truncated label data "
                f"({len(raw)} of {label_count} bytes)"
            )
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(features=features, labels=labels)


def synth_dataset(seed: int, n: int, d: int, classes: int, separation: float = 6.0) -> Dataset:
    """Gaussian class blobs (unit per-dimension noise) whose means sit at
    least `separation` apart; labels round-robin so classes stay balanced.
    """
    if n < 1 or d < 1 or classes < 1:
        raise ValueError("n, d and classes must all be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, d))
    if classes > 1:
        gaps = [
            np.linalg.norm(means[i] - means[j])
            for i in range(classes)
            for j in range(i + 1, classes)
        ]
        means *= separation / max(min(gaps), 1e-12)
    labels = np.arange(n) % classes
    features = means[labels] + rng.normal(size=(n, d))
    return Dataset(features=features, labels=labels)


def synth_lowrank_dataset(
    seed: int,
    n: int,
    d: int = 784,
    classes: int = 10,
    spacing: float = 10.0,
    side_dims: int = 30,
    side_scale: float = 0.45,
    ambient: float = 0.01,
) -> Dataset:
    """Class blobs embedded in a low-dimensional subspace of d dims, with
    class means spread `spacing` apart along one dominant direction.

    High-dimensional features with low intrinsic dimension and one strong
    principal direction are the regime where hidden activations become
    heavily correlated (as image features are), which is what makes width
    sparsification bite. Used by the desk-scale experiment.
    """
    if n < 1 or d < 1 or classes < 1 or side_dims < 0:
        raise ValueError("n, d and classes must be >= 1 and side_dims >= 0")
    if side_dims + 1 > d:
        raise ValueError("side_dims + 1 must not exceed the feature count")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    main = spacing * (labels - (classes - 1) / 2) + rng.normal(size=n)
    side_means = side_scale * rng.normal(size=(classes, side_dims))
    side = side_means[labels] + side_scale * rng.normal(size=(n, side_dims))
    latent = np.column_stack([main, side])
    basis = rng.normal(size=(side_dims + 1, d)) / np.sqrt(d)
    features = latent @ basis + ambient * rng.normal(size=(n, d))
    return Dataset(features=features, labels=labels)


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(reports: list[MorphReport], path) -> None:
    """Emit one row per report with the fixed column set."""
    if not reports:
        raise ValueError("no reports to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_COLUMNS)
        for rep in reports:
            row = [
                rep.run_id,
                rep.algorithm,
                rep.activation,
                rep.n_redundant,
                rep.n_sparse,
                rep.compression_ratio,
                rep.preservation_max,
                rep.preservation_rms,
                rep.sparse_stop_reason,
                rep.acc_parent,
                rep.acc_post_morph,
                rep.acc_after_finetune,
                rep.wall_time_s,
            ]
            writer.writerow([_format_value(v) for v in row])


def save_report_json(report: MorphReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=1)
        fh.write("\n")


def load_report_json(path) -> MorphReport:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    names = {f.name for f in dataclasses.fields(MorphReport)}
    unknown = set(doc) - names
    if unknown:
        raise ModelFormatError(f"{path}: unknown report fields {sorted(unknown)}")
    try:
        return MorphReport(**doc)
    except TypeError as exc:
        raise ModelFormatError(f"{path}: incomplete report ({exc})") from exc
