"""Embedding file IO, dataset manifests, and normalization.

Storage format (RTEB): bytes 0-3 ASCII ``RTEB``, bytes 4-7 version=1,
bytes 8-11 row count, bytes 12-15 feature dimension (all unsigned 32-bit
little-endian), followed by rows*dim IEEE-754 32-bit little-endian floats in
row-major order. Nothing else; a valid file is exactly 16 + 4*rows*dim bytes.

Features are stored as-exported (32-bit); vectors that are not unit norm are
normalized at load time by :func:`validate_manifest`, with a warning.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RTEB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

NORM_TOL = 1e-5


class RtebError(ValueError):
    """A file does not conform to the RTEB embedding format."""


class BadMagicError(RtebError):
    pass


class BadVersionError(RtebError):
    pass


class TruncatedError(RtebError):
    pass


class NonFiniteError(RtebError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A rows x dim matrix of 32-bit feature vectors, treated as immutable.

    ``normalized`` records that every row has Euclidean norm within 1e-5
    of 1, which the similarity kernels require.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"embedding matrix needs rows >= 1 and dim >= 1, got {arr.shape}")
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite value, row {int(np.argmax(bad))}")
        if self.normalized:
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            if off.max() > NORM_TOL:
                raise ValueError(
                    f"normalized flag set but row {int(np.argmax(off))} has norm {norms[np.argmax(off)]:.6g}"
                )
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True)
class LabeledImageSet:
    """Image features paired with integer class labels in [0, class_count)."""

    features: EmbeddingMatrix
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError("labels must be a 1-D sequence")
        if labels.shape[0] != self.features.rows:
            raise ValueError(
                f"labels length {labels.shape[0]} does not match feature rows {self.features.rows}"
            )
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            bad = int(np.argmax((labels < 0) | (labels >= self.class_count)))
            raise ValueError(
                f"label out of range: labels[{bad}] = {int(labels[bad])} with class_count {self.class_count}"
            )
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.rows


def load_embeddings(path) -> EmbeddingMatrix:
    """Read an RTEB file, verifying magic, version, sizes, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"file is {len(raw)} bytes; header needs {_HEADER.size} (byte offset {len(raw)})")
    magic, version, rows, dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version} at byte offset 4, expected {VERSION}")
    if rows < 1 or dim < 1:
        raise RtebError(f"invalid shape rows={rows} dim={dim} at byte offset 8")
    expected = _HEADER.size + 4 * rows * dim
    if len(raw) != expected:
        raise TruncatedError(
            f"payload size mismatch: expected {expected} bytes for {rows}x{dim}, file has {len(raw)}"
            f" (byte offset {min(len(raw), expected)})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).copy()
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise NonFiniteError(f"non-finite value, row {int(np.argmax(bad))}")
    norms = np.linalg.norm(data.astype(np.float64), axis=1)
    normalized = bool(np.abs(norms - 1.0).max() <= NORM_TOL)
    return EmbeddingMatrix(data, normalized=normalized)


def save_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write an RTEB file; byte-identical output for identical input."""
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, matrix.rows, matrix.dim)
    Path(path).write_bytes(header + payload)


def l2_normalize(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide each row by its Euclidean norm. Errors on a zero-norm row."""
    data = matrix.as_float64()
    norms = np.linalg.norm(data, axis=1)
    if (norms == 0.0).any():
        raise ValueError(f"zero-norm row {int(np.argmax(norms == 0.0))}")
    return EmbeddingMatrix((data / norms[:, None]).astype(np.float32), normalized=True)


def load_labels(path) -> np.ndarray:
    """Read a labels file: one decimal integer per line."""
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        text = line.strip()
        if not text:
            continue
        try:
            labels.append(int(text))
        except ValueError:
            raise ValueError(f"labels file {path}: line {lineno + 1} is not an integer: {text!r}") from None
    return np.asarray(labels, dtype=np.int64)


def load_class_names(path) -> list[str]:
    """Read a class-names sidecar: line i names class i."""
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


@dataclass
class DatasetManifest:
    """Paths and scalar defaults binding one dataset's exported files.

    Paths are resolved relative to the manifest file's directory by
    :func:`load_manifest`. ``support_images``/``support_labels`` optionally
    name a labeled support set for the image-image branch.
    """

    targets: Path
    images: Path
    labels: Path
    class_names: Path | None = None
    anchors: Path | None = None
    support_images: Path | None = None
    support_labels: Path | None = None
    tau: float = 0.01
    tau_prime: float = 0.01
    alpha: float = 1.0
    backbone: str = ""


@dataclass
class DatasetBundle:
    """Validated, normalized matrices loaded from a manifest."""

    targets: EmbeddingMatrix
    images: EmbeddingMatrix
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    anchors: EmbeddingMatrix | None = None
    support: LabeledImageSet | None = None
    tau: float = 0.01
    tau_prime: float = 0.01
    alpha: float = 1.0
    backbone: str = ""

    @property
    def class_count(self) -> int:
        return self.targets.rows

    def image_set(self) -> LabeledImageSet:
        return LabeledImageSet(self.images, self.labels, self.class_count)


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest JSON document and resolve its paths."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def resolve(key, required=False):
        value = doc.get(key)
        if value is None:
            if required:
                raise ValueError(f"manifest {path}: missing required key {key!r}")
            return None
        return (base / value).resolve() if not Path(value).is_absolute() else Path(value)

    return DatasetManifest(
        targets=resolve("targets", required=True),
        images=resolve("images", required=True),
        labels=resolve("labels", required=True),
        class_names=resolve("class_names"),
        anchors=resolve("anchors"),
        support_images=resolve("support_images"),
        support_labels=resolve("support_labels"),
        tau=float(doc.get("tau", 0.01)),
        tau_prime=float(doc.get("tau_prime", 0.01)),
        alpha=float(doc.get("alpha", 1.0)),
        backbone=str(doc.get("backbone", "")),
    )


def _load_normalized(path, what: str) -> EmbeddingMatrix:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing file for {what}: {path}")
    matrix = load_embeddings(path)
    if not matrix.normalized:
        warnings.warn(f"{what} features in {path} are not unit-norm; normalizing at load")
        matrix = l2_normalize(matrix)
    return matrix


def validate_manifest(manifest: DatasetManifest) -> DatasetBundle:
    """Load every referenced file, check dimensions and label ranges."""
    targets = _load_normalized(manifest.targets, "targets")
    images = _load_normalized(manifest.images, "images")
    if targets.dim != images.dim:
        raise ValueError(f"dimension mismatch targets/images: {targets.dim} vs {images.dim}")

    anchors = None
    if manifest.anchors is not None:
        anchors = _load_normalized(manifest.anchors, "anchors")
        if anchors.dim != targets.dim:
            raise ValueError(f"dimension mismatch targets/anchors: {targets.dim} vs {anchors.dim}")

    labels = load_labels(manifest.labels)
    if labels.shape[0] != images.rows:
        raise ValueError(f"labels length {labels.shape[0]} does not match image rows {images.rows}")
    if labels.size and (labels.min() < 0 or labels.max() >= targets.rows):
        raise ValueError(
            f"label out of range: max label {int(labels.max())} with {targets.rows} target classes"
        )

    class_names: list[str] = []
    if manifest.class_names is not None:
        if not Path(manifest.class_names).exists():
            raise FileNotFoundError(f"missing file for class_names: {manifest.class_names}")
        class_names = load_class_names(manifest.class_names)
        if len(class_names) != targets.rows:
            raise ValueError(
                f"class_names count {len(class_names)} does not match target rows {targets.rows}"
            )

    support = None
    if manifest.support_images is not None:
        if manifest.support_labels is None:
            raise ValueError("manifest names support_images but not support_labels")
        support_features = _load_normalized(manifest.support_images, "support_images")
        if support_features.dim != targets.dim:
            raise ValueError(
                f"dimension mismatch targets/support_images: {targets.dim} vs {support_features.dim}"
            )
        support = LabeledImageSet(support_features, load_labels(manifest.support_labels), targets.rows)

    return DatasetBundle(
        targets=targets,
        images=images,
        labels=labels,
        class_names=class_names,
        anchors=anchors,
        support=support,
        tau=manifest.tau,
        tau_prime=manifest.tau_prime,
        alpha=manifest.alpha,
        backbone=manifest.backbone,
    )
