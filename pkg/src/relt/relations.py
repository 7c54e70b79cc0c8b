"""Similarity kernels and anchor-target relation matrices.

All arithmetic here is 64-bit regardless of the 32-bit storage format, so
downstream gradient checks are meaningful. Softmaxes subtract the row/column
maximum before exponentiation; at the default temperature 0.01 the naive form
overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relt.embed_io import EmbeddingMatrix

OVER_ANCHORS = "over_anchors"
OVER_TARGETS = "over_targets"

STOCHASTIC_TOL = 1e-9

# Instrumentation: how many times an anchor-target relation matrix has been
# constructed in this process. Evaluation must build it exactly once per run.
_relation_builds = 0


def relation_build_count() -> int:
    return _relation_builds


def reset_relation_build_count() -> None:
    global _relation_builds
    _relation_builds = 0


def _count_build() -> None:
    global _relation_builds
    _relation_builds += 1


@dataclass(frozen=True)
class RelationMatrix:
    """C_tar x C_anc matrix of temperature-softmaxed similarities.

    ``normalization`` is ``over_anchors`` (rows sum to 1) or ``over_targets``
    (columns sum to 1). Matrices built by the constructors below have entries
    in (0, 1]; directly constructed diagnostic matrices may contain zeros.
    """

    values: np.ndarray
    normalization: str
    temperature: float

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"relation matrix must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("relation matrix contains non-finite values")
        if values.min() < 0.0 or values.max() > 1.0 + 1e-12:
            raise ValueError("relation matrix entries must lie in [0, 1]")
        if self.normalization == OVER_ANCHORS:
            sums = values.sum(axis=1)
        elif self.normalization == OVER_TARGETS:
            sums = values.sum(axis=0)
        else:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if np.abs(sums - 1.0).max() > STOCHASTIC_TOL:
            axis = "row" if self.normalization == OVER_ANCHORS else "column"
            raise ValueError(f"{axis} sums deviate from 1 by {np.abs(sums - 1.0).max():.3g}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "values", values)

    @property
    def c_tar(self) -> int:
        return self.values.shape[0]

    @property
    def c_anc(self) -> int:
        return self.values.shape[1]


def _unit_rows_f64(x) -> np.ndarray:
    """Float64 rows of an EmbeddingMatrix (normalized flag required) or a raw
    array the caller guarantees is row-normalized."""
    if isinstance(x, EmbeddingMatrix):
        if not x.normalized:
            raise ValueError("cosine kernels require unit-norm inputs (normalized flag set)")
        return x.as_float64()
    return np.asarray(x, dtype=np.float64)


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosines between rows of two unit-norm matrices.

    On normalized rows cosine is a plain dot product; the result is clamped
    to [-1, 1] against rounding. Raw float64 arrays are accepted when the
    caller has already normalized them.
    """
    a = _unit_rows_f64(a)
    b = _unit_rows_f64(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(a @ b.T, -1.0, 1.0)


def softmax(values, temperature: float) -> np.ndarray:
    """Temperature softmax of a 1-D sequence, stabilized by max-subtraction."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("softmax expects a non-empty 1-D sequence")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if not np.isfinite(values).all():
        raise ValueError("softmax input contains non-finite values")
    exps = np.exp((values - values.max()) / temperature)
    return exps / exps.sum()


def _softmax_along(matrix: np.ndarray, temperature: float, axis: int) -> np.ndarray:
    shifted = matrix - matrix.max(axis=axis, keepdims=True)
    exps = np.exp(shifted / temperature)
    return exps / exps.sum(axis=axis, keepdims=True)


def anchor_target_relation(f_tar, f_anc, tau: float) -> RelationMatrix:
    """Relation matrix with each target row softmaxed over the anchors."""
    cos = cosine_matrix(f_tar, f_anc)
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    _count_build()
    return RelationMatrix(_softmax_along(cos, tau, axis=1), OVER_ANCHORS, tau)


def target_normalized_relation(f_tar, f_anc, tau: float) -> RelationMatrix:
    """Relation matrix with each anchor column softmaxed over the targets."""
    cos = cosine_matrix(f_tar, f_anc)
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    _count_build()
    return RelationMatrix(_softmax_along(cos, tau, axis=0), OVER_TARGETS, tau)


def relation_pair(f_tar, f_anc, tau: float) -> tuple[RelationMatrix, RelationMatrix]:
    """Both normalizations from a single cosine pass; counts as one build."""
    cos = cosine_matrix(f_tar, f_anc)
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    _count_build()
    return (
        RelationMatrix(_softmax_along(cos, tau, axis=1), OVER_ANCHORS, tau),
        RelationMatrix(_softmax_along(cos, tau, axis=0), OVER_TARGETS, tau),
    )


def image_anchor_relation(f_test: np.ndarray, f_anc, tau: float) -> np.ndarray:
    """Softmax over anchors of the image-anchor cosines."""
    f_test = np.asarray(f_test, dtype=np.float64).reshape(-1)
    anchors = _unit_rows_f64(f_anc)
    if f_test.shape[0] != anchors.shape[1]:
        raise ValueError(f"dimension mismatch: {f_test.shape[0]} vs {anchors.shape[1]}")
    cos = np.clip(anchors @ f_test, -1.0, 1.0)
    return softmax(cos, tau)


def entropy(p: np.ndarray) -> float:
    """Natural-log entropy with the 0*ln(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def marginal_balance(r: RelationMatrix) -> float:
    """Normalized entropy of the per-target marginal of a column-normalized
    relation matrix: 1 for a uniform marginal, 0 for a degenerate one."""
    if r.normalization != OVER_TARGETS:
        raise ValueError("marginal_balance requires over_targets normalization")
    if r.c_tar == 1:
        return 1.0
    marginal = r.values.sum(axis=1) / r.c_anc
    return entropy(marginal) / np.log(r.c_tar)


def relation_to_csv(r: RelationMatrix, path) -> None:
    """Write the matrix row-major as CSV with 9 significant digits."""
    with open(path, "w") as out:
        for row in r.values:
            out.write(",".join(f"{v:.9g}" for v in row) + "\n")
