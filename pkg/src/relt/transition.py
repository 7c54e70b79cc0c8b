"""Training-free relation transitions and fusion with the frozen classifier.

Three branches turn an image-anchor probability vector into image-target
scores: cosine matching against relation-matrix rows (consistency prior),
a stochastic-matrix product (total probability), and a labeled-support
attention lookup (image-image). In zero-shot mode all terms are probability
vectors; the trained path fuses in logit space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from relt.embed_io import EmbeddingMatrix, LabeledImageSet
from relt.relations import (
    OVER_ANCHORS,
    OVER_TARGETS,
    RelationMatrix,
    image_anchor_relation,
    relation_pair,
    softmax,
)

CONSISTENCY = "consistency"
TOTAL_PROB = "total_prob"
IMAGE_IMAGE = "image_image"
RTM = "rtm"


@dataclass(frozen=True)
class PredictionBundle:
    """Per-image scores: frozen-classifier branch, transition branches, and
    their weighted fusion. fused == clip_scores + sum(alpha_b * branch_b)."""

    clip_scores: np.ndarray
    branch_scores: dict
    alphas: dict
    fused: np.ndarray

    def __post_init__(self):
        n = self.clip_scores.shape[0]
        for name, scores in self.branch_scores.items():
            if scores.shape != (n,):
                raise ValueError(f"branch {name!r} has shape {scores.shape}, expected ({n},)")
        if self.fused.shape != (n,):
            raise ValueError("fused scores length mismatch")

    @property
    def clip_argmax(self) -> int:
        return int(np.argmax(self.clip_scores))

    @property
    def fused_argmax(self) -> int:
        return int(np.argmax(self.fused))


def clip_scores(
    f_test: np.ndarray, f_tar: EmbeddingMatrix, scale: float, as_probabilities: bool = False
) -> np.ndarray:
    """Frozen-classifier scores: scale * cos(f_test, target_i), optionally
    softmaxed into probabilities."""
    f_test = np.asarray(f_test, dtype=np.float64).reshape(-1)
    if f_test.shape[0] != f_tar.dim:
        raise ValueError(f"dimension mismatch: {f_test.shape[0]} vs {f_tar.dim}")
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    scores = scale * np.clip(f_tar.as_float64() @ f_test, -1.0, 1.0)
    return softmax(scores, 1.0) if as_probabilities else scores


def consistency_transition(p_anc: np.ndarray, r: RelationMatrix, tau_prime: float) -> np.ndarray:
    """Softmax over targets of cos(p_anc, row_i(R)) / tau_prime.

    Rows of R are treated as raw C_anc-vectors; the result is invariant to
    positive rescaling of p_anc.
    """
    p_anc = np.asarray(p_anc, dtype=np.float64).reshape(-1)
    if r.normalization != OVER_ANCHORS:
        raise ValueError("consistency_transition requires over_anchors normalization")
    if p_anc.shape[0] != r.c_anc:
        raise ValueError(f"p_anc length {p_anc.shape[0]} does not match {r.c_anc} anchors")
    p_norm = np.linalg.norm(p_anc)
    if p_norm == 0.0:
        raise ValueError("zero-norm image-anchor vector")
    row_norms = np.linalg.norm(r.values, axis=1)
    if (row_norms == 0.0).any():
        raise ValueError(f"zero-norm relation row {int(np.argmax(row_norms == 0.0))}")
    cos = (r.values @ p_anc) / (row_norms * p_norm)
    return softmax(np.clip(cos, -1.0, 1.0), tau_prime)


def total_probability_transition(p_anc: np.ndarray, r: RelationMatrix) -> np.ndarray:
    """Stochastic-matrix transition R @ p_anc over a column-normalized R."""
    p_anc = np.asarray(p_anc, dtype=np.float64).reshape(-1)
    if r.normalization != OVER_TARGETS:
        raise ValueError("total_probability_transition requires over_targets normalization")
    if p_anc.shape[0] != r.c_anc:
        raise ValueError(f"p_anc length {p_anc.shape[0]} does not match {r.c_anc} anchors")
    return r.values @ p_anc


def image_image_transition(
    f_test: np.ndarray,
    f_train: EmbeddingMatrix,
    labels: np.ndarray,
    class_count: int,
    tau: float,
) -> np.ndarray:
    """Attention over labeled support images, aggregated onto one-hot labels."""
    if f_train.rows == 0:
        raise ValueError("empty training set")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != f_train.rows:
        raise ValueError("labels length does not match training rows")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError("label out of range")
    attention = image_anchor_relation(f_test, f_train, tau)
    out = np.zeros(class_count, dtype=np.float64)
    np.add.at(out, labels, attention)
    return out


def fuse(clip: np.ndarray, branch_scores: dict, alphas: dict) -> PredictionBundle:
    """Weighted sum of branch scores onto the frozen-classifier scores.

    Branches with alpha == 0 are skipped so that the all-zero case reproduces
    the baseline scores bitwise.
    """
    clip = np.asarray(clip, dtype=np.float64).reshape(-1)
    fused = clip.copy()
    for name, scores in branch_scores.items():
        if name not in alphas:
            raise ValueError(f"missing alpha for branch {name!r}")
        alpha = float(alphas[name])
        if alpha < 0.0:
            raise ValueError(f"alpha for branch {name!r} must be nonnegative")
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if scores.shape != clip.shape:
            raise ValueError(f"branch {name!r} length {scores.shape[0]} != {clip.shape[0]}")
        if alpha != 0.0:
            fused = fused + alpha * scores
    return PredictionBundle(
        clip_scores=clip,
        branch_scores={k: np.asarray(v, dtype=np.float64) for k, v in branch_scores.items()},
        alphas={k: float(alphas[k]) for k in branch_scores},
        fused=fused,
    )


@dataclass
class ZeroShotConfig:
    """Configuration of the training-free prediction path.

    ``clip_scale`` defaults to 1/tau. ``alphas`` may be a single float applied
    to every requested branch or a per-branch map. The image-image branch
    requires ``support``.
    """

    tau: float = 0.01
    tau_prime: float = 0.01
    alphas: float | dict = 1.0
    variants: tuple = (CONSISTENCY,)
    clip_scale: float | None = None
    support: LabeledImageSet | None = None

    def resolved_scale(self) -> float:
        return 1.0 / self.tau if self.clip_scale is None else self.clip_scale

    def alpha_map(self) -> dict:
        if isinstance(self.alphas, dict):
            return {name: float(self.alphas.get(name, 1.0)) for name in self.variants}
        return {name: float(self.alphas) for name in self.variants}


def zero_shot_predict(
    f_test: np.ndarray,
    f_tar: EmbeddingMatrix,
    f_anc: EmbeddingMatrix | None,
    config: ZeroShotConfig,
    relations: tuple[RelationMatrix, RelationMatrix] | None = None,
) -> PredictionBundle:
    """Training-free prediction for one image: classifier probabilities plus
    each requested transition branch, fused with the configured weights.

    ``relations`` takes a precomputed (over_anchors, over_targets) pair so the
    relation matrix is built once per evaluation run, not once per image.
    """
    probs = clip_scores(f_test, f_tar, config.resolved_scale(), as_probabilities=True)
    variants = tuple(config.variants)
    branch_scores: dict = {}
    if variants and any(v in (CONSISTENCY, TOTAL_PROB) for v in variants):
        if f_anc is None:
            raise ValueError("consistency/total_prob variants require anchors")
        if relations is None:
            relations = relation_pair(f_tar, f_anc, config.tau)
        over_anchors, over_targets = relations
        p_anc = image_anchor_relation(f_test, f_anc, config.tau)
        if CONSISTENCY in variants:
            branch_scores[CONSISTENCY] = consistency_transition(p_anc, over_anchors, config.tau_prime)
        if TOTAL_PROB in variants:
            branch_scores[TOTAL_PROB] = total_probability_transition(p_anc, over_targets)
    if IMAGE_IMAGE in variants:
        if config.support is None:
            raise ValueError("image_image variant requires a support set")
        branch_scores[IMAGE_IMAGE] = image_image_transition(
            f_test,
            config.support.features,
            config.support.labels,
            config.support.class_count,
            config.tau,
        )
    return fuse(probs, branch_scores, config.alpha_map())
