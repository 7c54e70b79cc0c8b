"""Metrics, evaluation runs, and anchor diagnostics.

An evaluation run builds the anchor-target relation structures exactly once,
then scores every test image; reports and per-image prediction dumps are
byte-deterministic with a stable key order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from relt.embed_io import DatasetBundle, EmbeddingMatrix
from relt.losses import kmeans_1d, uniformity
from relt.relations import (
    OVER_TARGETS,
    RelationMatrix,
    marginal_balance,
    relation_pair,
    relation_to_csv,
    target_normalized_relation,
)
from relt.rtm import LossConfig, RtmParams, effective_anchors, forward_batch, fused_scores
from relt.transition import CONSISTENCY, IMAGE_IMAGE, RTM, TOTAL_PROB, ZeroShotConfig, fuse, zero_shot_predict

UNIFORM_FLAG_THRESHOLD = 0.99


def top1_accuracy(predictions, labels) -> float:
    """Fraction of samples whose highest score (lowest index on ties) matches
    the label."""
    scores = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("predictions must be a nonempty sequence of score vectors")
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("predictions and labels lengths differ")
    return float((scores.argmax(axis=1) == labels).mean())


@dataclass
class EvalReport:
    top1_accuracy: float
    per_class_accuracy: list
    branch_accuracies: dict
    marginal_balance: float | None
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "branch_accuracies": {k: self.branch_accuracies[k] for k in sorted(self.branch_accuracies)},
            "marginal_balance": self.marginal_balance,
            "sample_count": self.sample_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class EvalResult:
    report: EvalReport
    dump_lines: list

    def write_report(self, path) -> None:
        Path(path).write_text(self.report.to_json())

    def write_dump(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.dump_lines))


def _per_class_accuracy(fused: np.ndarray, labels: np.ndarray, class_count: int) -> list:
    hits = fused.argmax(axis=1) == labels
    out = []
    for cls in range(class_count):
        mask = labels == cls
        out.append(float(hits[mask].mean()) if mask.any() else 0.0)
    return out


def _dump_line(index: int, clip_vec: np.ndarray, branches: dict, fused_vec: np.ndarray) -> str:
    record = {
        "image_index": index,
        "clip_argmax": int(np.argmax(clip_vec)),
        "fused_argmax": int(np.argmax(fused_vec)),
        "per_branch_argmax": {name: int(np.argmax(vec)) for name, vec in sorted(branches.items())},
        "fused_scores": [float(v) for v in fused_vec],
    }
    return json.dumps(record)


def evaluate_zero_shot(bundle: DatasetBundle, config: ZeroShotConfig) -> EvalResult:
    """Training-free evaluation over every image in the bundle."""
    anchors = bundle.anchors
    variants = tuple(config.variants)
    needs_relation = any(v in (CONSISTENCY, TOTAL_PROB) for v in variants)
    relations = None
    balance = None
    if needs_relation:
        if anchors is None:
            raise ValueError("requested variants need anchors, but the bundle has none")
        relations = relation_pair(bundle.targets, anchors, config.tau)
        balance = marginal_balance(relations[1])

    images = bundle.images.as_float64()
    labels = bundle.labels
    clip_rows, fused_rows, branch_rows, lines = [], [], {}, []
    for i in range(images.shape[0]):
        pred = zero_shot_predict(images[i], bundle.targets, anchors, config, relations=relations)
        clip_rows.append(pred.clip_scores)
        fused_rows.append(pred.fused)
        for name, vec in pred.branch_scores.items():
            branch_rows.setdefault(name, []).append(vec)
        lines.append(_dump_line(i, pred.clip_scores, pred.branch_scores, pred.fused))

    fused = np.vstack(fused_rows)
    branch_accuracies = {"clip": top1_accuracy(np.vstack(clip_rows), labels)}
    for name, rows in branch_rows.items():
        branch_accuracies[name] = top1_accuracy(np.vstack(rows), labels)
    report = EvalReport(
        top1_accuracy=top1_accuracy(fused, labels),
        per_class_accuracy=_per_class_accuracy(fused, labels, bundle.class_count),
        branch_accuracies=branch_accuracies,
        marginal_balance=balance,
        sample_count=int(labels.shape[0]),
    )
    return EvalResult(report, lines)


def evaluate_checkpoint(
    bundle: DatasetBundle,
    params: RtmParams,
    alpha: float = 1.0,
    clip_scale: float = 100.0,
    tau: float = 0.01,
    tau_prime: float = 0.01,
    fusion: str = "probability",
) -> EvalResult:
    """Evaluate a trained block with the fused prediction of record; the
    relation structures are built once."""
    images = bundle.images.as_float64()
    labels = bundle.labels
    targets64 = bundle.targets.as_float64()

    cfg = LossConfig(alpha=alpha, clip_scale=clip_scale, tau=tau, tau_prime=tau_prime, fusion=fusion)
    clip_logits = clip_scale * np.clip(images @ targets64.T, -1.0, 1.0)
    rtm_logits = forward_batch(images, params, bundle.targets, tau)
    fused = fused_scores(images, params, bundle.targets, cfg)
    anchors_f32 = EmbeddingMatrix(effective_anchors(params).astype(np.float32), normalized=True)
    balance = marginal_balance(target_normalized_relation(bundle.targets, anchors_f32, tau))

    lines = []
    for i in range(images.shape[0]):
        lines.append(_dump_line(i, clip_logits[i], {RTM: rtm_logits[i]}, fused[i]))

    report = EvalReport(
        top1_accuracy=top1_accuracy(fused, labels),
        per_class_accuracy=_per_class_accuracy(fused, labels, bundle.class_count),
        branch_accuracies={
            "clip": top1_accuracy(clip_logits, labels),
            RTM: top1_accuracy(rtm_logits, labels),
        },
        marginal_balance=balance,
        sample_count=int(labels.shape[0]),
    )
    return EvalResult(report, lines)


def evaluate(bundle: DatasetBundle, config) -> EvalResult:
    """Dispatch on a ZeroShotConfig or (RtmParams, kwargs) checkpoint tuple."""
    if isinstance(config, ZeroShotConfig):
        return evaluate_zero_shot(bundle, config)
    if isinstance(config, RtmParams):
        return evaluate_checkpoint(bundle, config)
    if isinstance(config, tuple) and isinstance(config[0], RtmParams):
        return evaluate_checkpoint(bundle, config[0], **config[1])
    raise TypeError(f"cannot evaluate with config of type {type(config).__name__}")


@dataclass
class InspectionReport:
    """Anchor-quality diagnostics of the relation structures."""

    over_anchors: RelationMatrix
    over_targets: RelationMatrix
    balance: float
    top_cluster_sizes: np.ndarray
    one_hot_flags: np.ndarray
    uniform_flags: np.ndarray

    def to_dict(self, include_balance: bool = True) -> dict:
        out = {
            "top_cluster_sizes": [int(s) for s in self.top_cluster_sizes],
            "one_hot_anchor_count": int(self.one_hot_flags.sum()),
            "uniform_anchor_count": int(self.uniform_flags.sum()),
            "one_hot_flag": bool(self.one_hot_flags.any()),
            "uniform_flag": bool(self.uniform_flags.any()),
        }
        if include_balance:
            out["marginal_balance"] = self.balance
        return out


def inspect_relations(f_tar: EmbeddingMatrix, f_anc: EmbeddingMatrix, tau: float) -> InspectionReport:
    """Both relation normalizations plus the anchor-pattern red flags: anchor
    columns whose top k-means cluster is a singleton (one-hot-like) and
    columns whose normalized entropy exceeds 0.99 (uniform-like)."""
    over_anchors, over_targets = relation_pair(f_tar, f_anc, tau)
    sizes = np.zeros(over_targets.c_anc, dtype=np.int64)
    uniform = np.zeros(over_targets.c_anc, dtype=bool)
    for j in range(over_targets.c_anc):
        column = over_targets.values[:, j]
        sizes[j] = kmeans_1d(column, 3).top_cluster_size if column.size >= 3 else column.size
        uniform[j] = uniformity(column) > UNIFORM_FLAG_THRESHOLD
    return InspectionReport(
        over_anchors=over_anchors,
        over_targets=over_targets,
        balance=marginal_balance(over_targets),
        top_cluster_sizes=sizes,
        one_hot_flags=sizes == 1,
        uniform_flags=uniform,
    )


def write_heatmap_csvs(report: InspectionReport, path) -> tuple[Path, Path]:
    """Write the row-normalized matrix to ``path`` and the column-normalized
    one next to it with an ``.over_targets`` infix."""
    path = Path(path)
    sibling = path.with_name(path.stem + ".over_targets" + path.suffix)
    relation_to_csv(report.over_anchors, path)
    relation_to_csv(report.over_targets, sibling)
    return path, sibling
