"""Few-shot training of anchors and transition-block parameters.

The loop is fully deterministic given the seed: shot sampling, epoch
shuffles, and the optimizer all draw from one seeded generator, and gradient
reduction order is fixed. Per-epoch records go to a CSV log; the checkpoint
directory holds one RTEB file per parameter plus JSON metadata.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from relt.embed_io import EmbeddingMatrix, LabeledImageSet
from relt.losses import cross_entropy, kmeans_1d, pp_loss  # re-exported loss surface
from relt.rtm import (
    GRAD_FIELDS,
    LossConfig,
    RtmParams,
    _gradients_raw,
    fused_scores,
    rtm_init,
    save_checkpoint,
)

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "cosine_lr",
    "cross_entropy",
    "kmeans_1d",
    "optimizer_step",
    "pp_loss",
    "sample_shots",
    "save_training_artifacts",
    "train_few_shot",
]

TRAINABLE_SETS = ("anchors_only", "rtm_only", "all")


@dataclass
class TrainConfig:
    """Few-shot training hyperparameters.

    ``epochs=None`` resolves to 100 when the dataset tag mentions eurosat and
    20 otherwise. ``batch_size`` is capped at the support-set size.
    """

    shots: int = 16
    epochs: int | None = None
    batch_size: int = 256
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    tau: float = 0.01
    tau_prime: float = 0.01
    attn_temperature: float = 0.01
    alpha: float = 1.0
    gamma: float = 0.0
    clip_scale: float = 100.0
    num_anchors: int = 80
    seed: int = 0
    trainable_set: str = "all"
    anchor_init: str = "random"
    dataset_tag: str = ""

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.shots < 1 or self.num_anchors < 1:
            raise ValueError("learning_rate, batch_size, shots, num_anchors must be positive")
        if self.weight_decay < 0 or self.alpha < 0 or self.gamma < 0:
            raise ValueError("weight_decay, alpha, gamma must be nonnegative")
        if min(self.tau, self.tau_prime, self.attn_temperature) <= 0:
            raise ValueError("temperatures must be positive")
        if self.trainable_set not in TRAINABLE_SETS:
            raise ValueError(f"trainable_set must be one of {TRAINABLE_SETS}")

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 100 if "eurosat" in self.dataset_tag.lower() else 20

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            clip_scale=self.clip_scale,
            gamma=self.gamma,
            tau=self.tau,
            tau_prime=self.tau_prime,
        )


@dataclass
class AdamState:
    """First/second moments and step count of the decoupled-decay optimizer."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def optimizer_step(
    params: dict,
    grads: dict,
    state: AdamState | None,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One decoupled-weight-decay adaptive-moment update; returns new params
    and state, leaving the inputs untouched."""
    if state is None:
        state = AdamState.zeros_like(params)
    b1, b2 = betas
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for key in params:
        if params[key].shape != grads[key].shape:
            raise ValueError(f"shape mismatch for {key!r}: {params[key].shape} vs {grads[key].shape}")
        g = grads[key]
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[key] = params[key] - lr * weight_decay * params[key] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(new_m, new_v, step)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 toward 0 at total_steps."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sample_shots(labels: np.ndarray, shots: int, seed: int) -> np.ndarray:
    """Pick ``shots`` indices per class, seeded; errors if a class is short."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        if pool.size < shots:
            raise ValueError(f"class {int(cls)} has {pool.size} samples, need {shots}")
        picked.append(rng.choice(pool, size=shots, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass
class EpochRecord:
    epoch: int
    mean_ce: float
    mean_pp: float
    total_loss: float
    support_accuracy: float
    lr: float


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    size: int
    mean_ce: float
    pp_total: float
    total_loss: float


@dataclass
class TrainResult:
    params: RtmParams
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)


def _trainable_keys(selector: str) -> tuple:
    if selector == "anchors_only":
        return ("anchor_params",)
    if selector == "rtm_only":
        return tuple(k for k in GRAD_FIELDS if k != "anchor_params")
    return GRAD_FIELDS


def train_few_shot(
    config: TrainConfig,
    support: LabeledImageSet,
    f_tar: EmbeddingMatrix,
    init: RtmParams,
) -> TrainResult:
    """Run the seeded few-shot loop and return final parameters plus logs."""
    if len(support) == 0:
        raise ValueError("support set must be nonempty")
    if config.gamma != 0.0 and f_tar.rows < 4:
        raise ValueError("gamma > 0 requires at least 4 target classes")

    features = support.features.as_float64()
    labels = support.labels
    targets = f_tar.as_float64()
    n = len(support)
    batch_size = min(config.batch_size, n)
    epochs = config.resolved_epochs()
    batches_per_epoch = math.ceil(n / batch_size)
    total_steps = max(1, epochs * batches_per_epoch)
    loss_cfg = config.loss_config()
    trainable = _trainable_keys(config.trainable_set)

    params = init.copy()
    params.attn_temperature = config.attn_temperature
    rng = np.random.default_rng(config.seed)
    state: AdamState | None = None
    result = TrainResult(params=params)

    global_step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        ce_weighted = 0.0
        pp_weighted = 0.0
        last_lr = 0.0
        for b in range(batches_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            try:
                grads, total, mean_ce, pp_total = _gradients_raw(
                    features[idx], labels[idx], params, targets, loss_cfg
                )
            except FloatingPointError as err:
                raise FloatingPointError(
                    f"training diverged: non-finite loss at epoch {epoch} batch {b}"
                ) from err
            if not np.isfinite(total):
                raise FloatingPointError(f"training diverged: non-finite loss at epoch {epoch} batch {b}")
            result.batches.append(BatchRecord(epoch, b, idx.size, mean_ce, pp_total, total))
            ce_weighted += mean_ce * idx.size
            pp_weighted += pp_total * idx.size

            last_lr = cosine_lr(global_step, total_steps, config.learning_rate)
            current = {k: getattr(params, k) for k in trainable}
            gradients = {k: grads[k] for k in trainable}
            updated, state = optimizer_step(current, gradients, state, last_lr, config.weight_decay)
            for k in trainable:
                setattr(params, k, updated[k])
            global_step += 1

        fused = fused_scores(features, params, f_tar, loss_cfg)
        accuracy = float((fused.argmax(axis=1) == labels).mean())
        mean_ce_epoch = ce_weighted / n
        mean_pp_epoch = pp_weighted / n
        result.epochs.append(
            EpochRecord(
                epoch=epoch,
                mean_ce=mean_ce_epoch,
                mean_pp=mean_pp_epoch,
                total_loss=mean_ce_epoch + config.gamma * mean_pp_epoch,
                support_accuracy=accuracy,
                lr=last_lr,
            )
        )
    return result


def save_training_artifacts(directory, result: TrainResult, config: TrainConfig) -> None:
    """Write the checkpoint, the training configuration, and the epoch CSV."""
    directory = Path(directory)
    save_checkpoint(directory, result.params)
    (directory / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    with open(directory / "training_log.csv", "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["epoch", "mean_ce", "mean_pp", "total_loss", "support_accuracy", "lr"])
        for rec in result.epochs:
            writer.writerow(
                [rec.epoch, f"{rec.mean_ce:.12g}", f"{rec.mean_pp:.12g}", f"{rec.total_loss:.12g}",
                 f"{rec.support_accuracy:.12g}", f"{rec.lr:.12g}"]
            )


def init_for_training(
    config: TrainConfig,
    f_tar: EmbeddingMatrix,
    dim: int,
    anchor_features: EmbeddingMatrix | None = None,
) -> RtmParams:
    """Starting parameters per config: standard trainable initialization
    (near-identity projections, small random feed-forward), anchors either
    from supplied features or unit-Gaussian rows from the run seed."""
    if anchor_features is not None:
        return rtm_init(
            f_tar.rows,
            anchor_features.rows,
            dim,
            mode="random",
            anchors=anchor_features,
            seed=config.seed,
            attn_temperature=config.attn_temperature,
        )
    if config.anchor_init != "random":
        raise ValueError(f"anchor_init {config.anchor_init!r} needs anchor features")
    return rtm_init(
        f_tar.rows,
        config.num_anchors,
        dim,
        mode="random",
        seed=config.seed,
        attn_temperature=config.attn_temperature,
    )
