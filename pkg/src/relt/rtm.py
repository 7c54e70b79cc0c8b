"""Trainable relation-transition block with exact analytic gradients.

One cross-attention head: the image feature is the query, row-normalized
anchor vectors are the keys, and the columns of the anchor-target relation
matrix are the values, followed by a pre-norm two-layer ReLU feed-forward
with a residual connection on the C_tar-dimensional head output. With
identity projections and zero feed-forward weights the forward reduces
exactly to the training-free product R @ softmax(f A^T / t).

All arithmetic is 64-bit. The backward is hand-derived and verified against
central finite differences (see gradcheck); gradients flow through the anchor
row-normalization and through the relation softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from relt.embed_io import EmbeddingMatrix, LabeledImageSet, load_embeddings, save_embeddings
from relt.losses import pp_loss_raw

LN_EPS = 1e-5
EXPANSION = 4

GRAD_FIELDS = (
    "anchor_params",
    "w_q",
    "w_k",
    "ffn_w1",
    "ffn_b1",
    "ffn_w2",
    "ffn_b2",
    "ln_gain",
    "ln_bias",
)


@dataclass
class RtmParams:
    """Parameters of the relation-transition block (all float64).

    ``attn_temperature`` is a fixed hyperparameter, not part of the gradient
    record. ``init_mode``/``seed`` are provenance metadata for checkpoints.
    """

    anchor_params: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    attn_temperature: float = 0.01
    init_mode: str = "identity"
    seed: int | None = None

    def __post_init__(self):
        for name in GRAD_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        c_anc, d = self.anchor_params.shape
        c_tar, hidden = self.ffn_w1.shape
        if self.w_q.shape != (d, d) or self.w_k.shape != (d, d):
            raise ValueError(f"projection shapes {self.w_q.shape}/{self.w_k.shape} do not match d={d}")
        if self.ffn_b1.shape != (hidden,) or self.ffn_w2.shape != (hidden, c_tar):
            raise ValueError("feed-forward shapes are inconsistent")
        if self.ffn_b2.shape != (c_tar,) or self.ln_gain.shape != (c_tar,) or self.ln_bias.shape != (c_tar,):
            raise ValueError("output-sized vectors must have length c_tar")
        if self.attn_temperature <= 0.0:
            raise ValueError("attn_temperature must be positive")
        for name in GRAD_FIELDS:
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.anchor_params, axis=1)
        if (norms == 0.0).any():
            raise ValueError(f"zero-norm anchor row {int(np.argmax(norms == 0.0))}")

    @property
    def c_tar(self) -> int:
        return self.ffn_w1.shape[0]

    @property
    def c_anc(self) -> int:
        return self.anchor_params.shape[0]

    @property
    def d(self) -> int:
        return self.anchor_params.shape[1]

    @property
    def hidden(self) -> int:
        return self.ffn_w1.shape[1]

    def grad_arrays(self) -> dict:
        return {name: getattr(self, name) for name in GRAD_FIELDS}

    def copy(self) -> "RtmParams":
        return replace(self, **{name: getattr(self, name).copy() for name in GRAD_FIELDS})


def rtm_init(
    c_tar: int,
    c_anc: int,
    d: int,
    mode: str = "identity",
    anchors: EmbeddingMatrix | np.ndarray | None = None,
    seed: int = 0,
    attn_temperature: float = 0.01,
) -> RtmParams:
    """Build parameters: identity projections with a zero feed-forward
    (exactly reproducing the training-free path), or standard trainable
    initialization with near-identity projections and small random
    feed-forward weights; anchors come from given features or unit-Gaussian
    rows. A zero feed-forward is a gradient saddle (no activation means no
    weight gradients), so the random mode seeds it off zero."""
    if min(c_tar, c_anc, d) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    hidden = EXPANSION * c_tar
    if mode == "identity":
        w_q = np.eye(d)
        w_k = np.eye(d)
        ffn_w1 = np.zeros((c_tar, hidden))
        ffn_w2 = np.zeros((hidden, c_tar))
    elif mode == "random":
        w_q = np.eye(d) + 0.01 * rng.standard_normal((d, d))
        w_k = np.eye(d) + 0.01 * rng.standard_normal((d, d))
        ffn_w1 = 0.02 * rng.standard_normal((c_tar, hidden))
        ffn_w2 = 0.02 * rng.standard_normal((hidden, c_tar))
    else:
        raise ValueError(f"unknown init mode {mode!r}")

    if anchors is None:
        anchor_params = rng.standard_normal((c_anc, d))
    else:
        anchor_params = anchors.as_float64() if isinstance(anchors, EmbeddingMatrix) else np.asarray(anchors, dtype=np.float64)
        if anchor_params.shape != (c_anc, d):
            raise ValueError(f"anchor features shape {anchor_params.shape} does not match ({c_anc}, {d})")
        anchor_params = anchor_params.copy()

    return RtmParams(
        anchor_params=anchor_params,
        w_q=w_q,
        w_k=w_k,
        ffn_w1=ffn_w1,
        ffn_b1=np.zeros(hidden),
        ffn_w2=ffn_w2,
        ffn_b2=np.zeros(c_tar),
        ln_gain=np.ones(c_tar),
        ln_bias=np.zeros(c_tar),
        attn_temperature=attn_temperature,
        init_mode=mode,
        seed=seed,
    )


def effective_anchors(params: RtmParams) -> np.ndarray:
    """Row-normalized anchors actually used by the forward pass (float64)."""
    norms = np.linalg.norm(params.anchor_params, axis=1)
    if (norms == 0.0).any():
        raise ValueError(f"zero-norm anchor row {int(np.argmax(norms == 0.0))}")
    return params.anchor_params / norms[:, None]


def _softmax_rows(scores: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(shifted / temperature) if temperature != 1.0 else np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _anchor_stage(params: RtmParams, targets: np.ndarray, tau_rel: float) -> dict:
    """Anchor normalization and the relation matrix (independent of images)."""
    norms = np.linalg.norm(params.anchor_params, axis=1)
    if (norms == 0.0).any():
        raise ValueError(f"zero-norm anchor row {int(np.argmax(norms == 0.0))}")
    anchors = params.anchor_params / norms[:, None]
    s_raw = targets @ anchors.T
    s = np.clip(s_raw, -1.0, 1.0)
    relation = _softmax_rows(s, tau_rel)
    return {"anchors": anchors, "norms": norms, "s_raw": s_raw, "s": s, "relation": relation}


def _attention_stage(f_img: np.ndarray, params: RtmParams, anchors: np.ndarray, relation: np.ndarray) -> dict:
    q = f_img @ params.w_q
    k = anchors @ params.w_k
    attn = _softmax_rows(q @ k.T, params.attn_temperature)
    head = attn @ relation.T
    return {"q": q, "k": k, "attn": attn, "head": head}


def _layer_norm_stage(head: np.ndarray, params: RtmParams) -> dict:
    mu = head.mean(axis=1, keepdims=True)
    var = ((head - mu) ** 2).mean(axis=1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    head_hat = (head - mu) / sigma
    normed = head_hat * params.ln_gain + params.ln_bias
    return {"sigma": sigma, "head_hat": head_hat, "normed": normed}


def _ffn_stage(head: np.ndarray, normed: np.ndarray, params: RtmParams) -> dict:
    pre_act = normed @ params.ffn_w1 + params.ffn_b1
    act = np.maximum(pre_act, 0.0)
    output = head + act @ params.ffn_w2 + params.ffn_b2
    return {"pre_act": pre_act, "act": act, "output": output}


def _forward_batch(f_img: np.ndarray, params: RtmParams, targets: np.ndarray, tau_rel: float) -> dict:
    """Forward pass for a (B, D) batch; returns every intermediate needed by
    the backward pass."""
    if tau_rel <= 0.0:
        raise ValueError("tau_rel must be positive")
    if f_img.shape[1] != params.d or targets.shape[1] != params.d:
        raise ValueError(
            f"dimension mismatch: images {f_img.shape[1]}, anchors {params.d}, targets {targets.shape[1]}"
        )
    if targets.shape[0] != params.c_tar:
        raise ValueError(f"targets rows {targets.shape[0]} do not match c_tar {params.c_tar}")

    cache = _anchor_stage(params, targets, tau_rel)
    cache.update(_attention_stage(f_img, params, cache["anchors"], cache["relation"]))
    cache.update(_layer_norm_stage(cache["head"], params))
    cache.update(_ffn_stage(cache["head"], cache["normed"], params))
    return cache


def rtm_forward(f_test: np.ndarray, params: RtmParams, f_tar: EmbeddingMatrix, tau_rel: float) -> np.ndarray:
    """Logits over the target classes for a single image feature."""
    f_test = np.asarray(f_test, dtype=np.float64).reshape(1, -1)
    cache = _forward_batch(f_test, params, f_tar.as_float64(), tau_rel)
    return cache["output"][0]


def forward_batch(f_img: np.ndarray, params: RtmParams, f_tar: EmbeddingMatrix, tau_rel: float) -> np.ndarray:
    """Logits for a (B, D) batch of image features."""
    f_img = np.asarray(f_img, dtype=np.float64)
    return _forward_batch(f_img, params, f_tar.as_float64(), tau_rel)["output"]


@dataclass
class LossConfig:
    """Training-loss configuration.

    The prediction of record fuses probabilities: P_final is the classifier
    softmax (clip_scale * cos) plus alpha times the block's output softmaxed
    at temperature tau_prime, normalized by (1 + alpha); the loss is its
    cross-entropy plus gamma times the anchor-prior loss of the
    column-normalized relation of the current anchors. ``fusion="logit"``
    instead trains on clip_scale * cos + alpha * output directly. ``tau`` is
    both the relation temperature inside the block and the prior-loss
    temperature.
    """

    alpha: float = 1.0
    clip_scale: float = 100.0
    gamma: float = 0.0
    tau: float = 0.01
    tau_prime: float = 0.01
    fusion: str = "probability"


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _fused_ce(
    f_img: np.ndarray,
    labels: np.ndarray,
    output: np.ndarray,
    targets: np.ndarray,
    cfg: LossConfig,
    clip_logits: np.ndarray | None = None,
):
    """Mean cross-entropy of the fused prediction plus what the backward
    needs: (mean_ce, g_out-without-1/B, fused_scores)."""
    rows = np.arange(labels.shape[0])
    if clip_logits is None:
        clip_logits = cfg.clip_scale * np.clip(f_img @ targets.T, -1.0, 1.0)
    if cfg.fusion == "logit":
        logits = clip_logits + cfg.alpha * output
        log_probs = _log_softmax_rows(logits)
        mean_ce = float(-log_probs[rows, labels].mean())
        probs = np.exp(log_probs)
        g = probs.copy()
        g[rows, labels] -= 1.0
        return mean_ce, cfg.alpha * g, logits
    if cfg.fusion != "probability":
        raise ValueError(f"unknown fusion mode {cfg.fusion!r}")
    p_clip = np.exp(_log_softmax_rows(clip_logits))
    q = np.exp(_log_softmax_rows(output / cfg.tau_prime))
    fused = (p_clip + cfg.alpha * q) / (1.0 + cfg.alpha)
    s = p_clip[rows, labels] + cfg.alpha * q[rows, labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_ce = float(-(np.log(s) - np.log1p(cfg.alpha)).mean())
        # d(-ln s)/d(output) through the tau_prime softmax of the block output
        coeff = (cfg.alpha * q[rows, labels] / s)[:, None] / cfg.tau_prime
    g = q.copy()
    g[rows, labels] -= 1.0
    return mean_ce, coeff * g, fused


def batch_loss(
    f_img: np.ndarray,
    labels: np.ndarray,
    params: RtmParams,
    targets: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, float, float]:
    """(total, mean_ce, pp_total) of the configured loss on one batch."""
    cache = _forward_batch(f_img, params, targets, cfg.tau)
    mean_ce, _, _ = _fused_ce(f_img, labels, cache["output"], targets, cfg)
    pp_total = 0.0
    if cfg.gamma != 0.0:
        p_cols = _softmax_rows(cache["s"].T, cfg.tau).T  # column softmax over targets
        pp_total = pp_loss_raw(p_cols).total
    return mean_ce + cfg.gamma * pp_total, mean_ce, pp_total


def _gradients_raw(
    f_img: np.ndarray,
    labels: np.ndarray,
    params: RtmParams,
    targets: np.ndarray,
    cfg: LossConfig,
) -> tuple[dict, float, float, float]:
    """Analytic gradients of the configured loss for a (B, D) batch.

    Returns (grads, total_loss, mean_ce, pp_total); the cross-entropy part is
    mean-reduced over the batch, the prior part enters once.
    """
    batch = f_img.shape[0]
    cache = _forward_batch(f_img, params, targets, cfg.tau)
    anchors, norms = cache["anchors"], cache["norms"]
    relation, attn = cache["relation"], cache["attn"]

    mean_ce, g_out_unreduced, fused = _fused_ce(f_img, labels, cache["output"], targets, cfg)
    if not np.isfinite(mean_ce):
        per_sample_finite = np.isfinite(fused).all(axis=1)
        bad = int(np.argmax(~per_sample_finite)) if not per_sample_finite.all() else 0
        raise FloatingPointError(f"non-finite loss at sample {bad}")
    g_out = g_out_unreduced / batch

    # feed-forward and layer norm
    g_b2 = g_out.sum(axis=0)
    g_w2 = cache["act"].T @ g_out
    g_act = g_out @ params.ffn_w2.T
    g_pre = g_act * (cache["pre_act"] > 0.0)
    g_b1 = g_pre.sum(axis=0)
    g_w1 = cache["normed"].T @ g_pre
    g_normed = g_pre @ params.ffn_w1.T
    g_gain = (g_normed * cache["head_hat"]).sum(axis=0)
    g_bias = g_normed.sum(axis=0)
    g_hat = g_normed * params.ln_gain
    hat = cache["head_hat"]
    g_head = g_out + (
        g_hat - g_hat.mean(axis=1, keepdims=True) - hat * (g_hat * hat).mean(axis=1, keepdims=True)
    ) / cache["sigma"]

    # attention head: head = attn @ relation.T
    g_attn = g_head @ relation
    g_relation = g_head.T @ attn
    g_u = attn * (g_attn - (attn * g_attn).sum(axis=1, keepdims=True))
    g_q = (g_u @ cache["k"]) / params.attn_temperature
    g_k = (g_u.T @ cache["q"]) / params.attn_temperature
    g_w_q = f_img.T @ g_q
    g_w_k = anchors.T @ g_k
    g_anchors = g_k @ params.w_k.T

    # relation softmax rows back to cosines
    g_s = (relation * (g_relation - (relation * g_relation).sum(axis=1, keepdims=True))) / cfg.tau

    pp_total = 0.0
    if cfg.gamma != 0.0:
        p_cols = _softmax_rows(cache["s"].T, cfg.tau).T
        report, g_p = pp_loss_raw(p_cols, with_grad=True)
        pp_total = report.total
        g_p = cfg.gamma * g_p
        g_s += (p_cols * (g_p - (p_cols * g_p).sum(axis=0, keepdims=True))) / cfg.tau

    g_s *= np.abs(cache["s_raw"]) <= 1.0  # clamp pass-through
    g_anchors += g_s.T @ targets

    # anchor row-normalization: A_i = Z_i / |Z_i|
    radial = (anchors * g_anchors).sum(axis=1, keepdims=True)
    g_anchor_params = (g_anchors - anchors * radial) / norms[:, None]

    grads = {
        "anchor_params": g_anchor_params,
        "w_q": g_w_q,
        "w_k": g_w_k,
        "ffn_w1": g_w1,
        "ffn_b1": g_b1,
        "ffn_w2": g_w2,
        "ffn_b2": g_b2,
        "ln_gain": g_gain,
        "ln_bias": g_bias,
    }
    return grads, mean_ce + cfg.gamma * pp_total, mean_ce, pp_total


def fused_scores(
    f_img: np.ndarray,
    params: RtmParams,
    f_tar: EmbeddingMatrix | np.ndarray,
    cfg: LossConfig,
) -> np.ndarray:
    """Fused prediction scores of record for a (B, D) batch: the probability
    fusion (softmaxed classifier plus alpha times the tau_prime-softmaxed
    block output, normalized) or the raw logit fusion per the config."""
    f_img = np.asarray(f_img, dtype=np.float64)
    targets = f_tar.as_float64() if isinstance(f_tar, EmbeddingMatrix) else np.asarray(f_tar, dtype=np.float64)
    output = _forward_batch(f_img, params, targets, cfg.tau)["output"]
    clip_logits = cfg.clip_scale * np.clip(f_img @ targets.T, -1.0, 1.0)
    if cfg.fusion == "logit":
        return clip_logits + cfg.alpha * output
    p_clip = np.exp(_log_softmax_rows(clip_logits))
    q = np.exp(_log_softmax_rows(output / cfg.tau_prime))
    return (p_clip + cfg.alpha * q) / (1.0 + cfg.alpha)


def rtm_gradients(
    batch: LabeledImageSet,
    params: RtmParams,
    f_tar: EmbeddingMatrix,
    cfg: LossConfig,
) -> tuple[dict, float]:
    """Exact gradient record (one array per trainable field) and the scalar
    loss, mean-reduced over the batch."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    grads, total, _, _ = _gradients_raw(
        batch.features.as_float64(), batch.labels, params, f_tar.as_float64(), cfg
    )
    return grads, total


def save_checkpoint(directory, params: RtmParams, extra: dict | None = None) -> None:
    """Serialize parameters: one RTEB file per field plus params.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in GRAD_FIELDS:
        arr = getattr(params, name)
        shapes[name] = list(arr.shape)
        matrix = arr.reshape(1, -1) if arr.ndim == 1 else arr
        save_embeddings(EmbeddingMatrix(matrix.astype(np.float32)), directory / f"{name}.rteb")
    meta = {
        "c_tar": params.c_tar,
        "c_anc": params.c_anc,
        "d": params.d,
        "hidden": params.hidden,
        "attn_temperature": params.attn_temperature,
        "init_mode": params.init_mode,
        "seed": params.seed,
        "shapes": shapes,
    }
    if extra:
        meta.update(extra)
    (directory / "params.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[RtmParams, dict]:
    """Load a checkpoint directory back into parameters plus its metadata."""
    directory = Path(directory)
    meta = json.loads((directory / "params.json").read_text())
    fields = {}
    for name in GRAD_FIELDS:
        arr = load_embeddings(directory / f"{name}.rteb").as_float64()
        fields[name] = arr.reshape(meta["shapes"][name])
    params = RtmParams(
        **fields,
        attn_temperature=float(meta["attn_temperature"]),
        init_mode=meta.get("init_mode", "identity"),
        seed=meta.get("seed"),
    )
    return params, meta
