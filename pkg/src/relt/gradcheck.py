"""Finite-difference verification of the analytic gradients.

Central differences with step 1e-5 over every scalar parameter, on randomly
sized configurations. Temperatures are sampled in [0.25, 2]: the production
default 0.01 saturates the softmaxes, where finite differences lose all
significant digits and verify nothing; the backward formulas do not depend on
the temperature value.

Perturbing a parameter only re-evaluates the stages downstream of it (a
perturbed feed-forward weight cannot change the relation matrix); the staged
evaluation is asserted bit-identical to the reference loss at the unperturbed
point, so the differences still probe exactly the trained loss.

The error metric is per-array: ||analytic - numeric||_inf divided by
max(||analytic||_inf, ||numeric||_inf, 1e-6).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from relt.losses import pp_loss_raw
from relt.rtm import (
    GRAD_FIELDS,
    LossConfig,
    RtmParams,
    _anchor_stage,
    _attention_stage,
    _ffn_stage,
    _fused_ce,
    _gradients_raw,
    _layer_norm_stage,
    _softmax_rows,
    batch_loss,
)

FD_EPS = 1e-5
REL_TOL = 1e-4


@dataclass
class GradcheckResult:
    max_rel_error: float
    trials: int
    elapsed_seconds: float
    worst_trial: int
    worst_field: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def _random_unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _random_trial(rng: np.random.Generator, trial: int):
    gamma = 0.5 if trial % 4 == 3 else 0.0
    c_tar = int(rng.integers(4 if gamma else 2, 11))
    c_anc = int(rng.integers(2, 17))
    d = int(rng.integers(4, 33))
    batch = int(rng.integers(1, 4))
    hidden = 4 * c_tar

    params = RtmParams(
        anchor_params=rng.standard_normal((c_anc, d)),
        w_q=np.eye(d) + 0.05 * rng.standard_normal((d, d)),
        w_k=np.eye(d) + 0.05 * rng.standard_normal((d, d)),
        ffn_w1=0.2 * rng.standard_normal((c_tar, hidden)),
        ffn_b1=0.1 * rng.standard_normal(hidden),
        ffn_w2=0.2 * rng.standard_normal((hidden, c_tar)),
        ffn_b2=0.1 * rng.standard_normal(c_tar),
        ln_gain=1.0 + 0.1 * rng.standard_normal(c_tar),
        ln_bias=0.1 * rng.standard_normal(c_tar),
        attn_temperature=float(rng.uniform(0.25, 2.0)),
    )
    cfg = LossConfig(
        alpha=float(rng.uniform(0.5, 2.0)),
        clip_scale=float(rng.uniform(1.0, 10.0)),
        gamma=gamma,
        tau=float(rng.uniform(0.25, 2.0)),
        tau_prime=float(rng.uniform(0.25, 2.0)),
        fusion="logit" if trial % 2 else "probability",
    )
    targets = _random_unit_rows(rng, c_tar, d)
    f_img = _random_unit_rows(rng, batch, d)
    labels = rng.integers(0, c_tar, size=batch)
    return params, cfg, targets, f_img, labels


class _StagedLoss:
    """Loss evaluations that recompute only what a perturbed field touches."""

    def __init__(self, f_img, labels, params: RtmParams, targets, cfg: LossConfig):
        self.f_img, self.labels, self.params, self.targets, self.cfg = f_img, labels, params, targets, cfg
        self.clip_logits = cfg.clip_scale * np.clip(f_img @ targets.T, -1.0, 1.0)
        self.rows = np.arange(labels.shape[0])
        self._refresh()

    def _refresh(self):
        """Recompute the cached stages from the current parameter values."""
        self.anchor = _anchor_stage(self.params, self.targets, self.cfg.tau)
        self.attn = _attention_stage(self.f_img, self.params, self.anchor["anchors"], self.anchor["relation"])
        self.ln = _layer_norm_stage(self.attn["head"], self.params)
        self.pp_base = self._pp_of(self.anchor["s"])

    def _pp_of(self, s: np.ndarray) -> float:
        if self.cfg.gamma == 0.0:
            return 0.0
        p_cols = _softmax_rows(s.T, self.cfg.tau).T
        return pp_loss_raw(p_cols).total

    def _ce(self, output: np.ndarray) -> float:
        mean_ce, _, _ = _fused_ce(
            self.f_img, self.labels, output, self.targets, self.cfg, clip_logits=self.clip_logits
        )
        return mean_ce

    def _finish(self, head: np.ndarray, pp_total: float) -> float:
        ln = _layer_norm_stage(head, self.params)
        out = _ffn_stage(head, ln["normed"], self.params)["output"]
        return self._ce(out) + self.cfg.gamma * pp_total

    def eval_for(self, field: str) -> float:
        params, cfg = self.params, self.cfg
        if field == "anchor_params":
            anchor = _anchor_stage(params, self.targets, cfg.tau)
            attn = _attention_stage(self.f_img, params, anchor["anchors"], anchor["relation"])
            return self._finish(attn["head"], self._pp_of(anchor["s"]))
        if field == "w_q":
            q = self.f_img @ params.w_q
            attn = _softmax_rows(q @ self.attn["k"].T, params.attn_temperature)
            return self._finish(attn @ self.anchor["relation"].T, self.pp_base)
        if field == "w_k":
            k = self.anchor["anchors"] @ params.w_k
            attn = _softmax_rows(self.attn["q"] @ k.T, params.attn_temperature)
            return self._finish(attn @ self.anchor["relation"].T, self.pp_base)
        if field in ("ln_gain", "ln_bias"):
            normed = self.ln["head_hat"] * params.ln_gain + params.ln_bias
            out = _ffn_stage(self.attn["head"], normed, params)["output"]
            return self._ce(out) + cfg.gamma * self.pp_base
        # feed-forward fields
        out = _ffn_stage(self.attn["head"], self.ln["normed"], params)["output"]
        return self._ce(out) + cfg.gamma * self.pp_base


def check_trial(params: RtmParams, cfg: LossConfig, targets, f_img, labels) -> dict:
    """Per-field relative error between analytic and central-difference
    gradients for one configuration."""
    analytic, reference_loss, _, _ = _gradients_raw(f_img, labels, params, targets, cfg)
    staged = _StagedLoss(f_img, labels, params, targets, cfg)
    for field in ("anchor_params", "w_q", "ffn_w1", "ln_gain"):
        if staged.eval_for(field) != reference_loss:
            raise AssertionError("staged loss diverged from the reference loss")
    direct, _, _ = batch_loss(f_img, labels, params, targets, cfg)
    if direct != reference_loss:
        raise AssertionError("batch_loss diverged from the gradient-path loss")

    errors = {}
    for name in GRAD_FIELDS:
        arr = getattr(params, name)
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + FD_EPS
            up = staged.eval_for(name)
            flat[i] = original - FD_EPS
            down = staged.eval_for(name)
            flat[i] = original
            numeric[i] = (up - down) / (2.0 * FD_EPS)
        numeric = numeric.reshape(arr.shape)
        diff = np.abs(analytic[name] - numeric).max()
        scale = max(np.abs(analytic[name]).max(), np.abs(numeric).max(), 1e-6)
        errors[name] = diff / scale
    return errors


def run_gradcheck(trials: int = 100, seed: int = 0) -> GradcheckResult:
    """Run ``trials`` random configurations; every fourth includes the
    anchor-prior term."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    worst_trial, worst_field = -1, ""
    for t in range(trials):
        params, cfg, targets, f_img, labels = _random_trial(rng, t)
        errors = check_trial(params, cfg, targets, f_img, labels)
        for name, err in errors.items():
            if err > worst:
                worst, worst_trial, worst_field = err, t, name
    return GradcheckResult(
        max_rel_error=worst,
        trials=trials,
        elapsed_seconds=time.perf_counter() - start,
        worst_trial=worst_trial,
        worst_field=worst_field,
    )
