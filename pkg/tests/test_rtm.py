import numpy as np
import pytest

from relt.embed_io import EmbeddingMatrix, LabeledImageSet
from relt.gradcheck import check_trial, run_gradcheck
from relt.relations import anchor_target_relation, image_anchor_relation
from relt.rtm import (
    GRAD_FIELDS,
    LossConfig,
    RtmParams,
    effective_anchors,
    forward_batch,
    load_checkpoint,
    rtm_forward,
    rtm_gradients,
    rtm_init,
    save_checkpoint,
)


def unit_rows(shape, seed):
    m = np.random.default_rng(seed).standard_normal(shape)
    return EmbeddingMatrix((m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32),
                           normalized=True)


EYE2 = EmbeddingMatrix(np.eye(2, dtype=np.float32), normalized=True)


def test_identity_init_exact():
    params = rtm_init(3, 5, 7, mode="identity", seed=0)
    np.testing.assert_array_equal(params.w_q, np.eye(7))
    np.testing.assert_array_equal(params.w_k, np.eye(7))
    assert not params.ffn_w1.any() and not params.ffn_w2.any()
    assert not params.ffn_b1.any() and not params.ffn_b2.any()
    np.testing.assert_array_equal(params.ln_gain, np.ones(3))
    assert params.hidden == 12


def test_random_init_seed_deterministic():
    a = rtm_init(3, 5, 7, mode="random", seed=7)
    b = rtm_init(3, 5, 7, mode="random", seed=7)
    for name in GRAD_FIELDS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = rtm_init(3, 5, 7, mode="random", seed=8)
    assert not np.array_equal(a.anchor_params, c.anchor_params)


def test_init_equivalence_with_training_free_path():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c_tar, c_anc, d = (int(rng.integers(2, 9)) for _ in range(3))
        f_tar = unit_rows((c_tar, d), int(rng.integers(1e6)))
        f_anc = unit_rows((c_anc, d), int(rng.integers(1e6)))
        tau = float(rng.uniform(0.05, 1.0))
        params = rtm_init(c_tar, c_anc, d, mode="identity", anchors=f_anc, seed=0,
                          attn_temperature=tau)
        f = rng.standard_normal(d)
        f /= np.linalg.norm(f)
        anchors = effective_anchors(params)
        relation = anchor_target_relation(f_tar, anchors, tau)
        composed = relation.values @ image_anchor_relation(f, anchors, tau)
        np.testing.assert_allclose(rtm_forward(f, params, f_tar, tau), composed, atol=1e-12)


def test_single_anchor_head_is_relation_column():
    f_tar = unit_rows((4, 6), 3)
    params = rtm_init(4, 1, 6, mode="identity", seed=0, attn_temperature=0.5)
    relation = anchor_target_relation(f_tar, effective_anchors(params), 0.3)
    out = rtm_forward(np.eye(6)[0], params, f_tar, 0.3)
    np.testing.assert_allclose(out, relation.values[:, 0], atol=1e-12)


def test_direct_two_dim_example():
    params = rtm_init(2, 2, 2, mode="identity", anchors=np.eye(2), seed=0, attn_temperature=1.0)
    out = rtm_forward(np.array([1.0, 0.0]), params, EYE2, 0.01)
    np.testing.assert_allclose(out, [0.731059, 0.268941], atol=1e-6)


def test_anchor_row_scaling_invariance():
    f_tar = unit_rows((5, 8), 4)
    params = rtm_init(5, 7, 8, mode="random", seed=5)
    f = np.random.default_rng(6).standard_normal(8)
    f /= np.linalg.norm(f)
    base = rtm_forward(f, params, f_tar, 0.01)
    for scale in (2.0, 0.5, 1.7):
        scaled = params.copy()
        scaled.anchor_params = scaled.anchor_params * scale
        np.testing.assert_allclose(rtm_forward(f, scaled, f_tar, 0.01), base, atol=1e-12)


def test_zero_norm_anchor_row_error():
    params = rtm_init(2, 3, 4, mode="identity", seed=0)
    params.anchor_params[1] = 0.0
    with pytest.raises(ValueError, match="zero-norm anchor row 1"):
        forward_batch(np.eye(4)[:1], params, unit_rows((2, 4), 9), 0.1)


def test_saturated_batch_has_tiny_gradient():
    # fused argmax saturated: logit-space fusion with a huge correct-class gap
    d = 6
    f_tar = unit_rows(np.eye(d)[:3], None) if False else EmbeddingMatrix(
        np.eye(d, dtype=np.float32)[:3], normalized=True)
    params = rtm_init(3, 4, d, mode="identity", seed=1)
    features = EmbeddingMatrix(np.eye(d, dtype=np.float32)[:2], normalized=True)
    batch = LabeledImageSet(features, np.array([0, 1]), 3)
    cfg = LossConfig(alpha=1.0, clip_scale=100.0, gamma=0.0, tau=0.5, fusion="logit")
    grads, loss = rtm_gradients(batch, params, f_tar, cfg)
    assert loss < 1e-8
    total = sum(np.abs(g).sum() for g in grads.values())
    assert total < 1e-8


def test_duplicate_batch_leaves_mean_gradient_unchanged():
    f_tar = unit_rows((4, 8), 10)
    params = rtm_init(4, 6, 8, mode="random", seed=11)
    features = unit_rows((3, 8), 12)
    labels = np.array([0, 2, 1])
    batch = LabeledImageSet(features, labels, 4)
    doubled = LabeledImageSet(
        EmbeddingMatrix(np.vstack([features.data, features.data]), normalized=True),
        np.concatenate([labels, labels]),
        4,
    )
    cfg = LossConfig(tau=0.3, tau_prime=0.4)
    grads_a, loss_a = rtm_gradients(batch, params, f_tar, cfg)
    grads_b, loss_b = rtm_gradients(doubled, params, f_tar, cfg)
    assert loss_a == pytest.approx(loss_b, abs=1e-12)
    for name in GRAD_FIELDS:
        np.testing.assert_allclose(grads_a[name], grads_b[name], atol=1e-12)


def test_gradcheck_smoke():
    result = run_gradcheck(trials=6, seed=123)
    assert result.passed, f"max rel error {result.max_rel_error}"


def test_checkpoint_roundtrip(tmp_path):
    params = rtm_init(3, 5, 7, mode="random", seed=3, attn_temperature=0.25)
    save_checkpoint(tmp_path / "ckpt", params, extra={"note": "test"})
    loaded, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta["note"] == "test"
    assert loaded.attn_temperature == 0.25
    assert loaded.init_mode == "random" and loaded.seed == 3
    for name in GRAD_FIELDS:
        np.testing.assert_allclose(
            getattr(loaded, name),
            getattr(params, name).astype(np.float32).astype(np.float64),
        )


def test_forward_finite_for_small_temperatures():
    f_tar = unit_rows((6, 10), 20)
    params = rtm_init(6, 9, 10, mode="random", seed=21)
    f = np.random.default_rng(22).standard_normal((4, 10))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    for tau in (1e-4, 0.01, 1.0, 100.0):
        out = forward_batch(f, params, f_tar, tau)
        assert np.isfinite(out).all()
