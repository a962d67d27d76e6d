import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from imgconf.dgp import DgpConfig, simulate
from imgconf.model import (
    ConvLogisticModel,
    TrainConfig,
    backward,
    bce_loss,
    col2im,
    cosine_lr,
    extract_patches,
    forward,
    forward_logits,
    gradient_check,
    im2col,
    init_model,
    load_model,
    max_pool,
    predict_propensities,
    reflect,
    save_model,
    train,
)

SCENE_TRAIN = TrainConfig(learning_rate=0.15, epochs=30, batch_size=32, augmentation="none",
                          precision="single", head_init="data", weight_decay=0.25)


def constant_model(bias=0.0, z=3, k=2):
    return ConvLogisticModel([np.zeros((z, z, 1, k))], [1], np.zeros(k), bias)


def test_zero_model_outputs_half_and_bias_sets_level():
    x = np.random.default_rng(0).normal(size=(5, 6, 1))
    assert forward(constant_model(), x) == 0.5
    assert math.isclose(forward(constant_model(1.3), x), expit(1.3))
    np.testing.assert_array_equal(forward(constant_model(), x, "pixel"), np.full((5, 6), 0.5))


def test_forward_is_reproducible():
    m = init_model(3, 4, rng=np.random.default_rng(7))
    x = np.random.default_rng(8).normal(size=(3, 9, 9, 1))
    a = forward_logits(m, x)
    b = forward_logits(init_model(3, 4, rng=np.random.default_rng(7)), x)
    assert np.array_equal(a, b)


def test_bce_examples():
    assert math.isclose(bce_loss([0.5, 0.5], [1, 0]), math.log(2))
    assert math.isclose(bce_loss([0.8, 0.4], [1, 0]), -(math.log(0.8) + math.log(0.6)) / 2)
    assert abs(bce_loss([0.8, 0.4], [1, 0]) - 0.3670) < 1e-4
    assert bce_loss([1 - 1e-12, 1e-12], [1, 0]) < 1e-11
    with pytest.raises(ValueError):
        bce_loss([0.0, 0.5], [0, 1])


def test_bias_gradient_is_residual():
    m = init_model(3, 2, rng=np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(1, 6, 6, 1))
    for t in (0.0, 1.0):
        _, grads = backward(m, x, np.array([t]))
        p = expit(forward_logits(m, x))[0]
        assert math.isclose(grads[-1][0], p - t, rel_tol=1e-12)


def test_gradients_vanish_at_the_perfect_predictor():
    m = constant_model(bias=40.0)
    x = np.random.default_rng(2).normal(size=(4, 6, 6, 1))
    loss, grads = backward(m, x, np.ones(4))
    assert loss < 1e-15
    assert all(np.abs(g).max() < 1e-15 for g in grads)


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    z=st.sampled_from([1, 2, 3]),
    k=st.integers(1, 3),
    depth=st.sampled_from([1, 2]),
    readout=st.sampled_from(["scene", "pixel"]),
    pool=st.sampled_from([1, 2, 6]),
    channels=st.sampled_from([1, 2]),
)
def test_gradient_matches_finite_differences(seed, z, k, depth, readout, pool, channels):
    if readout == "pixel":
        pool = 1
    rng = np.random.default_rng(seed)
    m = init_model(z, k, channels, depth, [1] * (depth - 1) + [pool], rng=rng)
    m = m.with_parameters([b + 0.1 * rng.normal(size=b.shape) for b in m.parameters()])
    x = rng.normal(size=(3, 6, 6, channels))
    shape = (3,) if readout == "scene" else (3, 6, 6)
    t = (rng.random(shape) < 0.5).astype(float)
    assert gradient_check(m, x, t, readout) < 1e-4


def test_im2col_col2im_are_adjoint():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4, 3))
    y = rng.normal(size=(2 * 5 * 4, 3 * 3 * 3))
    assert math.isclose(float((im2col(x, 3) * y).sum()), float((x * col2im(y, x.shape, 3)).sum()), rel_tol=1e-12)


def test_max_pool_global_when_window_covers_map():
    a = np.random.default_rng(0).normal(size=(2, 5, 5, 3))
    pooled, _ = max_pool(a, 5)
    np.testing.assert_array_equal(pooled[:, 0, 0], a.max(axis=(1, 2)))


def separable_data(n=40, size=10, seed=0):
    rng = np.random.default_rng(seed)
    x = 0.3 * rng.normal(size=(n, size, size, 1))
    t = (np.arange(n) % 2).astype(float)
    for i in np.flatnonzero(t):
        r, c = rng.integers(0, size - 3, size=2)
        for d in range(3):
            x[i, r + d, c + d, 0] += 3.0
    return x, t


def test_training_separates_a_visible_pattern():
    x, t = separable_data()
    m = init_model(3, 2, pools=[10], rng=np.random.default_rng(0))
    res = train(m, x, t, TrainConfig(learning_rate=0.05, epochs=50, batch_size=8, augmentation="none", head_init="data"))
    assert res.final_loss < 0.05


def test_zero_learning_rate_leaves_parameters_unchanged():
    x, t = separable_data(8, 6)
    m = init_model(3, 2, rng=np.random.default_rng(0))
    res = train(m, x, t, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for a, b in zip(m.parameters(), res.model.parameters()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic():
    x, t = separable_data(12, 6)
    cfg = TrainConfig(learning_rate=0.02, epochs=4, batch_size=4, seed=3)
    a = train(init_model(3, 2, rng=np.random.default_rng(0)), x, t, cfg)
    b = train(init_model(3, 2, rng=np.random.default_rng(0)), x, t, cfg)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert np.array_equal(pa, pb)
    assert a.trace == b.trace


def test_single_class_training_is_rejected():
    x, _ = separable_data(6, 6)
    with pytest.raises(ValueError, match="single treatment class"):
        train(init_model(3, 2), x, np.ones(6))


def test_standardized_head_leaves_a_constant_start_unchanged():
    # with head_init="data" the initial model predicts the treated share everywhere
    x, t = separable_data(10, 6)
    m = init_model(3, 2, rng=np.random.default_rng(0))
    m = ConvLogisticModel(m.filters, m.pools, np.zeros(2), 0.0)
    res = train(m, x, t, TrainConfig(learning_rate=0.0, epochs=1, head_init="data"))
    np.testing.assert_allclose(expit(forward_logits(res.model, x)), t.mean(), atol=1e-12)


def test_loss_trace_layout():
    x, t = separable_data(8, 6)
    res = train(init_model(3, 2), x, t, TrainConfig(epochs=5, batch_size=4), test=(x[:4], t[:4]))
    assert [row[0] for row in res.trace] == list(range(6))
    assert all(row[2] is not None for row in res.trace)
    assert math.isclose(res.initial_loss, res.trace[0][1])


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 10) == 0.1
    assert math.isclose(cosine_lr(0.1, 5, 10), 0.05)
    assert abs(cosine_lr(0.1, 10, 10)) < 1e-15


def test_reflection_symmetric_model_is_reflection_invariant():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 3, 1, 2))
    w = w + w[::-1] + w[:, ::-1] + w[::-1, ::-1]
    m = ConvLogisticModel([w], [1], rng.normal(size=2), 0.3)
    x = rng.normal(size=(4, 7, 7, 1))
    dummy = np.zeros((4, 7, 7))
    for flips in ([[1, 0]] * 4, [[0, 1]] * 4, [[1, 1]] * 4):
        fx, ft = reflect(x, dummy, np.array(flips, dtype=bool), "pixel")
        np.testing.assert_allclose(forward_logits(m, fx), forward_logits(m, x), atol=1e-12)
        # pixel readout: predictions move with the image
        back, _ = reflect(forward_logits(m, fx, "pixel")[..., None], dummy, np.array(flips, dtype=bool), "pixel")
        np.testing.assert_allclose(back[..., 0], forward_logits(m, x, "pixel"), atol=1e-12)


def test_pixel_readout_equals_patch_evaluation():
    # dense pixel readout == the conv window inside each zero-padded centered patch
    rng = np.random.default_rng(3)
    for z in (3, 4):
        m = init_model(z, 3, rng=rng)
        img = rng.normal(size=(6, 5, 1))
        patches = extract_patches(img, z)
        assert patches.shape == (30, 2 * (z // 2) + 1, 2 * (z // 2) + 1, 1)
        window = patches[:, :z, :z, :].reshape(30, -1)
        feats = np.maximum(window @ m.filters[0].reshape(-1, 3), 0)
        expected = feats @ m.head_weights + m.head_bias
        np.testing.assert_allclose(forward_logits(m, img[None], "pixel").ravel(), expected, atol=1e-12)


def test_predict_constant_and_clipping():
    x = np.random.default_rng(0).normal(size=(3, 5, 5, 1))
    np.testing.assert_array_equal(predict_propensities(constant_model(), x), np.full(3, 0.5))
    np.testing.assert_allclose(predict_propensities(constant_model(float(logit(0.001))), x, eta=0.01), 0.01)
    p = predict_propensities(init_model(3, 2, rng=np.random.default_rng(1)), x, "pixel")
    assert p.shape == (75,) and np.all((p >= 0.01) & (p <= 0.99))


def test_pixel_readout_rejects_pooling():
    with pytest.raises(ValueError):
        forward_logits(init_model(3, 2, pools=[2]), np.zeros((1, 4, 4, 1)), "pixel")


def _scene_fit(z_true, n_train=200, seed=0):
    cfg = DgpConfig(level="scene", n_scenes=n_train, true_kernel_width=z_true, seed=seed)
    s = simulate(cfg, 0)
    m = init_model(8, 1, pools=[32], rng=np.random.default_rng(seed))
    return cfg, s, train(m, s.images, s.treatment, SCENE_TRAIN).model


def test_out_of_sample_loss_beats_dominant_class():
    cfg, s, m = _scene_fit(8)
    test = simulate(cfg, 1)
    share = s.treatment.mean()
    baseline = bce_loss(np.full(cfg.n_scenes, share), test.treatment)
    assert bce_loss(predict_propensities(m, test.images, eta=1e-6), test.treatment) < baseline


def test_learned_propensity_tracks_the_truth_out_of_sample():
    cfg, _, m = _scene_fit(8)
    test = simulate(cfg.replace(n_scenes=500), 7)
    p = predict_propensities(m, test.images)
    assert np.corrcoef(p, test.true_propensity)[0, 1] > 0.5


def test_checkpoint_round_trip(tmp_path):
    m = init_model(3, 4, 2, depth=2, pools=[1, 2], rng=np.random.default_rng(0))
    m = ConvLogisticModel(m.filters, m.pools, m.head_weights, -0.7)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.pools == m.pools
    for a, b in zip(m.parameters(), back.parameters()):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_corruption(tmp_path):
    m = init_model(3, 2)
    save_model(m, tmp_path / "m.bin")
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-8])
    (tmp_path / "long.bin").write_bytes(data + b"\0" * 8)
    (tmp_path / "magic.bin").write_bytes(b"X" + data[1:])
    (tmp_path / "version.bin").write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
    for name, msg in (("short", "truncated"), ("long", "trailing"), ("magic", "not a model"), ("version", "version")):
        with pytest.raises(ValueError, match=msg):
            load_model(tmp_path / f"{name}.bin")


def test_model_validation():
    with pytest.raises(ValueError):
        ConvLogisticModel([np.zeros((3, 3, 1, 2))], [1], np.zeros(3))
    with pytest.raises(ValueError):
        ConvLogisticModel([np.full((3, 3, 1, 2), np.nan)], [1], np.zeros(2))
