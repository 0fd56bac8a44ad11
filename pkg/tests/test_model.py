import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wpsseg.gradcheck import check_gradients, random_problem, summarize
from wpsseg.losses import NonFiniteError, softmax
from wpsseg.model import (FEATURE_CHANNELS, LossSpec, ParamSet, StepBatch, apply_channel_dropout, conv2d,
                          conv2d_backward, decode, ema_update, encode, forward, forward_backward, init_params,
                          sample_complementary_masks, upsample2)


def _zero(c=4):
    p = init_params(c, 0, np.float64)
    for k in p:
        p[k][...] = 0
    return p


def _conv_loop(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("ncij,fcij->nf", patch, w) + b
    return out


@given(seed=st.integers(0, 10**6), stride=st.sampled_from([1, 2]), k=st.sampled_from([1, 3]))
def test_conv_matches_loop(seed, stride, k):
    g = np.random.default_rng(seed)
    pad = k // 2
    x, w, b = g.normal(size=(2, 3, 6, 6)), g.normal(size=(4, 3, k, k)), g.normal(size=4)
    out, _ = conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out, _conv_loop(x, w, b, stride, pad), atol=1e-12)


@given(seed=st.integers(0, 10**6), stride=st.sampled_from([1, 2]), k=st.sampled_from([1, 3]))
def test_conv_backward_is_adjoint(seed, stride, k):
    # <dout, conv(x)> is bilinear, so dx and dw must satisfy the adjoint identities
    g = np.random.default_rng(seed)
    pad = k // 2
    x, w = g.normal(size=(2, 3, 6, 6)), g.normal(size=(4, 3, k, k))
    out, cols = conv2d(x, w, np.zeros(4), stride, pad)
    dout = g.normal(size=out.shape)
    dx, dw, db = conv2d_backward(dout, cols, x.shape, w, stride, pad)
    assert math.isclose(np.sum(dout * out), np.sum(dx * x), rel_tol=1e-10)
    assert math.isclose(np.sum(dout * out), np.sum(dw * w), rel_tol=1e-10)
    np.testing.assert_allclose(db, dout.sum(axis=(0, 2, 3)))


def test_encode_zero_params_gives_zero():
    img = np.random.default_rng(0).random((3, 16, 16))
    assert not encode(_zero(), img).any()


def test_encode_impulse_hand_kernels():
    p = _zero(3)
    # centre taps pass channel 0 through; a corner tap on conv1 shifts it by one pixel
    p["enc.conv1.w"][0, 0, 0, 0] = 2.0
    p["enc.conv2.w"][0, 0, 1, 1] = 1.0
    p["enc.conv3.w"][0, 0, 1, 1] = 3.0
    img = np.zeros((3, 4, 4))
    img[0, 1, 1] = 1.0
    e = encode(p, img)
    assert e.shape == (FEATURE_CHANNELS, 2, 2)
    # conv1 puts 2.0 at (2, 2); stride-2 centre sampling keeps even positions -> (1, 1)
    expected = np.zeros((2, 2))
    expected[1, 1] = 6.0
    np.testing.assert_array_equal(e[0], expected)
    assert not e[1:].any()


@given(seed=st.integers(0, 1000), h=st.sampled_from([8, 12, 16]))
def test_encode_shape_and_finite(seed, h):
    p = init_params(5, seed)
    img = np.random.default_rng(seed).random((3, h, 2 * h)).astype(np.float32)
    e = encode(p, img)
    assert e.shape == (FEATURE_CHANNELS, h // 2, h) and np.isfinite(e).all()


def test_decode_zero_params_zero_logits():
    feat = np.random.default_rng(1).random((FEATURE_CHANNELS, 4, 4))
    z = decode(_zero(5), feat)
    assert z.shape == (5, 8, 8) and not z.any()


def test_upsample_replicates_blocks():
    f = np.arange(4.0).reshape(1, 1, 2, 2)
    up = upsample2(f)
    np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_decode_identityish_path_replicates():
    p = _zero(2)
    p["dec.conv1.w"][0, 0, 1, 1] = 1.0
    p["dec.conv2.w"][0, 0, 0, 0] = 1.0
    feat = np.zeros((FEATURE_CHANNELS, 2, 2))
    feat[0] = [[1.0, 2.0], [3.0, 4.0]]
    z = decode(p, feat)
    np.testing.assert_array_equal(z[0], np.kron(feat[0], np.ones((2, 2))))


def test_decoder_gradients_match_finite_differences():
    params, batch = random_problem(3, num_classes=3, size=16)
    _, grads = forward_backward(params, batch)
    names = [n for n in params if n.startswith("dec.")]
    stats = summarize(check_gradients(params, batch, grads, names=names))
    assert set(stats) == set(names)
    assert max(max(v) for v in stats.values()) < 1e-4, stats


def test_softmax_of_network_normalizes():
    p = init_params(6, 2)
    x = np.random.default_rng(2).random((2, 3, 16, 16)).astype(np.float32)
    z, _ = forward(p, x)
    np.testing.assert_allclose(softmax(z, axis=1).sum(axis=1), 1.0, atol=1e-6)


def test_masks_are_complements():
    g = np.random.default_rng(0)
    for _ in range(200):
        m1, m2 = sample_complementary_masks(g)
        assert np.all((m1 ^ m2) == 1)


def test_mask_popcount_concentrates():
    m1, _ = sample_complementary_masks(np.random.default_rng(5), 0.5, FEATURE_CHANNELS, batch=100_000)
    mean = m1.sum(axis=1).mean()
    assert 0.48 * FEATURE_CHANNELS <= mean <= 0.52 * FEATURE_CHANNELS


def test_masks_seeded():
    a = sample_complementary_masks(np.random.default_rng(9), batch=4)
    b = sample_complementary_masks(np.random.default_rng(9), batch=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_keep_prob_other_than_half_warns(caplog):
    sample_complementary_masks(np.random.default_rng(0), 0.3)
    assert "keep_prob" in caplog.text


def test_dropout_all_ones_and_zeros(rng):
    feat = rng.random((FEATURE_CHANNELS, 3, 3))
    ones, zeros = np.ones(FEATURE_CHANNELS, np.uint8), np.zeros(FEATURE_CHANNELS, np.uint8)
    np.testing.assert_array_equal(apply_channel_dropout(feat, ones), 2 * feat)
    assert not apply_channel_dropout(feat, zeros).any()


def test_dropout_mean_preserves_features(rng):
    feat = 0.5 + 0.5 * rng.random((FEATURE_CHANNELS, 4, 4))
    m1, _ = sample_complementary_masks(np.random.default_rng(3), 0.5, FEATURE_CHANNELS, batch=10_000)
    mean = apply_channel_dropout(feat[None], m1).mean(axis=0)
    assert np.all(np.abs(mean - feat) <= 0.05 * feat)


def test_ema_gamma_zero_copies_student():
    t, s = init_params(3, 0), init_params(3, 1)
    snapshot = s.copy()
    ema_update(t, s, 0.0)
    assert t.equal(s) and s.equal(snapshot)


def test_ema_scalar_probe():
    t, s = _zero(2), _zero(2)
    for k in t:
        t[k][...] = 1.0
        s[k][...] = 0.5
    ema_update(t, s, 0.99)
    for k in t:
        assert np.all(t[k] == 0.99 * 1.0 + 0.01 * 0.5)


@given(gamma=st.floats(0.0, 0.999), seed=st.integers(0, 100))
def test_ema_geometric_decay(gamma, seed):
    t, s = init_params(2, seed, np.float64), init_params(2, seed + 1, np.float64)
    gap0 = {k: t[k] - s[k] for k in t}
    for n in range(1, 101):
        ema_update(t, s, gamma)
        if n % 25 == 0:
            for k in t:
                np.testing.assert_allclose(t[k] - s[k], gamma**n * gap0[k], rtol=0, atol=1e-12)


def test_ema_rejects_bad_gamma():
    with pytest.raises(ValueError):
        ema_update(init_params(2), init_params(2), 1.0)


def test_zero_model_loss_is_log_k():
    k = 5
    p = _zero(k)
    g = np.random.default_rng(0)
    labels = g.integers(0, k, (2, 8, 8))
    batch = StepBatch(g.random((2, 3, 8, 8)), labels)
    report, _ = forward_backward(p, batch)
    assert math.isclose(report.l_c, math.log(k), rel_tol=1e-12)
    assert report.l_d == 0 and report.total == report.l_c


def test_frozen_encoder_has_zero_encoder_grads():
    params, batch = random_problem(1, num_classes=3, size=8)
    _, grads = forward_backward(params, batch, LossSpec(freeze_encoder=True))
    for name, gv in grads.items():
        if name.startswith("enc."):
            assert np.abs(gv).max() == 0
        else:
            assert np.abs(gv).max() > 0


def test_fused_pass_matches_separate_passes():
    params, batch = random_problem(2, num_classes=4, size=8, batch_clean=2, batch_degraded=2)
    report, grads = forward_backward(params, batch)
    from wpsseg.model import loss_only

    assert math.isclose(loss_only(params, batch), report.total, rel_tol=1e-12)


def test_nonfinite_reports_offending_tensor():
    params, batch = random_problem(0, num_classes=3, size=8)
    params["dec.conv1.w"][0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="dec.conv1.w"):
        forward_backward(params, batch)


def test_paramset_checksum_tracks_content():
    p = init_params(3, 0)
    c = p.checksum()
    q = p.copy()
    assert q.checksum() == c
    q["dec.conv2.b"][0] += 1
    assert q.checksum() != c and isinstance(p, ParamSet)
