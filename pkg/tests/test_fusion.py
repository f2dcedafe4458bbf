import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvloc.errors import DimensionMismatch, EmptySequence
from cvloc.fusion import (
    AttentionTensor,
    ConvStack,
    attention_matrix,
    conv3x3,
    fuse_sequence,
    mean_fuse,
    pcsf_fuse,
    qkv_transform,
)
from cvloc.geometry import FeatureMap

from conftest import random_map


def test_identity_stack_is_passthrough(rng):
    frame = random_map(rng, S=8, C=3, p_masked=0.2)
    ident = ConvStack.identity(3)
    Q, K, V = qkv_transform(frame, (ident, ident, ident))
    for out in (Q, K, V):
        assert np.array_equal(out.data, frame.data)
        assert np.array_equal(out.mask, frame.mask)


def test_zero_frame_gives_bias_response():
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    frame = FeatureMap(np.zeros((4, 4, 2)), mask)
    w = np.zeros((3, 3, 2, 2))
    stack = ConvStack(w, np.zeros(2), w, np.array([0.5, -1.0]))
    out = stack(frame)
    assert np.allclose(out.data[mask], [0.5, -1.0])
    assert np.all(out.data[0, 0] == 0)
    assert np.array_equal(out.mask, mask)


def test_hand_computed_two_layer_conv():
    # 1x1 image: only the center taps see data
    w1 = np.zeros((3, 3, 2, 2))
    w1[1, 1] = [[1, 2], [3, 4]]
    w2 = np.zeros((3, 3, 2, 2))
    w2[1, 1] = [[2, 0], [-1, 1]]
    b1, b2 = np.array([0.5, -11.0]), np.array([0.1, 0.2])
    frame = FeatureMap(np.array([[[1.0, 2.0]]]))
    # hidden = [7.5, -1] -> ReLU -> [7.5, 0]
    assert np.allclose(ConvStack(w1, b1, w2, b2)(frame).data[0, 0], [15.1, 0.2])
    assert np.allclose(ConvStack(w1, b1, w2, b2, relu=False)(frame).data[0, 0], [16.1, -0.8])


def test_conv3x3_matches_direct_loop(rng):
    x = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    ref = np.zeros((5, 6, 3))
    for r in range(5):
        for c in range(6):
            ref[r, c] = b
            for dy, dx in itertools.product(range(3), range(3)):
                rr, cc = r + dy - 1, c + dx - 1
                if 0 <= rr < 5 and 0 <= cc < 6:
                    ref[r, c] += x[rr, cc] @ w[dy, dx]
    assert np.allclose(conv3x3(x, w, b), ref)


def test_channel_mismatch():
    with pytest.raises(DimensionMismatch):
        ConvStack.identity(2)(FeatureMap(np.zeros((4, 4, 3))))


def test_single_frame_attention_is_one(rng):
    f = random_map(rng, S=6, C=2, p_masked=0.3)
    M = attention_matrix([f], [f])
    assert np.allclose(M.values[0, 0][f.mask], 1.0)
    assert np.all(M.values[0, 0][~f.mask] == 0)


def test_identical_frames_uniform_attention(rng):
    f = random_map(rng, S=6, C=2)
    M = attention_matrix([f] * 3, [f] * 3)
    assert np.allclose(M.values, 1 / 3)


def test_two_frame_softmax_value():
    Q1 = FeatureMap(np.ones((1, 1, 1)))
    K1 = FeatureMap(np.full((1, 1, 1), 2.0))
    K2 = FeatureMap(np.zeros((1, 1, 1)))
    M = attention_matrix([Q1, Q1], [K1, K2])
    assert M.values[0, :, 0, 0] == pytest.approx([0.880797077977882, 0.119202922022118], abs=1e-4)


def test_masked_keys_get_no_weight():
    valid = np.array([[True, False]])
    a = FeatureMap(np.ones((1, 2, 1)))
    b = FeatureMap(np.full((1, 2, 1), 5.0), valid)
    M = attention_matrix([a, b], [a, b])
    assert np.all(M.values[:, 1, 0, 1] == 0)
    assert np.allclose(M.values[:, 0, 0, 1], 1.0)


def test_fully_masked_pixel_is_invalid():
    mask = np.array([[True, False]])
    f = FeatureMap(np.ones((1, 2, 1)), mask)
    M = attention_matrix([f, f], [f, f])
    assert not M.valid[0, 1]
    assert np.all(M.values[:, :, 0, 1] == 0)
    fused = pcsf_fuse(M, [f, f])
    assert not fused.mask[0, 1]


def test_empty_attention():
    with pytest.raises(EmptySequence):
        attention_matrix([], [])


def test_fuse_single_frame_returns_value(rng):
    v = random_map(rng, S=5, C=2)
    M = attention_matrix([v], [v])
    assert np.allclose(pcsf_fuse(M, [v]).data, v.data)


def test_fuse_identity_attention_averages():
    v1 = FeatureMap(np.full((2, 2, 1), 1.0))
    v2 = FeatureMap(np.full((2, 2, 1), 3.0))
    M = AttentionTensor(np.broadcast_to(np.eye(2)[:, :, None, None], (2, 2, 2, 2)).copy(),
                        np.ones((2, 2), dtype=bool))
    assert np.allclose(pcsf_fuse(M, [v1, v2]).data, 2.0)


def test_fuse_shape_check(rng):
    v = random_map(rng, S=4, C=1)
    M = attention_matrix([v, v], [v, v])
    with pytest.raises(DimensionMismatch):
        pcsf_fuse(M, [v])


def test_photo_consistent_pixel_keeps_agreeing_value():
    # pixel p: both frames agree; pixel q: frames disagree
    v_agree = 0.7
    V1 = FeatureMap(np.array([[[v_agree], [1.0]]]))
    V2 = FeatureMap(np.array([[[v_agree], [-2.0]]]))
    Q = [FeatureMap(np.array([[[3.0], [3.0]]]))] * 2
    K = [FeatureMap(np.array([[[3.0], [3.0]]])), FeatureMap(np.array([[[3.0], [-3.0]]]))]
    fused = pcsf_fuse(attention_matrix(Q, K), [V1, V2])
    assert fused.data[0, 0, 0] == pytest.approx(v_agree, abs=1e-6)
    # at q the key of frame 2 is anti-aligned, so frame 1 dominates
    assert fused.data[0, 1, 0] == pytest.approx(1.0, abs=1e-6)


def test_mean_fuse():
    a = FeatureMap(np.full((1, 2, 1), 2.0), np.array([[True, False]]))
    b = FeatureMap(np.full((1, 2, 1), 4.0))
    out = mean_fuse([a, b])
    assert out.data[0, 0, 0] == 3.0
    assert out.data[0, 1, 0] == 4.0
    assert np.allclose(mean_fuse([a]).data, a.data)
    with pytest.raises(EmptySequence):
        mean_fuse([])


def test_scaled_logits_flag():
    Q1 = FeatureMap(np.ones((1, 1, 4)))
    K1 = FeatureMap(np.ones((1, 1, 4)))
    K2 = FeatureMap(np.zeros((1, 1, 4)))
    plain = attention_matrix([Q1, Q1], [K1, K2]).values[0, :, 0, 0]
    scaled = attention_matrix([Q1, Q1], [K1, K2], scale_logits=True).values[0, :, 0, 0]
    assert plain[0] == pytest.approx(np.exp(4) / (np.exp(4) + 1))
    assert scaled[0] == pytest.approx(np.exp(2) / (np.exp(2) + 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_rows_are_stochastic(n, seed):
    rng = np.random.default_rng(seed)
    maps = [random_map(rng, S=5, C=3, p_masked=0.3) for _ in range(n)]
    M = attention_matrix(maps, maps)
    assert np.all(M.values >= 0)
    sums = M.values.sum(axis=1)
    assert np.allclose(sums[:, M.valid], 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_fusion_is_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    frames = [random_map(rng, S=6, C=2, p_masked=0.2) for _ in range(n)]
    weights = (ConvStack.random(2, 2, seed=1), ConvStack.random(2, 2, seed=2), ConvStack.random(2, 2, seed=3))
    perm = rng.permutation(n)
    a = fuse_sequence(frames, weights)
    b = fuse_sequence([frames[i] for i in perm], weights)
    assert np.allclose(a.data, b.data, atol=1e-6)
    assert np.array_equal(a.mask, b.mask)


def test_fixed_point_with_random_weights(rng):
    f = random_map(rng, S=6, C=2)
    weights = tuple(ConvStack.random(2, 2, seed=s) for s in (4, 5, 6))
    fused = fuse_sequence([f] * 4, weights)
    assert np.allclose(fused.data, weights[2](f).data, atol=1e-6)
