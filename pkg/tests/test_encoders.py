"""Modality encoders: shape contracts, zero cases, and grad flow."""

import numpy as np
import pytest

import uvmtl.tensor as T
from uvmtl.encoders import (
    IMAGE_MODALITIES,
    JOINT_MODALITIES,
    MODALITY_GROUPS,
    MODALITY_NAMES,
    encode_image,
    encode_joints,
    image_encoder_params,
    joint_encoder_params,
)
from uvmtl.errors import ShapeMismatch
from uvmtl.params import ParamStore
from uvmtl.tensor import Tensor, grad_check


def test_modality_naming():
    assert len(MODALITY_NAMES) == 8
    assert len(IMAGE_MODALITIES) == 6
    assert len(JOINT_MODALITIES) == 2
    grouped = [m for g in MODALITY_GROUPS.values() for m in g]
    assert sorted(grouped) == sorted(MODALITY_NAMES)


def _image_params(seed=0, c_in=2, dim=4, tile=7, routed=2):
    store = ParamStore(seed=seed)
    return image_encoder_params(store, "enc", c_in, dim, tile, routed)


def test_encode_image_shapes():
    p = _image_params()
    x = Tensor(np.random.default_rng(0).normal(size=(14, 14, 2)))
    enc = encode_image(x, p, 7, 7)
    assert enc.vector.shape == (4,)
    assert enc.map.shape == (7, 7, 4)


def test_encode_image_batch_matches_single():
    p = _image_params(seed=1)
    xs = np.random.default_rng(1).normal(size=(3, 14, 14, 2))
    enc_b = encode_image(Tensor(xs), p, 7, 7)
    assert enc_b.vector.shape == (3, 4)
    assert enc_b.map.shape == (3, 7, 7, 4)
    for i in range(3):
        enc_i = encode_image(Tensor(xs[i]), p, 7, 7)
        assert np.max(np.abs(enc_b.vector.data[i] - enc_i.vector.data)) < 1e-12
        assert np.max(np.abs(enc_b.map.data[i] - enc_i.map.data)) < 1e-12


def test_encode_image_zero_input_zero_vector():
    # zero map through linear stem and convex attention stays zero, and the
    # head bias starts at zero
    p = _image_params(seed=2)
    enc = encode_image(Tensor(np.zeros((14, 14, 2))), p, 7, 7)
    assert np.max(np.abs(enc.vector.data)) < 1e-12


def test_encode_image_deterministic():
    p = _image_params(seed=3)
    x = np.random.default_rng(3).normal(size=(14, 14, 2))
    a = encode_image(Tensor(x), p, 7, 7)
    b = encode_image(Tensor(x), p, 7, 7)
    assert np.array_equal(a.vector.data, b.vector.data)
    assert np.array_equal(a.map.data, b.map.data)


def test_encode_image_vector_is_pooled_projected_map():
    # the pooled head and the exported map describe the same features
    p = _image_params(seed=4)
    x = Tensor(np.random.default_rng(4).normal(size=(14, 14, 2)))
    enc = encode_image(x, p, 7, 7)
    pooled = enc.map.data.mean(axis=(0, 1))
    want = pooled @ p.fc.data + p.fc_b.data
    assert np.max(np.abs(enc.vector.data - want)) < 1e-12


def test_encode_image_grad_check():
    p = _image_params(seed=5, dim=2, tile=7, routed=2)
    x = Tensor(np.random.default_rng(5).normal(size=(14, 14, 2)), requires_grad=True)

    def f(t):
        enc = encode_image(t, p, 7, 7)
        return T.tsum(T.mul(enc.vector, enc.vector))

    assert grad_check(f, x) < 1e-4


def _joint_params(seed=0, joints=5, dim=4, map_h=7, map_w=7):
    store = ParamStore(seed=seed)
    return joint_encoder_params(store, "jo", joints, dim, map_h, map_w)


def test_encode_joints_shapes():
    p = _joint_params()
    x = Tensor(np.random.default_rng(6).normal(size=(6, 5, 3)))
    enc = encode_joints(x, p, 7, 7)
    assert enc.vector.shape == (4,)
    assert enc.map.shape == (7, 7, 4)


def test_encode_joints_batch_matches_single():
    p = _joint_params(seed=7)
    xs = np.random.default_rng(7).normal(size=(4, 6, 5, 3))
    enc_b = encode_joints(Tensor(xs), p, 7, 7)
    for i in range(4):
        enc_i = encode_joints(Tensor(xs[i]), p, 7, 7)
        assert np.max(np.abs(enc_b.vector.data[i] - enc_i.vector.data)) < 1e-12
        assert np.max(np.abs(enc_b.map.data[i] - enc_i.map.data)) < 1e-12


def test_encode_joints_zero_input_zero_vector():
    p = _joint_params(seed=8)
    enc = encode_joints(Tensor(np.zeros((6, 5, 3))), p, 7, 7)
    assert np.max(np.abs(enc.vector.data)) < 1e-12


def test_encode_joints_constant_frames_match_single_frame_features():
    # temporal mean over identical frames equals any one frame's features,
    # up to the edge frames where the temporal window is zero-padded
    p = _joint_params(seed=9)
    frame = np.random.default_rng(9).normal(size=(5, 3))
    x = np.repeat(frame[None], 6, axis=0)
    enc = encode_joints(Tensor(x), p, 7, 7)
    assert np.all(np.isfinite(enc.map.data))
    # interior frames of a constant clip produce identical conv outputs
    xb = Tensor(x.reshape(1, 6, 5, 3, 1))
    h1 = T.relu(T.add(T.conv3d(xb, p.conv1), T.broadcast_to(p.conv1_b, (1, 6, 5, 3, 8))))
    mid = h1.data[0, 1:-1]
    assert np.max(np.abs(mid - mid[0])) < 1e-12


def test_encode_joints_rank_guard():
    p = _joint_params(seed=10)
    with pytest.raises(ShapeMismatch):
        encode_joints(Tensor(np.zeros((6, 5))), p, 7, 7)


def test_encode_joints_grad_check():
    p = _joint_params(seed=11, joints=4, dim=2, map_h=2, map_w=2)
    x = Tensor(np.random.default_rng(11).normal(size=(4, 4, 3)), requires_grad=True)

    def f(t):
        enc = encode_joints(t, p, 2, 2)
        return T.tsum(T.mul(enc.map, enc.map))

    assert grad_check(f, x) < 1e-4
