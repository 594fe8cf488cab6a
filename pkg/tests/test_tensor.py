"""Engine-level checks: forward semantics, backward rules, guards."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import uvmtl.tensor as T
from uvmtl.errors import (
    EmptyList,
    GraphConsumed,
    IndivisibleSpatialExtent,
    NotScalar,
    ShapeMismatch,
)
from uvmtl.tensor import Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def test_add_forward_backward():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, -1.0], requires_grad=True)
    out = T.tsum(T.add(a, b))
    out.backward()
    assert np.allclose(out.data, 5.0)
    assert np.allclose(a.grad, [1.0, 1.0])
    assert np.allclose(b.grad, [1.0, 1.0])


def test_add_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))


def test_mul_backward_is_other_operand():
    a = Tensor(rng(1).normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng(2).normal(size=(3, 2)), requires_grad=True)
    T.tsum(T.mul(a, b)).backward()
    assert np.allclose(a.grad, b.data)
    assert np.allclose(b.grad, a.data)


def test_scalar_ops():
    a = Tensor([2.0, -4.0], requires_grad=True)
    out = T.tsum(T.mul(T.add(a, 1.0), 3.0))
    out.backward()
    assert np.allclose(out.data, 0.0)
    assert np.allclose(a.grad, [3.0, 3.0])


def test_div_value_and_grad():
    a = Tensor([6.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    out = T.div(a, b)
    T.tsum(out).backward()
    assert np.allclose(out.data, 2.0)
    assert np.allclose(a.grad, 1.0 / 3.0)
    assert np.allclose(b.grad, -6.0 / 9.0)


def test_relu_zero_negative_side():
    x = Tensor([-1.0, 0.5], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert np.allclose(x.grad, [0.0, 1.0])


def test_sigmoid_extreme_inputs_finite():
    x = Tensor([-800.0, 0.0, 800.0])
    y = T.sigmoid(x)
    assert np.all(np.isfinite(y.data))
    assert np.allclose(y.data, [0.0, 0.5, 1.0])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = rng(3).normal(size=(4, 5))
    a = T.softmax(Tensor(x), axis=-1).data
    b = T.softmax(Tensor(x + 1000.0), axis=-1).data
    assert np.allclose(a.sum(axis=-1), 1.0)
    assert np.allclose(a, b)


def test_softmax_huge_logits_stable():
    y = T.softmax(Tensor([1e4, 0.0, -1e4])).data
    assert np.all(np.isfinite(y)) and abs(y.sum() - 1.0) < 1e-12


def test_cross_entropy_matches_manual_nll():
    z = rng(4).normal(size=(6, 3))
    labels = rng(5).integers(0, 3, size=6)
    got = T.cross_entropy(Tensor(z), labels).data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(6), labels]))
    assert abs(float(got) - want) < 1e-12


def test_cross_entropy_label_bounds():
    with pytest.raises(ShapeMismatch):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_matmul_2d_and_batched():
    a = rng(6).normal(size=(4, 3))
    b = rng(7).normal(size=(3, 5))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
    ab = rng(8).normal(size=(2, 4, 3))
    bb = rng(9).normal(size=(2, 3, 5))
    assert np.allclose(T.matmul(Tensor(ab), Tensor(bb)).data, ab @ bb)


def test_matmul_nd_by_2d():
    a = rng(10).normal(size=(2, 3, 4, 5))
    w = rng(11).normal(size=(5, 6))
    assert np.allclose(T.matmul(Tensor(a), Tensor(w)).data, a @ w)


def test_no_implicit_broadcast():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3,)))
    with pytest.raises(ShapeMismatch):
        T.add(a, b)
    with pytest.raises(ShapeMismatch):
        T.mul(a, b)


def test_broadcast_to_backward_sums():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.broadcast_to(x, (3, 2))
    T.tsum(y).backward()
    assert np.allclose(x.grad, [3.0, 3.0])


def test_concat_and_backward_split():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(2 * np.ones((2, 3)), requires_grad=True)
    out = T.concat([a, b], axis=1)
    assert out.shape == (2, 5)
    T.tsum(T.mul(out, out)).backward()
    assert np.allclose(a.grad, 2.0)
    assert np.allclose(b.grad, 4.0)


def test_concat_guards():
    with pytest.raises(EmptyList):
        T.concat([], axis=0)
    with pytest.raises(ShapeMismatch):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_index_select_gather_scatter():
    x = Tensor(np.arange(12.0).reshape(6, 2), requires_grad=True)
    idx = np.array([0, 0, 5])
    y = T.index_select(x, idx)
    assert np.allclose(y.data, x.data[idx])
    T.tsum(y).backward()
    want = np.zeros((6, 2))
    want[0] = 2.0
    want[5] = 1.0
    assert np.allclose(x.grad, want)


def test_reshape_transpose_roundtrip_grads():
    x = Tensor(rng(12).normal(size=(2, 3, 4)), requires_grad=True)
    y = T.transpose(T.reshape(x, (6, 4)), (1, 0))
    T.tsum(T.mul(y, y)).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_tsum_axes_and_keepdims():
    x = rng(13).normal(size=(2, 3, 4))
    assert np.allclose(T.tsum(Tensor(x), axis=(0, 2)).data, x.sum(axis=(0, 2)))
    assert np.allclose(
        T.tsum(Tensor(x), axis=1, keepdims=True).data, x.sum(axis=1, keepdims=True)
    )


def test_gap_means_spatial_axes():
    x = rng(14).normal(size=(5, 7, 3))
    assert np.allclose(T.gap(Tensor(x), 2).data, x.mean(axis=(0, 1)))
    xb = rng(15).normal(size=(2, 5, 7, 3))
    assert np.allclose(T.gap(Tensor(xb), 2).data, xb.mean(axis=(1, 2)))


def test_avg_pool2d_downsamples_by_mean():
    x = rng(16).normal(size=(4, 6, 2))
    y = T.avg_pool2d(Tensor(x), (2, 3)).data
    want = x.reshape(2, 2, 2, 3, 2).mean(axis=(1, 3))
    assert np.allclose(y, want)
    with pytest.raises(IndivisibleSpatialExtent):
        T.avg_pool2d(Tensor(x), (3, 3))


def test_conv1d_matches_manual_3tap():
    x = rng(17).normal(size=(5, 2))
    k = rng(18).normal(size=(3, 2, 4))
    y = T.conv1d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    want = np.zeros((5, 4))
    for i in range(5):
        for dt in range(3):
            want[i] += xp[i + dt] @ k[dt]
    assert np.allclose(y, want)


def test_conv2d_1x1_is_channel_matmul():
    x = rng(19).normal(size=(3, 4, 5))
    k = rng(20).normal(size=(1, 1, 5, 2))
    y = T.conv2d(Tensor(x), Tensor(k)).data
    assert np.allclose(y, x @ k[0, 0])


def test_conv2d_3x3_matches_nested_loops():
    x = rng(21).normal(size=(4, 4, 2))
    k = rng(22).normal(size=(3, 3, 2, 3))
    y = T.conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    want = np.zeros((4, 4, 3))
    for i in range(4):
        for j in range(4):
            for di in range(3):
                for dj in range(3):
                    want[i, j] += xp[i + di, j + dj] @ k[di, dj]
    assert np.allclose(y, want)


def test_conv3d_matches_nested_loops():
    x = rng(23).normal(size=(4, 5, 3, 1))
    k = rng(24).normal(size=(3, 3, 3, 1, 2))
    y = T.conv3d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    want = np.zeros((4, 5, 3, 2))
    for a in range(4):
        for b in range(5):
            for c in range(3):
                for da in range(3):
                    for db in range(3):
                        for dc in range(3):
                            want[a, b, c] += xp[a + da, b + db, c + dc] @ k[da, db, dc]
    assert np.allclose(y, want, atol=1e-10)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalar):
        T.mul(x, 2.0).backward()


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    out = T.tsum(T.mul(x, x))
    out.backward()
    with pytest.raises(GraphConsumed):
        out.backward()


def test_fanout_accumulates_both_paths():
    x = Tensor([3.0], requires_grad=True)
    y = T.add(T.mul(x, 2.0), T.mul(x, x))  # 2x + x^2, d/dx = 2 + 2x = 8
    T.tsum(y).backward()
    assert np.allclose(x.grad, 8.0)


def test_grad_does_not_alias_shared_upstream():
    # one upstream gradient array feeds two parents; accumulating into one
    # of them must not corrupt the other
    a = Tensor(rng(25).normal(size=(4,)), requires_grad=True)
    b = Tensor(rng(26).normal(size=(4,)), requires_grad=True)
    s = T.add(a, b)
    out = T.tsum(T.add(s, T.mul(a, 3.0)))
    out.backward()
    assert np.allclose(b.grad, 1.0)
    assert np.allclose(a.grad, 4.0)


def test_no_grad_blocks_taping():
    x = Tensor([2.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y.requires_grad is False
    assert y._backward is None


def test_detached_constants_track_nothing():
    c = T.constant(np.ones(4))
    assert c.requires_grad is False


@pytest.mark.parametrize(
    "name,f,shape",
    [
        ("relu", lambda x: T.tsum(T.relu(x)), (7,)),
        ("sigmoid", lambda x: T.tsum(T.sigmoid(x)), (5,)),
        ("sqrt", lambda x: T.tsum(T.sqrt(T.add(T.mul(x, x), 1.0))), (5,)),
        ("softmax", lambda x: T.tsum(T.mul(T.softmax(x, -1), T.softmax(x, -1))), (3, 4)),
        ("matmul", lambda x: T.tsum(T.matmul(x, T.transpose(x, (1, 0)))), (3, 4)),
        ("mean", lambda x: T.tmean(T.mul(x, x)), (4, 3)),
    ],
)
def test_grad_check_simple_ops(name, f, shape):
    x = Tensor(rng(hash(name) % 1000).normal(size=shape) + 0.1, requires_grad=True)
    assert grad_check(f, x) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_backward_any_seed(seed):
    x = Tensor(rng(seed).normal(size=(2, 5)), requires_grad=True)
    err = grad_check(lambda t: T.tsum(T.mul(T.softmax(t, -1), 0.5)), x)
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_entropy_backward_any_seed(seed):
    r = rng(seed)
    labels = r.integers(0, 4, size=5)
    x = Tensor(r.normal(size=(5, 4)), requires_grad=True)
    err = grad_check(lambda t: T.cross_entropy(t, labels), x)
    assert err < 1e-4
