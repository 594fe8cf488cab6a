"""Finite-difference verification of every backward rule.

Each case builds a seeded input and a scalar-valued function (block
output contracted against a fixed random projection so every element
matters), then compares the tape's gradient against central differences.
Shared by the `gradcheck` CLI command and the acceptance suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .afd_loss import DecoupleConfig, decouple_loss
from .attention import hv_attention, hv_attn_params, region_attention, region_attn_params
from .dbscme import (
    channel_attn_params,
    channel_self_attention,
    dbscme_forward,
    dbscme_params,
    mha_params,
    shared_fuse,
    shared_fuse_params,
    spatial_self_attention,
)
from .encoders import MODALITY_NAMES
from .params import ParamStore, keyed_generator
from .tensor import Tensor, grad_check

DEFAULT_TOLERANCE = 1e-4


def _rand(seed, name, shape, lo=-1.0, hi=1.0):
    return keyed_generator(seed, name).uniform(lo, hi, size=shape)


def _proj(seed, name, shape):
    return Tensor(keyed_generator(seed, f"proj:{name}").standard_normal(shape))


def _scalarize(out, r):
    return T.tsum(T.mul(out, r))


# Every case: name -> (f, x) builder for one seed. The checker treats x
# as the differentiated input; anything else a case builds is constant.


def _case_matmul_2d(seed):
    b = Tensor(_rand(seed, "b", (4, 3)))
    r = _proj(seed, "matmul2d", (3, 3))
    return (lambda x: _scalarize(T.matmul(x, b), r)), Tensor(_rand(seed, "x", (3, 4)))


def _case_matmul_batched(seed):
    b = Tensor(_rand(seed, "b", (2, 4, 3)))
    r = _proj(seed, "matmulb", (2, 3, 3))
    return (lambda x: _scalarize(T.matmul(x, b), r)), Tensor(_rand(seed, "x", (2, 3, 4)))


def _case_matmul_stacked_rhs(seed):
    b = Tensor(_rand(seed, "b", (4, 5)))
    r = _proj(seed, "matmuls", (2, 3, 5))
    return (lambda x: _scalarize(T.matmul(x, b), r)), Tensor(_rand(seed, "x", (2, 3, 4)))


def _case_matmul_wrt_rhs(seed):
    a = Tensor(_rand(seed, "a", (2, 3, 4)))
    r = _proj(seed, "matmulw", (2, 3, 5))
    return (lambda x: _scalarize(T.matmul(a, x), r)), Tensor(_rand(seed, "x", (4, 5)))


def _case_conv1d(seed):
    k = Tensor(_rand(seed, "k", (3, 2, 3)))
    r = _proj(seed, "conv1d", (5, 3))
    return (lambda x: _scalarize(T.conv1d(x, k), r)), Tensor(_rand(seed, "x", (5, 2)))


def _case_conv1d_kernel(seed):
    a = Tensor(_rand(seed, "a", (2, 5, 2)))
    r = _proj(seed, "conv1dk", (2, 5, 3))
    return (lambda x: _scalarize(T.conv1d(a, x), r)), Tensor(_rand(seed, "x", (3, 2, 3)))


def _case_conv2d_1x1(seed):
    k = Tensor(_rand(seed, "k", (1, 1, 2, 3)))
    r = _proj(seed, "c11", (3, 3, 3))
    return (lambda x: _scalarize(T.conv2d(x, k), r)), Tensor(_rand(seed, "x", (3, 3, 2)))


def _case_conv2d_3x3(seed):
    k = Tensor(_rand(seed, "k", (3, 3, 2, 2)))
    r = _proj(seed, "c33", (4, 4, 2))
    return (lambda x: _scalarize(T.conv2d(x, k), r)), Tensor(_rand(seed, "x", (4, 4, 2)))


def _case_conv2d_kernel(seed):
    a = Tensor(_rand(seed, "a", (2, 4, 4, 2)))
    r = _proj(seed, "c33k", (2, 4, 4, 2))
    return (lambda x: _scalarize(T.conv2d(a, x), r)), Tensor(_rand(seed, "x", (3, 3, 2, 2)))


def _case_conv3d(seed):
    k = Tensor(_rand(seed, "k", (3, 3, 3, 2, 2)))
    r = _proj(seed, "c3", (3, 3, 3, 2))
    return (lambda x: _scalarize(T.conv3d(x, k), r)), Tensor(_rand(seed, "x", (3, 3, 3, 2)))


def _case_conv3d_kernel(seed):
    a = Tensor(_rand(seed, "a", (3, 3, 3, 1)))
    r = _proj(seed, "c3k", (3, 3, 3, 2))
    return (lambda x: _scalarize(T.conv3d(a, x), r)), Tensor(_rand(seed, "x", (3, 3, 3, 1, 2)))


def _case_softmax_last(seed):
    r = _proj(seed, "sm", (4, 5))
    return (lambda x: _scalarize(T.softmax(x, -1), r)), Tensor(_rand(seed, "x", (4, 5)))


def _case_softmax_axis0(seed):
    r = _proj(seed, "sm0", (4, 5))
    return (lambda x: _scalarize(T.softmax(x, 0), r)), Tensor(_rand(seed, "x", (4, 5)))


def _case_sigmoid(seed):
    r = _proj(seed, "sg", (3, 4))
    return (lambda x: _scalarize(T.sigmoid(x), r)), Tensor(_rand(seed, "x", (3, 4), -3, 3))


def _case_relu(seed):
    r = _proj(seed, "rl", (3, 4))
    x = _rand(seed, "x", (3, 4))
    x = np.where(np.abs(x) < 0.05, 0.2, x)  # keep clear of the kink
    return (lambda x_: _scalarize(T.relu(x_), r)), Tensor(x)


def _case_sqrt(seed):
    r = _proj(seed, "sq", (3, 4))
    x = np.abs(_rand(seed, "x", (3, 4))) + 0.5
    return (lambda x_: _scalarize(T.sqrt(x_), r)), Tensor(x)


def _case_abs(seed):
    r = _proj(seed, "ab", (3, 4))
    x = _rand(seed, "x", (3, 4))
    x = np.where(np.abs(x) < 0.05, -0.3, x)
    return (lambda x_: _scalarize(T.absolute(x_), r)), Tensor(x)


def _case_add_mul_div(seed):
    b = Tensor(_rand(seed, "b", (3, 4), 0.5, 2.0))
    c = Tensor(_rand(seed, "c", (3, 4)))
    r = _proj(seed, "amd", (3, 4))

    def f(x):
        return _scalarize(T.div(T.add(T.mul(x, c), 0.7), b), r)

    return f, Tensor(_rand(seed, "x", (3, 4)))


def _case_reductions(seed):
    r1 = _proj(seed, "red1", (4,))
    r2 = _proj(seed, "red2", (3,))

    def f(x):
        s = _scalarize(T.tsum(x, axis=0), r1)
        m = _scalarize(T.tmean(x, axis=1), r2)
        return T.add(s, m)

    return f, Tensor(_rand(seed, "x", (3, 4)))


def _case_gap(seed):
    r = _proj(seed, "gap", (2, 3))
    return (lambda x: _scalarize(T.gap(x, 2), r)), Tensor(_rand(seed, "x", (2, 4, 4, 3)))


def _case_concat_transpose_reshape(seed):
    b = Tensor(_rand(seed, "b", (3, 4)))
    r = _proj(seed, "ctr", (4, 6))

    def f(x):
        cat = T.concat([x, b], axis=0)  # (6, 4)
        return _scalarize(T.reshape(T.transpose(cat, (1, 0)), (4, 6)), r)

    return f, Tensor(_rand(seed, "x", (3, 4)))


def _case_broadcast(seed):
    r = _proj(seed, "bc", (5, 3))
    return (lambda x: _scalarize(T.broadcast_to(x, (5, 3)), r)), Tensor(_rand(seed, "x", (3,)))


def _case_index_select(seed):
    idx = np.array([0, 2, 2, 5, 1], dtype=np.intp)
    r = _proj(seed, "is", (5, 3))
    return (lambda x: _scalarize(T.index_select(x, idx), r)), Tensor(_rand(seed, "x", (6, 3)))


def _case_avg_pool(seed):
    r = _proj(seed, "ap", (2, 2, 2))
    return (lambda x: _scalarize(T.avg_pool2d(x, (2, 2)), r)), Tensor(_rand(seed, "x", (4, 4, 2)))


def _case_cross_entropy(seed):
    labels = keyed_generator(seed, "labels").integers(0, 3, size=4)
    return (lambda x: T.cross_entropy(x, labels)), Tensor(_rand(seed, "x", (4, 3)))


def _case_decouple(seed):
    sp = [Tensor(_rand(seed, f"sp{i}", (2, 5))) for i in range(2)]
    cfg = DecoupleConfig(mode=("abs", "cos", "cos2")[seed % 3])
    return (lambda x: decouple_loss(x, sp, cfg)), Tensor(_rand(seed, "x", (2, 5)))


def _case_hv_attention(seed):
    store = ParamStore(seed)
    p = hv_attn_params(store, "hv", 3)
    r = _proj(seed, "hv", (4, 4, 3))
    return (lambda x: _scalarize(hv_attention(x, p), r)), Tensor(_rand(seed, "x", (4, 4, 3)))


def _case_hv_attention_param(seed):
    store = ParamStore(seed)
    p = hv_attn_params(store, "hv", 3)
    a = Tensor(_rand(seed, "a", (4, 4, 3)))
    r = _proj(seed, "hvp", (4, 4, 3))
    return (lambda _w: _scalarize(hv_attention(a, p), r)), p.w_q


def _case_region_attention(seed):
    store = ParamStore(seed)
    p = region_attn_params(store, "rg", 3, t=2, k=2)
    r = _proj(seed, "rg", (4, 4, 3))
    return (lambda x: _scalarize(region_attention(x, p), r)), Tensor(_rand(seed, "x", (4, 4, 3)))


def _case_region_attention_noself(seed):
    store = ParamStore(seed)
    p = region_attn_params(store, "rgx", 3, t=2, k=2, exclude_self=True)
    r = _proj(seed, "rgx", (4, 4, 3))
    return (lambda x: _scalarize(region_attention(x, p), r)), Tensor(_rand(seed, "x", (4, 4, 3)))


def _case_spatial_attention(seed):
    store = ParamStore(seed)
    p = mha_params(store, "sp", 8, heads=2)
    r = _proj(seed, "sp", (2, 2, 8))
    return (lambda x: _scalarize(spatial_self_attention(x, p), r)), Tensor(
        _rand(seed, "x", (2, 2, 8))
    )


def _case_channel_attention(seed):
    store = ParamStore(seed)
    p = channel_attn_params(store, "ch", 4, heads=2)
    r = _proj(seed, "ch", (2, 2, 6))
    return (lambda x: _scalarize(channel_self_attention(x, p), r)), Tensor(
        _rand(seed, "x", (2, 2, 6))
    )


def _case_shared_fuse(seed):
    store = ParamStore(seed)
    p = shared_fuse_params(store, "sf", 4, heads=2, d_c=4)
    fb = Tensor(_rand(seed, "fb", (2, 2, 4)))
    r = _proj(seed, "sf", (2, 2, 4))
    return (lambda x: _scalarize(shared_fuse(x, fb, p), r)), Tensor(_rand(seed, "x", (2, 2, 4)))


def _case_dbscme(seed):
    store = ParamStore(seed)
    p = dbscme_params(store, dim=4, num_classes=(3, 2), heads=2, d_c=4, head_hidden=6)
    maps = {
        name: Tensor(_rand(seed, f"map:{name}", (2, 2, 4))) for name in MODALITY_NAMES
    }
    projs = [_proj(seed, "db0", (3,)), _proj(seed, "db1", (2,))]

    def f(x):
        m = dict(maps)
        m["driver0"] = x
        outs = dbscme_forward(m, p)
        s = T.add(_scalarize(outs.logits[0], projs[0]), _scalarize(outs.logits[1], projs[1]))
        return T.add(s, decouple_loss(outs.f_sh, outs.f_sp))

    return f, Tensor(_rand(seed, "x", (2, 2, 4)))


CASES = [
    ("matmul_2d", _case_matmul_2d),
    ("matmul_batched", _case_matmul_batched),
    ("matmul_stacked_rhs", _case_matmul_stacked_rhs),
    ("matmul_wrt_rhs", _case_matmul_wrt_rhs),
    ("conv1d", _case_conv1d),
    ("conv1d_kernel", _case_conv1d_kernel),
    ("conv2d_1x1", _case_conv2d_1x1),
    ("conv2d_3x3", _case_conv2d_3x3),
    ("conv2d_kernel", _case_conv2d_kernel),
    ("conv3d", _case_conv3d),
    ("conv3d_kernel", _case_conv3d_kernel),
    ("softmax_last", _case_softmax_last),
    ("softmax_axis0", _case_softmax_axis0),
    ("sigmoid", _case_sigmoid),
    ("relu", _case_relu),
    ("sqrt", _case_sqrt),
    ("abs", _case_abs),
    ("add_mul_div", _case_add_mul_div),
    ("reductions", _case_reductions),
    ("gap", _case_gap),
    ("concat_transpose_reshape", _case_concat_transpose_reshape),
    ("broadcast_to", _case_broadcast),
    ("index_select", _case_index_select),
    ("avg_pool2d", _case_avg_pool),
    ("cross_entropy", _case_cross_entropy),
    ("decouple_loss", _case_decouple),
    ("hv_attention", _case_hv_attention),
    ("hv_attention_wrt_param", _case_hv_attention_param),
    ("region_attention", _case_region_attention),
    ("region_attention_no_self", _case_region_attention_noself),
    ("spatial_self_attention", _case_spatial_attention),
    ("channel_self_attention", _case_channel_attention),
    ("shared_fuse", _case_shared_fuse),
    ("dbscme_forward", _case_dbscme),
]


def run_gradcheck(seeds=(0, 1, 2, 3, 4), tolerance: float = DEFAULT_TOLERANCE):
    """Run every case for every seed; returns (name, seed, max_err) rows."""
    results = []
    for name, builder in CASES:
        for seed in seeds:
            f, x = builder(seed)
            err = grad_check(f, x)
            results.append((name, seed, err))
    return results
