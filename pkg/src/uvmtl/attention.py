"""Axial and routed-region attention over channels-last feature maps.

Both ops accept a single map (H, W, C) or a batch (B, H, W, C); the
batch axis is folded into the attention batch internally so one graph
serves the whole minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import IndivisibleSpatialExtent, InvalidK, ShapeMismatch
from .params import ParamStore
from .tensor import Tensor


@dataclass
class HVAttnParams:
    """Projections for the horizontal-vertical attention pair."""

    w_q: Tensor  # (C, C)
    w_k: Tensor  # (C, C)
    w_v: Tensor  # (C, C)
    w_h: Tensor  # (1, 1, C, C)  1x1 conv on the row-attention output
    w_reduce: Tensor  # (1, 1, 2C, C)  1x1 reduce after channel concat


def hv_attn_params(store: ParamStore, prefix: str, c: int) -> HVAttnParams:
    return HVAttnParams(
        w_q=store.uniform(f"{prefix}.w_q", (c, c), fan_in=c),
        w_k=store.uniform(f"{prefix}.w_k", (c, c), fan_in=c),
        w_v=store.uniform(f"{prefix}.w_v", (c, c), fan_in=c),
        w_h=store.uniform(f"{prefix}.w_h", (1, 1, c, c), fan_in=c),
        w_reduce=store.uniform(f"{prefix}.w_reduce", (1, 1, 2 * c, c), fan_in=2 * c),
    )


@dataclass
class RegionAttnParams:
    """Projections plus routing hyperparameters for region attention."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    t: int = 7  # region tile edge
    k: int = 4  # routed regions per query region
    exclude_self: bool = False


def region_attn_params(
    store: ParamStore,
    prefix: str,
    c: int,
    t: int = 7,
    k: int = 4,
    exclude_self: bool = False,
) -> RegionAttnParams:
    return RegionAttnParams(
        w_q=store.uniform(f"{prefix}.w_q", (c, c), fan_in=c),
        w_k=store.uniform(f"{prefix}.w_k", (c, c), fan_in=c),
        w_v=store.uniform(f"{prefix}.w_v", (c, c), fan_in=c),
        t=t,
        k=k,
        exclude_self=exclude_self,
    )


def _batched(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def hv_attention(x: Tensor, p: HVAttnParams) -> Tensor:
    """Column attention, then row attention, then fuse with the input.

    Queries for the row pass come from the column-pass output; keys and
    values for both passes are projections of the original map. The two
    streams meet as conv1x1(row_out) concatenated with the input on the
    channel axis, reduced back to C by a final 1x1 conv.
    """
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    scale = 1.0 / float(np.sqrt(c))

    # Scaling q instead of the score matrix saves a full-score-size multiply.
    q = T.mul(T.matmul(xb, p.w_q), scale)
    k = T.matmul(xb, p.w_k)
    v = T.matmul(xb, p.w_v)

    # Pass 1: attend within each column (fixed w, mix over h').
    qc = T.reshape(T.transpose(q, (0, 2, 1, 3)), (b * w, h, c))
    kc = T.reshape(T.transpose(k, (0, 2, 1, 3)), (b * w, h, c))
    vc = T.reshape(T.transpose(v, (0, 2, 1, 3)), (b * w, h, c))
    col_scores = T.matmul(qc, T.transpose(kc, (0, 2, 1)))
    col_attn = T.softmax(col_scores, axis=-1)
    fv = T.matmul(col_attn, vc)
    fv = T.transpose(T.reshape(fv, (b, w, h, c)), (0, 2, 1, 3))

    # Pass 2: attend within each row; queries from pass 1, k/v original.
    qr = T.mul(T.reshape(fv, (b * h, w, c)), scale)
    kr = T.reshape(k, (b * h, w, c))
    vr = T.reshape(v, (b * h, w, c))
    row_scores = T.matmul(qr, T.transpose(kr, (0, 2, 1)))
    row_attn = T.softmax(row_scores, axis=-1)
    fh = T.reshape(T.matmul(row_attn, vr), (b, h, w, c))

    fused = T.concat([T.conv2d(fh, p.w_h), xb], axis=-1)
    out = T.conv2d(fused, p.w_reduce)
    return T.reshape(out, (h, w, c)) if squeeze else out


def hv_attention_weights(x: Tensor, p: HVAttnParams):
    """Column and row attention matrices, for diagnostics and tests."""
    with T.no_grad():
        xb, squeeze = _batched(x)
        b, h, w, c = xb.shape
        scale = 1.0 / float(np.sqrt(c))
        q = T.mul(T.matmul(xb, p.w_q), scale)
        k = T.matmul(xb, p.w_k)
        v = T.matmul(xb, p.w_v)
        qc = T.reshape(T.transpose(q, (0, 2, 1, 3)), (b * w, h, c))
        kc = T.reshape(T.transpose(k, (0, 2, 1, 3)), (b * w, h, c))
        vc = T.reshape(T.transpose(v, (0, 2, 1, 3)), (b * w, h, c))
        col_attn = T.softmax(T.matmul(qc, T.transpose(kc, (0, 2, 1))), -1)
        fv = T.matmul(col_attn, vc)
        fv = T.transpose(T.reshape(fv, (b, w, h, c)), (0, 2, 1, 3))
        qr = T.mul(T.reshape(fv, (b * h, w, c)), scale)
        kr = T.reshape(k, (b * h, w, c))
        row_attn = T.softmax(T.matmul(qr, T.transpose(kr, (0, 2, 1))), -1)
    col = col_attn.data.reshape(b, w, h, h)
    row = row_attn.data.reshape(b, h, w, w)
    if squeeze:
        return col[0], row[0]
    return col, row


def _partition(xb: Tensor, t: int):
    b, h, w, c = xb.shape
    if h % t or w % t:
        raise IndivisibleSpatialExtent(f"tile {t} on {h}x{w}")
    gh, gw = h // t, w // t
    tiles = T.reshape(xb, (b, gh, t, gw, t, c))
    tiles = T.transpose(tiles, (0, 1, 3, 2, 4, 5))
    return T.reshape(tiles, (b, gh * gw, t * t, c)), gh, gw


def _unpartition(tiles: Tensor, b, gh, gw, t, c) -> Tensor:
    x = T.reshape(tiles, (b, gh, gw, t, t, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * t, gw * t, c))


def route_topk(sim: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    """Per-row top-k column indices of a square similarity matrix.

    Ties resolve toward the lower index (stable descending sort); with
    exclude_self the diagonal is never eligible.
    """
    r = sim.shape[-1]
    s = np.array(sim, dtype=np.float64)
    if exclude_self:
        eye = np.eye(r, dtype=bool)
        s[..., eye] = -np.inf
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :k].astype(np.intp)


def region_attention(x: Tensor, p: RegionAttnParams, return_indices: bool = False):
    """Coarse top-k routing between tiles, dense attention inside the union.

    The map splits into non-overlapping t x t tiles. Tile descriptors
    (mean-pooled projected queries/keys) pick the k most similar tiles
    per query tile; each position then attends over every position of
    its routed tiles. Routing indices are plain integers outside the
    graph, so no gradient flows through the selection.
    """
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    tiles, gh, gw = _partition(xb, p.t)
    r = gh * gw
    limit = r - 1 if p.exclude_self else r
    if p.k < 1 or p.k > limit:
        raise InvalidK(f"k={p.k} with {r} regions (exclude_self={p.exclude_self})")
    tt = p.t * p.t
    scale = 1.0 / float(np.sqrt(c))

    q = T.matmul(tiles, p.w_q)
    k_ = T.matmul(tiles, p.w_k)
    v = T.matmul(tiles, p.w_v)

    with T.no_grad():
        qbar = T.tmean(q, axis=2)
        kbar = T.tmean(k_, axis=2)
        sim = T.matmul(qbar, T.transpose(kbar, (0, 2, 1))).data
    idx = route_topk(sim, p.k, p.exclude_self)  # (b, r, k)

    # Gather the routed tiles' keys/values as one flat index_select.
    base = (np.arange(b, dtype=np.intp) * r)[:, None, None]
    flat_regions = ((idx + base) * tt)[..., None] + np.arange(tt, dtype=np.intp)
    flat_idx = flat_regions.reshape(-1)
    k_flat = T.reshape(k_, (b * r * tt, c))
    v_flat = T.reshape(v, (b * r * tt, c))
    ke = T.reshape(T.index_select(k_flat, flat_idx), (b * r, p.k * tt, c))
    ve = T.reshape(T.index_select(v_flat, flat_idx), (b * r, p.k * tt, c))

    # Scale q rather than the (much larger) score matrix.
    q2 = T.mul(T.reshape(q, (b * r, tt, c)), scale)
    scores = T.matmul(q2, T.transpose(ke, (0, 2, 1)))
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.matmul(attn, ve), (b, r, tt, c))
    out = _unpartition(out, b, gh, gw, p.t, c)

    if squeeze:
        out = T.reshape(out, (h, w, c))
        idx = idx[0]
    if return_indices:
        return out, idx
    return out


def marnet_head(fx: Tensor, fc: Tensor, bias: Tensor | None = None) -> Tensor:
    """Project the globally pooled map to the modality embedding."""
    pooled = T.gap(fx, 2)
    single = pooled.ndim == 1
    if single:
        pooled = T.reshape(pooled, (1,) + pooled.shape)
    vec = T.matmul(pooled, fc)
    if bias is not None:
        vec = T.add(vec, T.broadcast_to(bias, vec.shape))
    if single:
        vec = T.reshape(vec, (vec.shape[-1],))
    return vec
