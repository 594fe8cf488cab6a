"""Dual-branch fusion: task-specific attention branches and a recursive
gated shared branch, blended per task into classification logits.

The concatenated modality map F_c (channels C' = 8 * D) feeds one
spatial-then-channel attention stack per task (the specific branch).
Group means of the driver, scene, and joint maps feed two rounds of
gated fusion (driver with scene, then joints with that result) to form
the shared map. Each task head mixes the pooled shared feature with its
own channel-reweighted specific feature through a learned scalar gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import EmptyList, InvalidConfig, ShapeMismatch
from .params import ParamStore
from .tensor import Tensor


@dataclass
class MHAParams:
    """Token self-attention projections: query/key/value and output."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int


def mha_params(store: ParamStore, prefix: str, width: int, heads: int) -> MHAParams:
    if heads < 1 or width % heads:
        raise InvalidConfig(f"width {width} not divisible by heads {heads}")
    return MHAParams(
        w_q=store.uniform(f"{prefix}.w_q", (width, width), fan_in=width),
        w_k=store.uniform(f"{prefix}.w_k", (width, width), fan_in=width),
        w_v=store.uniform(f"{prefix}.w_v", (width, width), fan_in=width),
        w_o=store.uniform(f"{prefix}.w_o", (width, width), fan_in=width),
        heads=heads,
    )


@dataclass
class ChannelAttnParams:
    """1-D conv lifts plus head projection for channel-token attention."""

    k_q: Tensor  # (3, 1, d_c)
    k_k: Tensor
    k_v: Tensor
    w_out: Tensor  # (d_c, 1)
    b_out: Tensor  # (1,)
    heads: int


def channel_attn_params(
    store: ParamStore, prefix: str, d_c: int, heads: int
) -> ChannelAttnParams:
    if heads < 1 or d_c % heads:
        raise InvalidConfig(f"channel width {d_c} not divisible by heads {heads}")
    return ChannelAttnParams(
        k_q=store.uniform(f"{prefix}.k_q", (3, 1, d_c), fan_in=3),
        k_k=store.uniform(f"{prefix}.k_k", (3, 1, d_c), fan_in=3),
        k_v=store.uniform(f"{prefix}.k_v", (3, 1, d_c), fan_in=3),
        w_out=store.uniform(f"{prefix}.w_out", (d_c, 1), fan_in=d_c),
        b_out=store.zeros(f"{prefix}.b_out", (1,)),
        heads=heads,
    )


@dataclass
class SharedFuseParams:
    """Two mixing convs plus a spatial+channel stack that forms the gate."""

    w1: Tensor  # (1, 1, D, D)
    b1: Tensor
    w3: Tensor  # (3, 3, D, D)
    b3: Tensor
    gate_spatial: MHAParams
    gate_channel: ChannelAttnParams


def shared_fuse_params(
    store: ParamStore, prefix: str, dim: int, heads: int, d_c: int
) -> SharedFuseParams:
    return SharedFuseParams(
        w1=store.uniform(f"{prefix}.w1", (1, 1, dim, dim), fan_in=dim),
        b1=store.zeros(f"{prefix}.b1", (dim,)),
        w3=store.uniform(f"{prefix}.w3", (3, 3, dim, dim), fan_in=9 * dim),
        b3=store.zeros(f"{prefix}.b3", (dim,)),
        gate_spatial=mha_params(store, f"{prefix}.gate_sp", dim, heads),
        gate_channel=channel_attn_params(store, f"{prefix}.gate_ch", d_c, heads),
    )


@dataclass
class TaskSpec:
    """Per-task branch parameters and head."""

    name: str
    num_classes: int
    spatial: MHAParams
    channel: ChannelAttnParams
    se_w1: Tensor  # (C', C'/r)
    se_b1: Tensor
    se_w2: Tensor  # (C'/r, C')
    se_b2: Tensor
    l1: Tensor  # (C', D_h) shared-feature blend layer
    l2: Tensor  # (C', D_h) specific-feature blend layer
    w_blend: Tensor  # (1,) scalar gate logit, init 0
    head: Tensor  # (D_h, num_classes)
    head_b: Tensor
    loss_scale: float = 1.0


def task_spec(
    store: ParamStore,
    name: str,
    num_classes: int,
    cp: int,
    heads: int,
    d_c: int,
    head_hidden: int,
    se_reduction: int = 4,
    loss_scale: float = 1.0,
) -> TaskSpec:
    if num_classes < 2:
        raise InvalidConfig(f"task {name}: need >= 2 classes, got {num_classes}")
    if se_reduction < 1 or cp % se_reduction:
        raise InvalidConfig(f"C'={cp} not divisible by reduction {se_reduction}")
    mid = cp // se_reduction
    pre = f"task.{name}"
    return TaskSpec(
        name=name,
        num_classes=num_classes,
        spatial=mha_params(store, f"{pre}.sp", cp, heads),
        channel=channel_attn_params(store, f"{pre}.ch", d_c, heads),
        se_w1=store.uniform(f"{pre}.se_w1", (cp, mid), fan_in=cp),
        se_b1=store.zeros(f"{pre}.se_b1", (mid,)),
        se_w2=store.uniform(f"{pre}.se_w2", (mid, cp), fan_in=mid),
        se_b2=store.zeros(f"{pre}.se_b2", (cp,)),
        l1=store.uniform(f"{pre}.l1", (cp, head_hidden), fan_in=cp),
        l2=store.uniform(f"{pre}.l2", (cp, head_hidden), fan_in=cp),
        w_blend=store.zeros(f"{pre}.w_blend", (1,)),
        head=store.uniform(f"{pre}.head", (head_hidden, num_classes), fan_in=head_hidden),
        head_b=store.zeros(f"{pre}.head_b", (num_classes,)),
        loss_scale=loss_scale,
    )


@dataclass
class DbscmeParams:
    fuse_driver_scene: SharedFuseParams
    fuse_joints: SharedFuseParams
    w_lift: Tensor  # (D, C') shared pooled feature lift
    b_lift: Tensor
    tasks: list[TaskSpec] = field(default_factory=list)


def dbscme_params(
    store: ParamStore,
    dim: int,
    num_classes,
    heads: int,
    d_c: int,
    head_hidden: int,
    se_reduction: int = 4,
    loss_scales=None,
) -> DbscmeParams:
    cp = 8 * dim
    if loss_scales is None:
        loss_scales = [1.0] * len(num_classes)
    tasks = [
        task_spec(
            store,
            f"t{j}",
            k,
            cp,
            heads,
            d_c,
            head_hidden,
            se_reduction,
            float(loss_scales[j]),
        )
        for j, k in enumerate(num_classes)
    ]
    return DbscmeParams(
        fuse_driver_scene=shared_fuse_params(store, "fuse.ds", dim, heads, d_c),
        fuse_joints=shared_fuse_params(store, "fuse.jo", dim, heads, d_c),
        w_lift=store.uniform("fuse.w_lift", (dim, cp), fan_in=dim),
        b_lift=store.zeros("fuse.b_lift", (cp,)),
        tasks=tasks,
    )


@dataclass
class TaskOutputs:
    """Forward products the loss side consumes."""

    logits: list[Tensor]  # per task, (B, K_j) or (K_j,)
    f_sh: Tensor  # pooled lifted shared feature, (B, C') or (C',)
    f_sp: list[Tensor]  # per task pooled specific feature


def _as_batch_map(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def spatial_self_attention(fc: Tensor, p: MHAParams) -> Tensor:
    """Multi-head self-attention over the H*W positions, residual added."""
    xb, squeeze = _as_batch_map(fc)
    b, h, w, c = xb.shape
    if c % p.heads:
        raise InvalidConfig(f"channels {c} not divisible by heads {p.heads}")
    tokens = T.reshape(xb, (b, h * w, c))
    q = T.matmul(tokens, p.w_q)
    k = T.matmul(tokens, p.w_k)
    v = T.matmul(tokens, p.w_v)
    mixed = _mha_tokens(q, k, v, p.heads)
    out = T.matmul(mixed, p.w_o)
    res = T.add(xb, T.reshape(out, (b, h, w, c)))
    return T.reshape(res, (h, w, c)) if squeeze else res


def _mha_tokens(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention with the head axis folded into batch."""
    b, n, c = q.shape
    dh = c // heads
    scale = 1.0 / float(np.sqrt(dh))

    def split(x):
        x = T.reshape(x, (b, n, heads, dh))
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * heads, n, dh))

    qs, ks, vs = split(q), split(k), split(v)
    # q carries the 1/sqrt(dh) factor; the score matrix is heads-times bigger
    scores = T.matmul(T.mul(qs, scale), T.transpose(ks, (0, 2, 1)))
    attn = T.softmax(scores, axis=-1)
    mixed = T.matmul(attn, vs)
    mixed = T.transpose(T.reshape(mixed, (b, heads, n, dh)), (0, 2, 1, 3))
    return T.reshape(mixed, (b, n, c))


def channel_self_attention(fs: Tensor, p: ChannelAttnParams) -> Tensor:
    """Reweight channels by attending over the pooled channel sequence.

    The pooled descriptor (one value per channel) is lifted to d_c lanes
    by three 3-tap convs, attended as C' tokens, squashed back to one
    scalar per channel, and applied as a sigmoid gate on the input map.
    """
    xb, squeeze = _as_batch_map(fs)
    b, h, w, c = xb.shape
    g = T.gap(xb, 2)  # (B, C)
    seq = T.reshape(g, (b, c, 1))
    q = T.conv1d(seq, p.k_q)
    k = T.conv1d(seq, p.k_k)
    v = T.conv1d(seq, p.k_v)
    mixed = _mha_tokens(q, k, v, p.heads)  # (B, C, d_c)
    scores = T.add(T.matmul(mixed, p.w_out), T.broadcast_to(p.b_out, (b, c, 1)))
    gate = T.sigmoid(T.reshape(scores, (b, c)))
    gate_map = T.broadcast_to(T.reshape(gate, (b, 1, 1, c)), (b, h, w, c))
    out = T.mul(xb, gate_map)
    return T.reshape(out, (h, w, c)) if squeeze else out


def shared_fuse(fa: Tensor, fb: Tensor, p: SharedFuseParams) -> Tensor:
    """Convex per-element blend of two maps under a learned gate.

    m = conv1x1(fa + fb) + conv3x3(fa + fb); the gate is the sigmoid of a
    spatial+channel attention stack over m; output fb*g + fa*(1 - g).
    """
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"shared_fuse {fa.shape} vs {fb.shape}")
    s = T.add(fa, fb)
    m1 = T.add(T.conv2d(s, p.w1), T.broadcast_to(p.b1, s.shape))
    m3 = T.add(T.conv2d(s, p.w3), T.broadcast_to(p.b3, s.shape))
    m = T.add(m1, m3)
    stack = channel_self_attention(spatial_self_attention(m, p.gate_spatial), p.gate_channel)
    g = T.sigmoid(stack)
    one_minus = T.add(T.mul(g, -1.0), 1.0)
    return T.add(T.mul(fb, g), T.mul(fa, one_minus))


def group_mean(maps: list[Tensor]) -> Tensor:
    if not maps:
        raise EmptyList("group_mean of zero maps")
    acc = maps[0]
    for m in maps[1:]:
        acc = T.add(acc, m)
    return T.mul(acc, 1.0 / len(maps))


def squeeze_excite(f: Tensor, spec: TaskSpec) -> Tensor:
    """Channel gate on a pooled feature vector: f * sigmoid(MLP(f))."""
    single = f.ndim == 1
    fb = T.reshape(f, (1,) + f.shape) if single else f
    hbit = T.relu(T.add(T.matmul(fb, spec.se_w1), T.broadcast_to(spec.se_b1, (fb.shape[0], spec.se_b1.shape[0]))))
    a = T.sigmoid(T.add(T.matmul(hbit, spec.se_w2), T.broadcast_to(spec.se_b2, fb.shape)))
    out = T.mul(fb, a)
    return T.reshape(out, f.shape) if single else out


def dbscme_forward(
    maps: dict[str, Tensor],
    p: DbscmeParams,
    disable_spatial: bool = False,
    disable_channel: bool = False,
) -> TaskOutputs:
    """Run both branches over the eight aligned modality maps.

    maps must carry exactly the canonical eight modality names, each map
    (B, H', W', D) or (H', W', D) with matching shapes throughout.
    """
    from .encoders import MODALITY_GROUPS, MODALITY_NAMES

    if set(maps) != set(MODALITY_NAMES):
        raise ShapeMismatch(f"need maps for {MODALITY_NAMES}, got {sorted(maps)}")
    ref = maps[MODALITY_NAMES[0]].shape
    for name in MODALITY_NAMES:
        if maps[name].shape != ref:
            raise ShapeMismatch(f"{name} map {maps[name].shape} != {ref}")

    fc = T.concat([maps[name] for name in MODALITY_NAMES], axis=-1)
    squeeze = fc.ndim == 3

    f_dr = group_mean([maps[n] for n in MODALITY_GROUPS["driver"]])
    f_sc = group_mean([maps[n] for n in MODALITY_GROUPS["scene"]])
    f_jo = group_mean([maps[n] for n in MODALITY_GROUPS["joints"]])

    f_ps = shared_fuse(f_dr, f_sc, p.fuse_driver_scene)
    f_sh_map = shared_fuse(f_jo, f_ps, p.fuse_joints)

    pooled_sh = T.gap(f_sh_map, 2)
    if pooled_sh.ndim == 1:
        pooled_sh = T.reshape(pooled_sh, (1,) + pooled_sh.shape)
    f_sh = T.add(
        T.matmul(pooled_sh, p.w_lift),
        T.broadcast_to(p.b_lift, (pooled_sh.shape[0], p.b_lift.shape[0])),
    )

    logits_all: list[Tensor] = []
    f_sp_all: list[Tensor] = []
    for spec in p.tasks:
        branch = fc if disable_spatial else spatial_self_attention(fc, spec.spatial)
        branch = branch if disable_channel else channel_self_attention(branch, spec.channel)
        f_sp = T.gap(branch, 2)
        if f_sp.ndim == 1:
            f_sp = T.reshape(f_sp, (1,) + f_sp.shape)
        f_ca = squeeze_excite(f_sp, spec)

        b = f_sp.shape[0]
        s = T.sigmoid(spec.w_blend)  # (1,)
        s_map = T.broadcast_to(T.reshape(s, (1, 1)), (b, spec.l1.shape[1]))
        one_minus = T.add(T.mul(s_map, -1.0), 1.0)
        blended = T.add(
            T.mul(T.matmul(f_sh, spec.l1), s_map),
            T.mul(T.matmul(f_ca, spec.l2), one_minus),
        )
        logits = T.add(
            T.matmul(blended, spec.head),
            T.broadcast_to(spec.head_b, (b, spec.num_classes)),
        )
        logits_all.append(logits)
        f_sp_all.append(f_sp)

    out_sh = f_sh
    if squeeze:
        out_sh = T.reshape(f_sh, (f_sh.shape[-1],))
        logits_all = [T.reshape(l, (l.shape[-1],)) for l in logits_all]
        f_sp_all = [T.reshape(f, (f.shape[-1],)) for f in f_sp_all]
    return TaskOutputs(logits=logits_all, f_sh=out_sh, f_sp=f_sp_all)
