"""Per-modality encoders producing aligned spatial maps and vectors.

Six image-like streams (three driver-facing, three scene-facing) share
one architecture: a 3x3 stem, the horizontal-vertical attention pair,
routed region attention, and a pooled linear head. Two joint streams run
two 3x3x3 convolutions over (frames, joints, coords) and are projected
onto the common map grid, since skeleton data has no native H x W.

Every encoder output is an EncodedModality whose map lives on the same
(map_h, map_w, dim) grid, which is what the fusion stage concatenates.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import (
    HVAttnParams,
    RegionAttnParams,
    hv_attention,
    hv_attn_params,
    marnet_head,
    region_attention,
    region_attn_params,
)
from .errors import ShapeMismatch
from .params import ParamStore
from .tensor import Tensor

IMAGE_MODALITIES = ("driver0", "driver1", "driver2", "scene0", "scene1", "scene2")
JOINT_MODALITIES = ("joints0", "joints1")
MODALITY_NAMES = IMAGE_MODALITIES + JOINT_MODALITIES

MODALITY_GROUPS = {
    "driver": ("driver0", "driver1", "driver2"),
    "scene": ("scene0", "scene1", "scene2"),
    "joints": ("joints0", "joints1"),
}


@dataclass
class EncodedModality:
    """Pooled embedding plus the spatial map it was pooled from."""

    vector: Tensor  # (D,) or (B, D)
    map: Tensor  # (map_h, map_w, D) or (B, map_h, map_w, D)


@dataclass
class ImageEncoderParams:
    stem: Tensor  # (3, 3, C_in, D)
    stem_b: Tensor  # (D,)
    hv: HVAttnParams
    region: RegionAttnParams
    fc: Tensor  # (D, D)
    fc_b: Tensor  # (D,)


@dataclass
class JointEncoderParams:
    conv1: Tensor  # (3, 3, 3, 1, 8)
    conv1_b: Tensor  # (8,)
    conv2: Tensor  # (3, 3, 3, 8, D)
    conv2_b: Tensor  # (D,)
    proj: Tensor  # (J*3*D, map_h*map_w*D)
    proj_b: Tensor  # (map_h*map_w*D,)


def image_encoder_params(
    store: ParamStore,
    prefix: str,
    c_in: int,
    dim: int = 64,
    tile: int = 7,
    routed: int = 4,
    exclude_self: bool = False,
) -> ImageEncoderParams:
    return ImageEncoderParams(
        stem=store.uniform(f"{prefix}.stem", (3, 3, c_in, dim), fan_in=9 * c_in),
        stem_b=store.zeros(f"{prefix}.stem_b", (dim,)),
        hv=hv_attn_params(store, f"{prefix}.hv", dim),
        region=region_attn_params(
            store, f"{prefix}.region", dim, t=tile, k=routed, exclude_self=exclude_self
        ),
        fc=store.uniform(f"{prefix}.fc", (dim, dim), fan_in=dim),
        fc_b=store.zeros(f"{prefix}.fc_b", (dim,)),
    )


def joint_encoder_params(
    store: ParamStore,
    prefix: str,
    joints: int,
    dim: int,
    map_h: int,
    map_w: int,
    mid: int = 8,
) -> JointEncoderParams:
    flat_in = joints * 3 * dim
    flat_out = map_h * map_w * dim
    return JointEncoderParams(
        conv1=store.uniform(f"{prefix}.conv1", (3, 3, 3, 1, mid), fan_in=27),
        conv1_b=store.zeros(f"{prefix}.conv1_b", (mid,)),
        conv2=store.uniform(f"{prefix}.conv2", (3, 3, 3, mid, dim), fan_in=27 * mid),
        conv2_b=store.zeros(f"{prefix}.conv2_b", (dim,)),
        proj=store.uniform(f"{prefix}.proj", (flat_in, flat_out), fan_in=flat_in),
        proj_b=store.zeros(f"{prefix}.proj_b", (flat_out,)),
    )


def _bias(x: Tensor, b: Tensor) -> Tensor:
    return T.add(x, T.broadcast_to(b, x.shape))


def encode_image(
    x: Tensor, p: ImageEncoderParams, map_h: int, map_w: int
) -> EncodedModality:
    """Stem conv, attention stack, pooled head; map resized by mean pooling.

    x: (H, W, C_in) or (B, H, W, C_in). H and W must be multiples of the
    target grid so the resize stays an exact average.
    """
    stem = T.relu(_bias(T.conv2d(x, p.stem), p.stem_b))
    fx = hv_attention(stem, p.hv)
    fx = region_attention(fx, p.region)
    h, w = fx.shape[-3], fx.shape[-2]
    vector = marnet_head(fx, p.fc, p.fc_b)
    mp = T.avg_pool2d(fx, (h // map_h, w // map_w))
    return EncodedModality(vector=vector, map=mp)


def encode_joints(
    x: Tensor, p: JointEncoderParams, map_h: int, map_w: int
) -> EncodedModality:
    """3-D conv stack over (frames, joints, coords); vector is the global
    mean, the map is the frame-pooled feature pushed through a learned
    projection onto the common grid."""
    if x.ndim == 3:
        xb, squeeze = T.reshape(x, (1,) + x.shape + (1,)), True
    elif x.ndim == 4:
        xb, squeeze = T.reshape(x, x.shape + (1,)), False
    else:
        raise ShapeMismatch(f"expected (T, J, 3) or (B, T, J, 3), got {x.shape}")

    h1 = T.relu(_bias(T.conv3d(xb, p.conv1), p.conv1_b))
    h2 = T.relu(_bias(T.conv3d(h1, p.conv2), p.conv2_b))

    vector = T.gap(h2, 3)  # (B, D)
    frame_mean = T.tmean(h2, axis=1)  # (B, J, 3, D)
    b = frame_mean.shape[0]
    flat = T.reshape(frame_mean, (b, -1))
    mp = _bias(T.matmul(flat, p.proj), p.proj_b)
    dim = h2.shape[-1]
    mp = T.reshape(mp, (b, map_h, map_w, dim))

    if squeeze:
        vector = T.reshape(vector, (dim,))
        mp = T.reshape(mp, (map_h, map_w, dim))
    return EncodedModality(vector=vector, map=mp)
