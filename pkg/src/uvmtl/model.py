"""Full network: eight encoders feeding the dual-branch fusion stage.

The Model owns a ParamStore (so checkpoints see one flat name space) and
knows how to run a batch dict of raw modality arrays through to task
logits. Ablation switches reroute the forward pass without changing the
parameter registry, which keeps every variant checkpoint-compatible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dbscme import (
    DbscmeParams,
    TaskOutputs,
    dbscme_forward,
    dbscme_params,
)
from .encoders import (
    IMAGE_MODALITIES,
    JOINT_MODALITIES,
    MODALITY_NAMES,
    encode_image,
    encode_joints,
    image_encoder_params,
    joint_encoder_params,
)
from .errors import InvalidConfig, ShapeMismatch
from .params import ParamStore
from .tensor import Tensor


@dataclass
class ModelConfig:
    dim: int = 8  # encoder channel width and embedding size
    map_h: int = 7
    map_w: int = 7
    tile: int = 7
    routed: int = 4
    heads: int = 8
    channel_width: int = 8  # d_c lanes in channel attention
    head_hidden: int = 32
    se_reduction: int = 4
    exclude_self: bool = False
    num_classes: tuple = (4, 4, 4, 4)
    loss_scales: tuple | None = None

    def __post_init__(self):
        self.num_classes = tuple(int(k) for k in self.num_classes)
        cp = 8 * self.dim
        if self.dim < 1 or self.heads < 1:
            raise InvalidConfig("dim and heads must be positive")
        if self.dim % self.heads or cp % self.heads:
            raise InvalidConfig(
                f"dim {self.dim} and C'={cp} must be divisible by heads {self.heads}"
            )
        if self.channel_width % self.heads:
            raise InvalidConfig(
                f"channel width {self.channel_width} not divisible by heads {self.heads}"
            )
        if cp % self.se_reduction:
            raise InvalidConfig(f"C'={cp} not divisible by SE reduction {self.se_reduction}")
        if self.loss_scales is not None:
            self.loss_scales = tuple(float(s) for s in self.loss_scales)
            if len(self.loss_scales) != len(self.num_classes):
                raise InvalidConfig("loss_scales length must match num_classes")

    @property
    def num_tasks(self) -> int:
        return len(self.num_classes)

    @property
    def concat_channels(self) -> int:
        return 8 * self.dim


@dataclass
class Ablation:
    """Forward-pass reroutes; all off reproduces the full model."""

    disable_dbscme: bool = False
    disable_spatial: bool = False
    disable_channel: bool = False


class Model:
    def __init__(self, cfg: ModelConfig, seed: int, image_channels: int, joints: int):
        self.cfg = cfg
        self.store = ParamStore(seed)
        self.encoders = {}
        for name in IMAGE_MODALITIES:
            self.encoders[name] = image_encoder_params(
                self.store,
                f"enc.{name}",
                image_channels,
                cfg.dim,
                cfg.tile,
                cfg.routed,
                cfg.exclude_self,
            )
        for name in JOINT_MODALITIES:
            self.encoders[name] = joint_encoder_params(
                self.store, f"enc.{name}", joints, cfg.dim, cfg.map_h, cfg.map_w
            )
        self.fusion: DbscmeParams = dbscme_params(
            self.store,
            cfg.dim,
            cfg.num_classes,
            cfg.heads,
            cfg.channel_width,
            cfg.head_hidden,
            cfg.se_reduction,
            cfg.loss_scales,
        )

    def encode(self, batch: dict[str, Tensor]) -> dict:
        if set(batch) != set(MODALITY_NAMES):
            raise ShapeMismatch(f"batch needs {MODALITY_NAMES}, got {sorted(batch)}")
        cfg = self.cfg
        encoded = {}
        for name in IMAGE_MODALITIES:
            encoded[name] = encode_image(batch[name], self.encoders[name], cfg.map_h, cfg.map_w)
        for name in JOINT_MODALITIES:
            encoded[name] = encode_joints(batch[name], self.encoders[name], cfg.map_h, cfg.map_w)
        ref = encoded[MODALITY_NAMES[0]].map.shape
        for name in MODALITY_NAMES:
            if encoded[name].map.shape != ref:
                raise ShapeMismatch(f"{name} map {encoded[name].map.shape} != {ref}")
        return encoded

    def forward(self, batch: dict[str, Tensor], ablation: Ablation | None = None) -> TaskOutputs:
        ab = ablation or Ablation()
        encoded = self.encode(batch)
        maps = {name: encoded[name].map for name in MODALITY_NAMES}
        if ab.disable_dbscme:
            return self._plain_concat(maps)
        return dbscme_forward(
            maps,
            self.fusion,
            disable_spatial=ab.disable_spatial,
            disable_channel=ab.disable_channel,
        )

    def _plain_concat(self, maps: dict[str, Tensor]) -> TaskOutputs:
        """Baseline head: pooled concat straight into each task head."""
        fc = T.concat([maps[name] for name in MODALITY_NAMES], axis=-1)
        squeeze = fc.ndim == 3
        f = T.gap(fc, 2)
        if f.ndim == 1:
            f = T.reshape(f, (1,) + f.shape)
        b = f.shape[0]
        logits_all = []
        for spec in self.fusion.tasks:
            hidden = T.matmul(f, spec.l2)
            logits = T.add(
                T.matmul(hidden, spec.head),
                T.broadcast_to(spec.head_b, (b, spec.num_classes)),
            )
            logits_all.append(logits)
        f_sp = [f for _ in self.fusion.tasks]
        if squeeze:
            logits_all = [T.reshape(l, (l.shape[-1],)) for l in logits_all]
            f_sp = [T.reshape(x, (x.shape[-1],)) for x in f_sp]
            f = T.reshape(f, (f.shape[-1],))
        return TaskOutputs(logits=logits_all, f_sh=f, f_sp=f_sp)

    def batch_tensor(self, arrays: list[np.ndarray]) -> Tensor:
        return Tensor(np.stack(arrays))
