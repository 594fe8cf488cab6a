"""Desk-scale multimodal multi-task learner.

Eight synthetic modality streams are encoded by attention-based image
encoders and 3-D conv joint encoders, fused by a dual-branch module into
shared and task-specific features, and trained under an adaptive loss
that rebalances tasks by their loss change rates while decoupling the
shared feature from each task's private one.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigMismatch,
    EmptyList,
    GraphConsumed,
    IndivisibleSpatialExtent,
    InvalidConfig,
    InvalidK,
    LengthMismatch,
    NonFiniteLoss,
    NotScalar,
    ShapeMismatch,
    UvmtlError,
)
from .tensor import Tensor, grad_check, no_grad
from .params import ParamStore, read_checkpoint, restore_checkpoint, save_checkpoint
from .attention import (
    HVAttnParams,
    RegionAttnParams,
    hv_attention,
    marnet_head,
    region_attention,
)
from .encoders import (
    EncodedModality,
    MODALITY_GROUPS,
    MODALITY_NAMES,
    encode_image,
    encode_joints,
)
from .dbscme import (
    ChannelAttnParams,
    MHAParams,
    SharedFuseParams,
    TaskOutputs,
    TaskSpec,
    channel_self_attention,
    dbscme_forward,
    shared_fuse,
    spatial_self_attention,
)
from .afd_loss import (
    DecoupleConfig,
    LossHistory,
    afd_total,
    change_rate,
    change_rates,
    change_rate_trace,
    cosine_similarity,
    d_task_loss,
    decouple_loss,
    mu_schedule,
    task_weights,
    weights_from_ratios,
)
from .synth import (
    GenConfig,
    Sample,
    accuracy,
    bayes_accuracy,
    generate,
    load_dataset,
    mean_accuracy,
    save_dataset,
)
from .model import Ablation, Model, ModelConfig
from .train import RunConfig, SGD, evaluate, mean_abs_cosine, train
