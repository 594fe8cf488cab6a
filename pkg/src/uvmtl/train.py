"""Training loop, evaluation, and run configuration.

A run is fully determined by (seed, config, dataset): shuffling comes
from a counter-based stream keyed by (seed, epoch), parameter init is
name-keyed, and the optimizer is plain SGD with momentum. The metrics
CSV is therefore byte-stable across identical runs; wall-clock timing
is only written when explicitly requested, so the default artifact
stays reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import tensor as T
from .afd_loss import (
    DecoupleConfig,
    LossHistory,
    afd_total,
    change_rates,
    change_rate_trace,
    d_task_loss,
    decouple_loss,
    mu_schedule,
    task_weights,
)
from .encoders import MODALITY_GROUPS, MODALITY_NAMES
from .errors import InvalidConfig, NonFiniteLoss
from .model import Ablation, Model, ModelConfig
from .params import keyed_generator, save_checkpoint
from .synth import GenConfig, Sample, generate
from .tensor import Tensor


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    # clipping engages every step at this scale; the effective step size is
    # lr * clip_norm, and this product is what the defaults were tuned on
    clip_norm: float = 0.15  # 0 disables global-norm gradient clipping
    temperature: float = 2.0
    mu_start: float = 0.01
    mu_end: float = 0.1
    mu_ramp: float = 1.0
    window_steps: int = 0  # 0 means one window per epoch
    decouple_mode: str = "abs"
    train_samples: int = 240
    val_samples: int = 96
    # model dims
    dim: int = 8
    map_h: int = 4
    map_w: int = 4
    tile: int = 4
    routed: int = 4
    heads: int = 8
    channel_width: int = 8
    head_hidden: int = 32
    se_reduction: int = 4
    exclude_self: bool = False
    # data dims
    height: int = 8
    width: int = 8
    image_channels: int = 2
    frames: int = 6
    joints: int = 5
    shared_dim: int = 2
    task_dim: int = 2
    num_classes: tuple = (4, 4, 4, 4)
    label_noise: tuple = (0.05, 0.10, 0.30, 0.15)
    noise_scale: float = 0.1
    loss_scales: tuple = ()
    # ablation switches
    disable_dbscme: bool = False
    disable_afd: bool = False
    disable_d_task: bool = False
    disable_decouple: bool = False
    disable_spatial: bool = False
    disable_channel: bool = False
    single_task: int = -1
    drop_task: int = -1
    drop_modality: str = ""
    timing: bool = False

    def __post_init__(self):
        self.num_classes = tuple(int(k) for k in self.num_classes)
        self.label_noise = tuple(float(v) for v in self.label_noise)
        self.loss_scales = tuple(float(s) for s in self.loss_scales)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.train_samples < 1 or self.val_samples < 1:
            raise InvalidConfig("need at least one train and one val sample")
        n = len(self.num_classes)
        if self.single_task >= 0 and self.drop_task >= 0:
            raise InvalidConfig("single_task and drop_task are mutually exclusive")
        if self.single_task >= n or self.drop_task >= n:
            raise InvalidConfig("task index out of range")
        if self.drop_task >= 0 and n < 2:
            raise InvalidConfig("cannot drop the only task")
        if self.drop_modality and self.drop_modality not in MODALITY_GROUPS:
            raise InvalidConfig(
                f"drop_modality must be one of {sorted(MODALITY_GROUPS)}"
            )
        if self.loss_scales and len(self.loss_scales) != n:
            raise InvalidConfig("loss_scales length must match num_classes")
        if self.window_steps < 0:
            raise InvalidConfig("window_steps must be >= 0")
        if self.height % self.tile or self.width % self.tile:
            raise InvalidConfig(
                f"region tile {self.tile} must divide image {self.height}x{self.width}"
            )
        if self.height % self.map_h or self.width % self.map_w:
            raise InvalidConfig(
                f"map grid {self.map_h}x{self.map_w} must divide image "
                f"{self.height}x{self.width}"
            )

    def gen_config(self, num_samples: int) -> GenConfig:
        return GenConfig(
            seed=self.seed,
            num_samples=num_samples,
            height=self.height,
            width=self.width,
            image_channels=self.image_channels,
            frames=self.frames,
            joints=self.joints,
            shared_dim=self.shared_dim,
            task_dim=self.task_dim,
            num_classes=self.num_classes,
            label_noise=self.label_noise,
            noise_scale=self.noise_scale,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            map_h=self.map_h,
            map_w=self.map_w,
            tile=self.tile,
            routed=self.routed,
            heads=self.heads,
            channel_width=self.channel_width,
            head_hidden=self.head_hidden,
            se_reduction=self.se_reduction,
            exclude_self=self.exclude_self,
            num_classes=self.num_classes,
            loss_scales=self.loss_scales or None,
        )

    def active_tasks(self) -> list[int]:
        n = len(self.num_classes)
        if self.single_task >= 0:
            return [self.single_task]
        if self.drop_task >= 0:
            return [j for j in range(n) if j != self.drop_task]
        return list(range(n))

    def ablation(self) -> Ablation:
        return Ablation(
            disable_dbscme=self.disable_dbscme,
            disable_spatial=self.disable_spatial,
            disable_channel=self.disable_channel,
        )

    @property
    def adaptive_weights(self) -> bool:
        return not (self.disable_afd or self.disable_d_task)

    @property
    def decouple_active(self) -> bool:
        # The baseline head has no shared/specific split to decouple.
        return not (self.disable_afd or self.disable_decouple or self.disable_dbscme)


class SGD:
    """Momentum SGD: v <- m*v + (g + wd*p); p <- p - lr*v.

    clip_norm > 0 rescales the whole gradient when its global L2 norm
    exceeds the cap, keeping the update direction intact.
    """

    def __init__(
        self,
        params,
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        clip_norm: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.clip_norm = float(clip_norm)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        scale = 1.0
        if self.clip_norm > 0.0:
            sq = 0.0
            for p in self.params:
                if p.grad is not None:
                    sq += float(np.sum(np.asarray(p.grad) ** 2))
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad if scale == 1.0 else p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def pack_samples(samples: list[Sample]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack every sample once up front; batches then slice the big arrays."""
    arrays = {
        name: np.stack([s.modalities[name] for s in samples]) for name in MODALITY_NAMES
    }
    labels = np.stack([s.labels for s in samples])
    return arrays, labels


def make_batch(samples: list[Sample], idxs, drop_group: str = "") -> tuple:
    """Stack the chosen samples into one tensor per modality.

    Dropping a group feeds zeros for its streams, removing the signal
    while leaving every shape (and the parameter registry) untouched.
    """
    dropped = set(MODALITY_GROUPS.get(drop_group, ()))
    batch = {}
    for name in MODALITY_NAMES:
        arrs = [samples[i].modalities[name] for i in idxs]
        stacked = np.stack(arrs)
        if name in dropped:
            stacked = np.zeros_like(stacked)
        batch[name] = Tensor(stacked)
    labels = np.stack([samples[i].labels for i in idxs])
    return batch, labels


def _packed_batch(arrays, labels, idxs, drop_group: str = "") -> tuple:
    # fancy indexing copies, so the leaves can adopt the slice directly
    dropped = set(MODALITY_GROUPS.get(drop_group, ()))
    batch = {}
    for name in MODALITY_NAMES:
        full = arrays[name]
        if name in dropped:
            sub = np.zeros((len(idxs),) + full.shape[1:])
        else:
            sub = full[idxs]
        batch[name] = T.constant(sub)
    return batch, labels[idxs]


# grad-free eval can afford bigger slabs than the training batch
_EVAL_CHUNK = 64


@dataclass
class EvalResult:
    task_ids: list[int]
    accuracies: list[float]
    losses: list[float]
    mean_acc: float


def evaluate(model: Model, samples: list[Sample], cfg: RunConfig) -> EvalResult:
    """No-grad forward over the whole set; per-task accuracy and mAcc."""
    active = cfg.active_tasks()
    correct = np.zeros(len(active))
    loss_sums = np.zeros(len(active))
    total = 0
    arrays, all_labels = pack_samples(samples)
    chunk = max(cfg.batch_size, _EVAL_CHUNK)
    with T.no_grad():
        for lo in range(0, len(samples), chunk):
            idxs = np.arange(lo, min(lo + chunk, len(samples)))
            batch, labels = _packed_batch(arrays, all_labels, idxs, cfg.drop_modality)
            outs = model.forward(batch, cfg.ablation())
            b = labels.shape[0]
            for pos, j in enumerate(active):
                logits = outs.logits[j].data
                preds = np.argmax(logits, axis=-1)
                correct[pos] += np.sum(preds == labels[:, j])
                ce = T.cross_entropy(outs.logits[j], labels[:, j])
                loss_sums[pos] += float(ce.data) * b
            total += b
    accs = [float(c / total) for c in correct]
    losses = [float(s / total) for s in loss_sums]
    return EvalResult(
        task_ids=active,
        accuracies=accs,
        losses=losses,
        mean_acc=float(np.mean(accs)),
    )


def mean_abs_cosine(model: Model, samples: list[Sample], cfg: RunConfig) -> float:
    """Mean |cos(f_sh, f_sp_j)| over tasks and samples; the decoupling
    diagnostic. Requires the full fusion path."""
    if cfg.disable_dbscme:
        raise InvalidConfig("no shared/specific split without the fusion stage")
    active = cfg.active_tasks()
    vals = []
    arrays, all_labels = pack_samples(samples)
    chunk = max(cfg.batch_size, _EVAL_CHUNK)
    with T.no_grad():
        for lo in range(0, len(samples), chunk):
            idxs = np.arange(lo, min(lo + chunk, len(samples)))
            batch, _ = _packed_batch(arrays, all_labels, idxs, cfg.drop_modality)
            outs = model.forward(batch, cfg.ablation())
            sh = outs.f_sh.data
            for j in active:
                sp = outs.f_sp[j].data
                num = np.sum(sh * sp, axis=-1)
                den = np.sqrt(np.sum(sh * sh, axis=-1) + 1e-16) * np.sqrt(
                    np.sum(sp * sp, axis=-1) + 1e-16
                )
                vals.extend(np.abs(num / den).tolist())
    return float(np.mean(vals))


@dataclass
class TrainResult:
    model: Model
    history: LossHistory
    window_weights: list[np.ndarray]
    metrics_rows: list[dict]
    final_eval: EvalResult
    metrics_lines: list[str] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _metrics_lines(cfg: RunConfig, rows: list[dict], active: list[int]) -> list[str]:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(_fmt(x) for x in v)
        lines.append(f"# {f.name} = {v}")
    cols = ["epoch"]
    cols += [f"loss_task{j + 1}" for j in active]
    cols += [f"acc_task{j + 1}" for j in active]
    cols += ["mAcc"]
    cols += [f"w_{j + 1}" for j in active]
    cols += [f"r_{j + 1}" for j in active]
    cols += ["mu", "ms"]
    lines.append(",".join(cols))
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return lines


def _trace_lines(history: LossHistory, weights: list[np.ndarray], active: list[int]) -> list[str]:
    w = history.completed()
    ratios = change_rate_trace(history)
    cols = ["window"]
    for j in active:
        cols += [f"loss_task{j + 1}", f"ratio_task{j + 1}", f"weight_task{j + 1}"]
    lines = [",".join(cols)]
    for m in range(len(w)):
        row = [str(m)]
        for pos, _ in enumerate(active):
            row += [_fmt(w[m][pos]), _fmt(ratios[m][pos]), _fmt(weights[m][pos])]
        lines.append(",".join(row))
    return lines


def train(
    cfg: RunConfig,
    train_data: list[Sample] | None = None,
    val_data: list[Sample] | None = None,
    metrics_path=None,
    trace_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Run the full loop; returns everything the acceptance checks read."""
    if train_data is None or val_data is None:
        full = generate(cfg.gen_config(cfg.train_samples + cfg.val_samples))
        train_data = full[: cfg.train_samples]
        val_data = full[cfg.train_samples :]

    model = Model(
        cfg.model_config(),
        seed=cfg.seed,
        image_channels=cfg.image_channels,
        joints=cfg.joints,
    )
    opt = SGD(
        model.store.tensors(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm
    )
    active = cfg.active_tasks()
    n_active = len(active)
    scales = list(cfg.loss_scales) if cfg.loss_scales else [1.0] * len(cfg.num_classes)
    active_scales = np.array([scales[j] for j in active])

    steps_per_epoch = (len(train_data) + cfg.batch_size - 1) // cfg.batch_size
    window = cfg.window_steps or steps_per_epoch
    total_steps = steps_per_epoch * cfg.epochs
    history = LossHistory(n_active, window)
    dcfg = DecoupleConfig(mode=cfg.decouple_mode)

    arrays, all_labels = pack_samples(train_data)
    weights = np.ones(n_active)
    window_weights = [weights.copy()]  # weights in effect per window index
    rows = []
    # per-epoch validation passes only matter for the metrics artifact
    track_acc = metrics_path is not None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = keyed_generator(cfg.seed, f"shuffle:{epoch}").permutation(len(train_data))
        epoch_losses = np.zeros(n_active)
        mu = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            idxs = perm[lo : lo + cfg.batch_size]
            batch, labels = _packed_batch(arrays, all_labels, idxs, cfg.drop_modality)
            outs = model.forward(batch, cfg.ablation())
            losses = [T.cross_entropy(outs.logits[j], labels[:, j]) for j in active]

            used = weights if cfg.adaptive_weights else np.ones(n_active)
            total = d_task_loss(losses, used, active_scales)
            if cfg.decouple_active:
                mu = mu_schedule(step, total_steps, cfg.mu_start, cfg.mu_end, cfg.mu_ramp)
                dec = decouple_loss(outs.f_sh, [outs.f_sp[j] for j in active], dcfg)
                total = afd_total(total, dec, mu)

            if not np.isfinite(total.data):
                raise NonFiniteLoss(step, float(total.data))

            total.backward()
            opt.step()
            opt.zero_grad()

            vals = np.array([float(l.data) for l in losses])
            epoch_losses += vals
            closed = history.push(vals)
            if closed:
                if cfg.adaptive_weights:
                    weights = task_weights(history, cfg.temperature)
                window_weights.append(weights.copy())
            step += 1

        rates = change_rates(history)
        elapsed = (time.perf_counter() - t0) * 1000.0
        row = {"epoch": epoch, "mu": mu,
               "ms": elapsed if cfg.timing else 0.0}
        if track_acc:
            ev = evaluate(model, val_data, cfg)
            row["mAcc"] = ev.mean_acc
        for pos, j in enumerate(active):
            row[f"loss_task{j + 1}"] = epoch_losses[pos] / steps_per_epoch
            if track_acc:
                row[f"acc_task{j + 1}"] = ev.accuracies[pos]
            row[f"w_{j + 1}"] = weights[pos]
            row[f"r_{j + 1}"] = rates[pos]
        rows.append(row)

    # the weights list records one entry per STARTED window; trim to completed
    window_weights = window_weights[: history.num_windows]

    final_eval = evaluate(model, val_data, cfg)
    lines = _metrics_lines(cfg, rows, active) if track_acc else []
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    if trace_path is not None:
        tl = _trace_lines(history, window_weights, active)
        with open(trace_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(tl) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(model.store, checkpoint_path)
    return TrainResult(
        model=model,
        history=history,
        window_weights=window_weights,
        metrics_rows=rows,
        final_eval=final_eval,
        metrics_lines=lines,
    )


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; blanks ignored."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_from_mapping(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Coerce string values onto RunConfig fields by declared type."""
    current = asdict(base) if base is not None else asdict(RunConfig())
    spec = {f.name: f for f in fields(RunConfig)}
    for key, raw in values.items():
        if key not in spec:
            raise InvalidConfig(f"unknown config key {key!r}")
        target = current[key]
        if isinstance(target, bool):
            if str(raw).lower() not in ("0", "1", "true", "false"):
                raise InvalidConfig(f"{key}: expected boolean, got {raw!r}")
            current[key] = str(raw).lower() in ("1", "true")
        elif isinstance(target, int):
            current[key] = int(raw)
        elif isinstance(target, float):
            current[key] = float(raw)
        elif isinstance(target, tuple):
            parts = [p for p in str(raw).split(",") if p.strip() != ""]
            current[key] = tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        else:
            current[key] = str(raw)
    return RunConfig(**current)
