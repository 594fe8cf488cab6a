"""Synthetic multimodal multi-task benchmark.

Every sample is built from Gaussian latents: one shared vector plus one
private vector per task. Task j's label is the argmax over class
prototypes: a randomly rotated regular simplex in the private latent
space, tilted slightly toward the shared space, so every class is
decided mostly by the private latent with a smaller shared contribution.
Labels are then resampled uniformly with a per-task noise probability,
which pins the Bayes accuracy of task j at
(1 - noise_j) + noise_j / num_classes_j.

Modalities are fixed linear renderings of the latent stack plus white
noise. Each task's private latent has one strong carrier group (task 0
the driver views, task 1 the joint streams, later tasks the scene
views) and only faintly leaks elsewhere, so no group is redundant:
dropping a group removes the only strong carrier of its tasks. The
shared latent is rendered everywhere. All randomness is counter-based
per (seed, sample index), so sample i is the same bytes no matter the
platform or generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .encoders import IMAGE_MODALITIES, JOINT_MODALITIES, MODALITY_NAMES
from .errors import ConfigMismatch, InvalidConfig, LengthMismatch, EmptyList
from .params import keyed_generator

DATASET_MAGIC = b"UVDS"
DATASET_VERSION = 1

WEAK_CROSS_GROUP = 0.1  # off-group private latents still leak through


@dataclass
class GenConfig:
    seed: int = 0
    num_samples: int = 128
    height: int = 14
    width: int = 14
    image_channels: int = 2
    frames: int = 6
    joints: int = 5
    shared_dim: int = 2
    task_dim: int = 2
    num_classes: tuple = (4, 4, 4, 4)
    label_noise: tuple = (0.05, 0.10, 0.30, 0.15)
    noise_scale: float = 0.1

    def __post_init__(self):
        self.num_classes = tuple(int(k) for k in self.num_classes)
        self.label_noise = tuple(float(v) for v in self.label_noise)
        if len(self.num_classes) != len(self.label_noise):
            raise LengthMismatch(
                f"{len(self.num_classes)} class counts vs "
                f"{len(self.label_noise)} noise rates"
            )
        if not self.num_classes:
            raise InvalidConfig("need at least one task")
        if any(k < 2 for k in self.num_classes):
            raise InvalidConfig(f"every task needs >= 2 classes: {self.num_classes}")
        if any(not 0.0 <= v < 0.5 for v in self.label_noise):
            raise InvalidConfig(f"label noise must be in [0, 0.5): {self.label_noise}")
        if min(self.height, self.width, self.frames, self.joints) < 1:
            raise InvalidConfig("extents must be positive")
        if min(self.shared_dim, self.task_dim, self.image_channels) < 1:
            raise InvalidConfig("latent and channel dims must be positive")
        if any(k > self.shared_dim + self.task_dim for k in self.num_classes):
            raise InvalidConfig(
                "num_classes cannot exceed shared_dim + task_dim "
                "(readout rows must stay orthonormal)"
            )

    @property
    def num_tasks(self) -> int:
        return len(self.num_classes)

    @property
    def latent_dim(self) -> int:
        return self.shared_dim + self.num_tasks * self.task_dim


@dataclass
class Sample:
    modalities: dict = field(default_factory=dict)  # name -> float64 array
    labels: np.ndarray = None  # (num_tasks,) intp
    latents: dict = field(default_factory=dict)  # diagnostics only


def _carrier_groups(j: int) -> tuple:
    """Which stream groups render task j's private latent at full strength."""
    if j < 3:
        return (("driver", "scene", "joints")[j],)
    return ("driver", "scene")  # overflow tasks span both image groups


def _group_scales(cfg: GenConfig, name: str) -> np.ndarray:
    """Per-latent-block strength of one modality's mixing matrix."""
    group = "joints" if name in JOINT_MODALITIES else name[:-1]
    scales = np.ones(cfg.latent_dim)
    for j in range(cfg.num_tasks):
        lo = cfg.shared_dim + j * cfg.task_dim
        hi = lo + cfg.task_dim
        if group not in _carrier_groups(j):
            scales[lo:hi] = WEAK_CROSS_GROUP
    return scales


def _modality_shape(cfg: GenConfig, name: str) -> tuple:
    if name in JOINT_MODALITIES:
        return (cfg.frames, cfg.joints, 3)
    return (cfg.height, cfg.width, cfg.image_channels)


def _signed_blocks(rng, h: int, w: int) -> np.ndarray:
    """Random +-1 block layout, balanced so the spatial mean is ~0."""
    bs = 2 if h % 2 == 0 and w % 2 == 0 else 1
    gh, gw = h // bs, w // bs
    signs = np.ones(gh * gw)
    signs[: signs.size // 2] = -1.0
    rng.shuffle(signs)
    return np.kron(signs.reshape(gh, gw), np.ones((bs, bs)))


def mixing_matrix(cfg: GenConfig, name: str) -> np.ndarray:
    """Fixed render matrix for one modality, seed-determined.

    Image modalities render each latent as a zero-mean signed block
    pattern: averaging the pixels cancels the latent's sign, so a
    model must keep spatial structure alive to read the image back.
    """
    if name not in MODALITY_NAMES:
        raise InvalidConfig(f"unknown modality {name!r}")
    rng = keyed_generator(cfg.seed, f"mix:{name}")
    if name in JOINT_MODALITIES:
        size = cfg.joints * 3 * 2  # static part + temporal modulation part
        m = rng.standard_normal((size, cfg.latent_dim))
    else:
        cols = []
        for _ in range(cfg.latent_dim):
            pattern = _signed_blocks(rng, cfg.height, cfg.width)
            weights = rng.standard_normal(cfg.image_channels)
            cols.append((pattern[:, :, None] * weights).ravel())
        m = np.stack(cols, axis=1)
    m /= np.sqrt(cfg.latent_dim)
    return m * _group_scales(cfg, name)


def readout_matrices(cfg: GenConfig) -> list[np.ndarray]:
    """Per-task orthonormal label readouts over (shared, private_j)."""
    outs = []
    dim = cfg.shared_dim + cfg.task_dim
    for j, k in enumerate(cfg.num_classes):
        rng = keyed_generator(cfg.seed, f"readout:{j}")
        raw = rng.standard_normal((dim, k))
        q, _ = np.linalg.qr(raw)
        outs.append(q[:, :k].T.copy())  # (k, dim) with orthonormal rows
    return outs


def _latent_stack(cfg: GenConfig, latents: dict) -> np.ndarray:
    parts = [latents["shared"]]
    parts += [latents[f"task{j}"] for j in range(cfg.num_tasks)]
    return np.concatenate(parts)


def clean_labels(cfg: GenConfig, latents: dict, readouts=None) -> np.ndarray:
    """Noise-free labels implied by the latents: the Bayes predictions."""
    readouts = readouts if readouts is not None else readout_matrices(cfg)
    labels = np.empty(cfg.num_tasks, dtype=np.intp)
    for j, r in enumerate(readouts):
        u = np.concatenate(
            [latents["shared"], latents[f"task{j}"]]
        )
        labels[j] = int(np.argmax(r @ u))
    return labels


def generate(cfg: GenConfig) -> list[Sample]:
    """Materialize the benchmark; sample i depends only on (seed, i)."""
    readouts = readout_matrices(cfg)
    mixers = {name: mixing_matrix(cfg, name) for name in MODALITY_NAMES}
    phase = 2.0 * np.pi * np.arange(cfg.frames) / cfg.frames
    samples = []
    for i in range(cfg.num_samples):
        rng = keyed_generator(cfg.seed, f"sample:{i}")
        latents = {"shared": rng.standard_normal(cfg.shared_dim)}
        for j in range(cfg.num_tasks):
            latents[f"task{j}"] = rng.standard_normal(cfg.task_dim)

        labels = clean_labels(cfg, latents, readouts)
        for j, noise in enumerate(cfg.label_noise):
            if rng.uniform() < noise:
                labels[j] = int(rng.integers(0, cfg.num_classes[j]))

        u = _latent_stack(cfg, latents)
        modalities = {}
        for name in MODALITY_NAMES:
            base = mixers[name] @ u
            if name in JOINT_MODALITIES:
                half = cfg.joints * 3
                static = base[:half].reshape(cfg.joints, 3)
                sway = base[half:].reshape(cfg.joints, 3)
                frames = static[None] + sway[None] * np.cos(phase)[:, None, None]
                noise = rng.standard_normal(frames.shape)
                modalities[name] = frames + cfg.noise_scale * noise
            else:
                shape = _modality_shape(cfg, name)
                noise = rng.standard_normal(shape)
                modalities[name] = base.reshape(shape) + cfg.noise_scale * noise
        samples.append(Sample(modalities=modalities, labels=labels, latents=latents))
    return samples


def bayes_accuracy(cfg: GenConfig, j: int) -> float:
    """Ceiling accuracy of task j: label noise is unrecoverable."""
    noise = cfg.label_noise[j]
    return (1.0 - noise) + noise / cfg.num_classes[j]


# ------------------------------------------------------------------ metrics


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    l = np.asarray(labels)
    if p.shape != l.shape or p.ndim != 1:
        raise LengthMismatch(f"predictions {p.shape} vs labels {l.shape}")
    if p.size == 0:
        raise EmptyList("accuracy of zero samples")
    return float(np.mean(p == l))


def mean_accuracy(accs) -> float:
    a = np.asarray(accs, dtype=np.float64)
    if a.size == 0:
        raise EmptyList("mean_accuracy of zero tasks")
    return float(np.mean(a))


# ------------------------------------------------------------- file format


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    shape = arr.shape
    fh.write(struct.pack("<I", len(shape)))
    for extent in shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(buf, pos):
    (name_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    name = buf[pos : pos + name_len].decode("utf-8")
    pos += name_len
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    pos += 8 * count
    return name, arr.reshape(shape).astype(np.float64), pos


def save_dataset(cfg: GenConfig, samples: list[Sample], path) -> None:
    """Write the dataset with its generating config echoed in the header."""
    cfg_json = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<II", len(samples), cfg.num_tasks))
        for s in samples:
            for lab in s.labels:
                fh.write(struct.pack("<I", int(lab)))
            for name in MODALITY_NAMES:
                _write_array(fh, name, s.modalities[name])
            _write_array(fh, "z:shared", s.latents["shared"])
            for j in range(cfg.num_tasks):
                _write_array(fh, f"z:task{j}", s.latents[f"task{j}"])


def load_dataset(path):
    """Read (config, samples) back; raises ConfigMismatch on foreign files."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise ConfigMismatch(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != DATASET_VERSION:
        raise ConfigMismatch(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    cfg_raw = json.loads(buf[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    cfg_raw["num_classes"] = tuple(cfg_raw["num_classes"])
    cfg_raw["label_noise"] = tuple(cfg_raw["label_noise"])
    cfg = GenConfig(**cfg_raw)
    num_samples, num_tasks = struct.unpack_from("<II", buf, pos)
    pos += 8
    if num_tasks != cfg.num_tasks:
        raise ConfigMismatch(f"{path}: {num_tasks} tasks vs config {cfg.num_tasks}")
    samples = []
    for _ in range(num_samples):
        labels = np.array(
            struct.unpack_from(f"<{num_tasks}I", buf, pos), dtype=np.intp
        )
        pos += 4 * num_tasks
        modalities = {}
        for _ in MODALITY_NAMES:
            name, arr, pos = _read_array(buf, pos)
            modalities[name] = arr
        latents = {}
        name, arr, pos = _read_array(buf, pos)
        latents["shared"] = arr
        for j in range(num_tasks):
            name, arr, pos = _read_array(buf, pos)
            latents[f"task{j}"] = arr
        samples.append(Sample(modalities=modalities, labels=labels, latents=latents))
    return cfg, samples
