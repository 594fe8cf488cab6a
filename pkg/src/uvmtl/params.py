"""Named parameter registry and checkpoint serialization.

Initialization is counter-based: every parameter draws from a Philox
stream keyed by (seed, parameter name), so values depend on nothing but
that pair. Creation order, platform, and process history are irrelevant,
and re-initializing with the same seed is bitwise reproducible.

Checkpoint layout (all integers little-endian u32, floats little-endian
f64): magic "UVML", format version, then one record per parameter in
registry order: name length, UTF-8 name, rank, one extent per axis,
raw payload. No trailing index; readers consume until EOF.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ConfigMismatch, InvalidConfig
from .tensor import Tensor

CHECKPOINT_MAGIC = b"UVML"
CHECKPOINT_VERSION = 1


def keyed_generator(seed: int, name: str) -> np.random.Generator:
    """Philox stream determined solely by (seed, name)."""
    digest = hashlib.blake2b(
        f"{int(seed)}:{name}".encode("utf-8"), digest_size=16
    ).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class ParamStore:
    """Insertion-ordered map of unique names to trainable tensors."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        """Weight init: uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        if fan_in < 1:
            raise InvalidConfig(f"fan_in must be positive, got {fan_in}")
        bound = 1.0 / float(np.sqrt(fan_in))
        rng = keyed_generator(self.seed, name)
        data = rng.uniform(-bound, bound, size=tuple(shape))
        return self._register(name, data)

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(tuple(shape)))

    def _register(self, name: str, data) -> Tensor:
        if name in self._params:
            raise InvalidConfig(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in store.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            shape = t.data.shape
            fh.write(struct.pack("<I", len(shape)))
            for extent in shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint file into an ordered name -> array map."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigMismatch(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        if name in out:
            raise ConfigMismatch(f"{path}: duplicate entry {name!r}")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def restore_checkpoint(store: ParamStore, path) -> None:
    """Overwrite store values from a file; names and shapes must match."""
    entries = read_checkpoint(path)
    if set(entries) != set(store.names()):
        missing = sorted(set(store.names()) - set(entries))
        extra = sorted(set(entries) - set(store.names()))
        raise ConfigMismatch(f"{path}: missing={missing} unexpected={extra}")
    for name, arr in entries.items():
        t = store[name]
        if arr.shape != t.data.shape:
            raise ConfigMismatch(
                f"{path}: {name} has shape {arr.shape}, store wants {t.data.shape}"
            )
        t.data = arr
