"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic  b"NSMAE1"
    u32    format version
    u32    section count
    repeated sections:  4-byte tag, u64 payload length, payload
    u32    CRC-32 of everything before it

Sections: ``HASH`` (config hash, ASCII), ``CONF`` (config JSON), ``STEP``
(u64), ``PARM``/``OPTM``/``OPTV`` (named float64 tensors), ``OPTS`` (u64
step + 4 float64 hyper-parameters), ``RNGS`` (bit-generator state JSON).
Tensor payload: u32 count, then per tensor u16 name length, UTF-8 name,
u32 ndim, u64 extents, raw float64 data.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import atomic_write_bytes
from .optim import OptimState

MAGIC = b"NSMAE1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    params: dict[str, np.ndarray]
    optim: OptimState
    rng_state: dict
    step: int
    config: dict = field(default_factory=dict)


def _tensors(d: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(d))]
    for name in sorted(d):
        arr = np.ascontiguousarray(d[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.what}: truncated at byte {self.pos} (need {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensors(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload, "tensor section")
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def encode(ckpt: Checkpoint) -> bytes:
    o = ckpt.optim
    sections = [
        (b"HASH", ckpt.config_hash.encode()),
        (b"CONF", json.dumps(ckpt.config, sort_keys=True).encode()),
        (b"STEP", struct.pack("<Q", ckpt.step)),
        (b"PARM", _tensors(ckpt.params)),
        (b"OPTS", struct.pack("<Q4d", o.step, o.beta1, o.beta2, o.eps, o.weight_decay)),
        (b"OPTM", _tensors(o.m)),
        (b"OPTV", _tensors(o.v)),
        (b"RNGS", json.dumps(ckpt.rng_state, sort_keys=True).encode()),
    ]
    body = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for tag, payload in sections:
        body.append(tag + struct.pack("<Q", len(payload)) + payload)
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    if blob[:6] != MAGIC:
        raise CheckpointVersionError(f"not a checkpoint (magic {blob[:6]!r})")
    r = _Reader(blob, "checkpoint")
    r.take(6)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"wrong checkpoint version {version}, expected {VERSION}")
    sections = {}
    for _ in range(count):
        tag = r.take(4)
        (n,) = r.unpack("<Q")
        sections[tag] = r.take(n)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(blob):
        raise CheckpointError(f"checkpoint: {len(blob) - r.pos} trailing bytes")
    if zlib.crc32(blob[:body_end]) != crc:
        raise CheckpointError("checkpoint: CRC mismatch (corrupted file)")
    chash = sections[b"HASH"].decode()
    if expected_hash is not None and chash != expected_hash:
        raise CheckpointConfigError(f"wrong config: checkpoint hash {chash[:12]} != expected {expected_hash[:12]}")
    ostep, b1, b2, eps, wd = struct.unpack("<Q4d", sections[b"OPTS"])
    optim = OptimState(_read_tensors(sections[b"OPTM"]), _read_tensors(sections[b"OPTV"]), ostep, b1, b2, eps, wd)
    (step,) = struct.unpack("<Q", sections[b"STEP"])
    return Checkpoint(chash, _read_tensors(sections[b"PARM"]), optim,
                      json.loads(sections[b"RNGS"]), step, json.loads(sections[b"CONF"]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_hash)
