"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ELEC"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 "key=value" lines (config + extras)
    u32 tensor_count
    per tensor: u32 name_len, name, u32 rank, rank x u32 dims, float32 payload
    u64 checksum  (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .train import Model, TrainConfig, build_variant

MAGIC = b"ELEC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _digest(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _meta_text(meta: dict) -> str:
    return "".join(f"{k}={meta[k]}\n" for k in sorted(meta))


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    meta = {k: v for k, v in model.config.to_dict().items()}
    meta["num_items"] = model.num_items
    meta.update(extra or {})
    meta_bytes = _meta_text(meta).encode()
    params = model.parameters()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", _digest(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Validate and decode a checkpoint into (meta, arrays)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    body, tail = raw[:-8], raw[-8:]
    if struct.unpack("<Q", tail)[0] != _digest(body):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    meta = _parse_meta(r.take(r.u32()).decode())
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes after tensor records")
    return meta, arrays


def config_from_meta(meta: dict[str, str]) -> TrainConfig:
    defaults = TrainConfig()
    kwargs = {}
    for key, default in defaults.to_dict().items():
        if key in meta:
            kwargs[key] = type(default)(meta[key])
    return TrainConfig(**kwargs)


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    meta, arrays = read_checkpoint(path)
    config = config_from_meta(meta)
    model = build_variant(config.variant, config, int(meta["num_items"]))
    model.load_arrays(arrays)
    return model, meta
