"""Flat binary checkpoint container shared by the three networks.

Layout (all integers little-endian)::

    b"F2PCKPT"                      magic, 7 bytes
    u16 version                     currently 1
    u16 len, utf-8                  module tag ("fusion", "enhancer", "embedder", "features")
    u32 len, utf-8                  metadata JSON (model config), sorted keys
    u32 crc32                       of every header byte above
    u32 count                       number of tensors
    count x record:
        u16 len, utf-8              tensor name
        u8 dtype code, u8 ndim
        ndim x u64                  shape
        u64 nbytes, raw bytes       C-order little-endian data
        u32 crc32                   of the record bytes from the name length on
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumError, CheckpointFormatError, CheckpointTypeError

MAGIC = b"F2PCKPT"
VERSION = 1

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
    6: np.dtype("?"),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def _code_for(a: np.ndarray) -> int:
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    dt = np.dtype(dt.str.replace("=", "<"))
    for code, d in _DTYPES.items():
        if d == dt or (d.kind == dt.kind and d.itemsize == dt.itemsize):
            return code
    raise CheckpointFormatError(f"unsupported dtype {a.dtype}")


def encode(tag: str, tensors: dict, meta: dict | None = None) -> bytes:
    tag_b = tag.encode()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    header = MAGIC + struct.pack("<H", VERSION)
    header += struct.pack("<H", len(tag_b)) + tag_b
    header += struct.pack("<I", len(meta_b)) + meta_b
    out = [header, struct.pack("<I", zlib.crc32(header)), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        a = np.asarray(value)
        a = np.ascontiguousarray(a) if a.ndim else a     # ascontiguousarray promotes 0-d to 1-d
        code = _code_for(a)
        a = a.astype(_DTYPES[code], copy=False)
        name_b = name.encode()
        rec = struct.pack("<H", len(name_b)) + name_b
        rec += struct.pack("<BB", code, a.ndim)
        rec += struct.pack(f"<{a.ndim}Q", *a.shape)
        raw = a.tobytes(order="C")
        rec += struct.pack("<Q", len(raw)) + raw
        out += [rec, struct.pack("<I", zlib.crc32(rec))]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, expected_tag: str | None = None) -> tuple[str, dict, dict]:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not an F2P checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    (tag_len,) = r.unpack("<H")
    tag_b = r.take(tag_len)
    (meta_len,) = r.unpack("<I")
    meta_b = r.take(meta_len)
    (crc,) = r.unpack("<I")
    if zlib.crc32(buf[: r.pos - 4]) != crc:
        raise ChecksumError("header checksum mismatch")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tag = tag_b.decode()
    if expected_tag is not None and tag != expected_tag:
        raise CheckpointTypeError(f"checkpoint holds a {tag!r} model, expected {expected_tag!r}")
    meta = json.loads(meta_b.decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H")
        name = r.take(name_len)
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        raw = r.take(nbytes)
        (crc,) = r.unpack("<I")
        if zlib.crc32(buf[start:r.pos - 4]) != crc:
            raise ChecksumError(f"checksum mismatch in tensor {name.decode(errors='replace')!r}")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code}")
        tensors[name.decode()] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return tag, meta, tensors


def save(path, tag: str, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tag, tensors, meta))


def load(path, expected_tag: str | None = None) -> tuple[dict, dict]:
    _, meta, tensors = decode(Path(path).read_bytes(), expected_tag)
    return meta, tensors


def save_module(path, tag: str, module: torch.nn.Module, meta: dict | None = None) -> None:
    save(path, tag, dict(module.state_dict()), meta)


def load_state(module: torch.nn.Module, tensors: dict) -> torch.nn.Module:
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)
    return module
