"""RFCK checkpoint container.

Layout, all little-endian::

    "RFCK" | u32 version
    config: u32 n_fuse, u32 x n_fuse | u32 n_seg, u32 x n_seg | u32 d | f32 lambda | u32 flags | u32 seed
    u32 record count, then per record:
        u32 name length | name (UTF-8) | u8 group | u32 rank | u32 x rank dims | f32 data (row-major)

``flags`` bit 0 is ``use_text``. Parameters are stored as float32, so a
float32 model round-trips bit-exactly.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, RISFusionModel
from .nn import GROUPS

MAGIC = b"RFCK"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")
MAX_RANK = 8


def encode_checkpoint(model: RISFusionModel) -> bytes:
    c = model.config
    out = bytearray(MAGIC + _U32.pack(VERSION))
    for chans in (c.fusion_channels, c.seg_channels):
        out += _U32.pack(len(chans)) + b"".join(_U32.pack(ch) for ch in chans)
    out += _U32.pack(c.text_dim) + _F32.pack(c.film_lambda) + _U32.pack(int(c.use_text)) + _U32.pack(c.seed)
    params = list(model.named_parameters())
    out += _U32.pack(len(params))
    for name, p in params:
        raw = name.encode("utf-8")
        out += _U32.pack(len(raw)) + raw + bytes([GROUPS.index(p.group)])
        out += _U32.pack(p.ndim) + b"".join(_U32.pack(s) for s in p.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(raw: bytes, source: str = "<bytes>", dtype=np.float32) -> RISFusionModel:
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not an RFCK checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    chans = []
    for _ in range(2):
        n = r.u32()
        if n > 16:
            raise FormatError(f"{source}: implausible channel count {n}")
        chans.append(tuple(r.u32() for _ in range(n)))
    d = r.u32()
    lam = _F32.unpack(r.take(4))[0]
    flags = r.u32()
    seed = r.u32()
    config = ModelConfig(chans[0], chans[1], d, float(lam), bool(flags & 1), seed)
    try:
        model = RISFusionModel(config, dtype=dtype)
    except Exception as exc:
        raise FormatError(f"{source}: invalid model config in checkpoint ({exc})") from exc
    params = dict(model.named_parameters())
    count = r.u32()
    state = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="strict")
        group = r.take(1)[0]
        rank = r.u32()
        if rank > MAX_RANK:
            raise FormatError(f"{source}: parameter {name!r} has rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if name not in params:
            raise FormatError(f"{source}: unexpected parameter {name!r}")
        if group >= len(GROUPS) or GROUPS[group] != params[name].group:
            raise FormatError(f"{source}: parameter {name!r} has wrong group tag {group}")
        state[name] = data
    if r.pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes after checkpoint")
    if set(state) != set(params):
        missing = sorted(set(params) - set(state))
        raise FormatError(f"{source}: checkpoint lacks parameters {missing[:3]}")
    model.load_state_dict(state)
    return model


def save_checkpoint(model: RISFusionModel, path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path, dtype=np.float32) -> RISFusionModel:
    return decode_checkpoint(Path(path).read_bytes(), str(path), dtype=dtype)
