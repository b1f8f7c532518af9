"""Token-embedding matrices: the TEB file format and a deterministic toy embedder.

The networks only need an (N, d) matrix per expression; a frozen language
model's output can be exported to TEB and loaded here.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .rng import SplitMix64, fnv1a64, mix64

MAGIC = b"TEB1"
_HEADER = struct.Struct("<4sIII")
MAX_TOKENS = 1 << 16
MAX_DIM = 1 << 16

# Fixed global seed for toy_embed; changing it changes every golden value.
TOY_SEED = 0x5EED_F00D_2025


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    expression: str
    matrix: np.ndarray  # (N, d) float32

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValidationError(f"embedding matrix must be (N>=1, d>=1), got {m.shape}")
        if not np.isfinite(m).all():
            raise ValidationError("embedding matrix contains NaN/Inf")
        object.__setattr__(self, "matrix", m)

    @property
    def tokens(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TextEmbedding):
            return NotImplemented
        return self.expression == other.expression and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def toy_embed(expression: str, dim: int = 32) -> TextEmbedding:
    """One row per whitespace token, each a seeded hash expanded to ``dim`` values in [-1, 1]."""
    tokens = expression.split()
    if not tokens:
        raise ValidationError("toy_embed: expression is empty")
    if dim < 1:
        raise ValidationError(f"toy_embed: dim must be positive, got {dim}")
    rows = []
    for tok in tokens:
        seed = mix64(fnv1a64(tok.encode("utf-8")) ^ TOY_SEED)
        rows.append(SplitMix64(seed).uniform(-1.0, 1.0, size=dim))
    return TextEmbedding(expression, np.stack(rows).astype(np.float32))


def zero_embedding(like: TextEmbedding) -> TextEmbedding:
    # Bypasses the row-norm check on purpose: used only as an ablation input.
    return TextEmbedding(like.expression, np.zeros_like(like.matrix))


def encode_embedding(emb: TextEmbedding) -> bytes:
    expr = emb.expression.encode("utf-8")
    header = _HEADER.pack(MAGIC, emb.tokens, emb.dim, len(expr))
    return header + expr + emb.matrix.astype("<f4").tobytes(order="C")


def decode_embedding(raw: bytes, source: str = "<bytes>") -> TextEmbedding:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{source}: file too short for a TEB header ({len(raw)} bytes)")
    magic, n, d, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if n == 0 or d == 0:
        raise ValidationError(f"{source}: token count and dimension must be positive (N={n}, d={d})")
    if n > MAX_TOKENS or d > MAX_DIM:
        raise FormatError(f"{source}: dimensions N={n}, d={d} exceed limits")
    body = raw[_HEADER.size:]
    need = length + 4 * n * d
    if len(body) < need:
        raise FormatError(f"{source}: truncated TEB payload ({len(body)} of {need} bytes)")
    if len(body) > need:
        raise FormatError(f"{source}: {len(body) - need} trailing bytes after TEB payload")
    try:
        expression = body[:length].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{source}: expression is not valid UTF-8") from exc
    matrix = np.frombuffer(body[length:], dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.isfinite(matrix).all():
        raise ValidationError(f"{source}: embedding contains NaN/Inf")
    if (np.linalg.norm(matrix, axis=1) == 0).any():
        raise ValidationError(f"{source}: embedding has a zero-norm token row")
    return TextEmbedding(expression, matrix)


def save_embedding(emb: TextEmbedding, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_embedding(emb))


def load_embedding(path) -> TextEmbedding:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_embedding(raw, str(path))
