"""Fusion stage: dual-stream pyramid encoder, text-gated fusion, U-Net decoder.

Levels 1-2 of the two pyramids are summed; levels 3-4 go through
:class:`LangGatedFusion`, which attends from pixels to text tokens and turns
the attended context into a soft modality gate plus a FiLM scale/shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import ShapeError, ValidationError
from .imaging import luma_to_rgb, rgb_to_ycbcr, to_luminance
from .nn import Conv2d, Linear, Module
from .rng import SplitMix64
from .text import TextEmbedding

NUM_LEVELS = 4
TEXT_LEVELS = (2, 3)  # zero-based pyramid levels that receive LangGatedFusion
MASK_FILL = -1e9


@dataclass
class TextBatch:
    """Token embeddings padded to a common length; ``mask`` marks real tokens."""

    tokens: Tensor  # (B, N, d)
    mask: np.ndarray  # (B, N) bool

    @classmethod
    def from_embeddings(cls, embeddings: Sequence[TextEmbedding], dtype=np.float64) -> "TextBatch":
        if not embeddings:
            raise ValidationError("empty text batch")
        dims = {e.dim for e in embeddings}
        if len(dims) != 1:
            raise ShapeError(f"text batch mixes embedding dimensions {sorted(dims)}")
        n = max(e.tokens for e in embeddings)
        tokens = np.zeros((len(embeddings), n, dims.pop()), dtype=dtype)
        mask = np.zeros((len(embeddings), n), dtype=bool)
        for i, e in enumerate(embeddings):
            tokens[i, :e.tokens] = e.matrix
            mask[i, :e.tokens] = True
        return cls(Tensor(tokens), mask)

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def pooled(self) -> Tensor:
        """Mean over real tokens, (B, d)."""
        weights = self.mask / self.mask.sum(axis=1, keepdims=True)
        return ops.sum(self.tokens * Tensor(weights[..., None].astype(self.tokens.dtype)), axis=1)


def as_text_batch(text, batch: int, dtype) -> TextBatch:
    if isinstance(text, TextBatch):
        return text
    if isinstance(text, TextEmbedding):
        text = [text] * batch
    return TextBatch.from_embeddings(list(text), dtype=dtype)


def attend(queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None = None):
    """Scaled dot-product attention; returns (output, weights).

    queries (B, P, d), keys/values (B, N, d); padded keys are excluded via ``mask``.
    """
    d = queries.shape[-1]
    scores = ops.matmul(queries, ops.transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(d))
    if mask is not None and not mask.all():
        bias = np.where(mask, 0.0, MASK_FILL).astype(scores.dtype)[:, None, :]
        scores = scores + Tensor(bias)
    weights = ops.softmax(scores, axis=-1)
    return ops.matmul(weights, values), weights


class LanguageGuidedAttention(Module):
    """Pixels query text tokens: ctx = reshape(softmax(Q K^T / sqrt(d)) V)."""

    def __init__(self, cin: int, dim: int, *, rng: SplitMix64, group: str = "fusion", dtype=np.float64):
        self.dim = dim
        self.query = Conv2d(cin, dim, 1, rng=rng, group=group, dtype=dtype)
        self.key = Linear(dim, dim, rng=rng, group=group, dtype=dtype)
        self.value = Linear(dim, dim, rng=rng, group=group, dtype=dtype)

    def __call__(self, feats: Tensor, text: TextBatch) -> tuple[Tensor, Tensor]:
        if text.tokens.shape[1] == 0:
            raise ValidationError("language-guided attention needs at least one token")
        if text.dim != self.dim:
            raise ShapeError(f"text dimension {text.dim} != attention dimension {self.dim}")
        b, _, h, w = feats.shape
        q = ops.transpose(ops.reshape(self.query(feats), (b, self.dim, h * w)), (0, 2, 1))
        k = self.key(text.tokens)
        v = self.value(text.tokens)
        out, weights = attend(q, k, v, text.mask)
        ctx = ops.reshape(ops.transpose(out, (0, 2, 1)), (b, self.dim, h, w))
        return ctx, weights


def lang_gated_fuse(f_vi: Tensor, f_ir: Tensor, alpha: Tensor, gamma: Tensor, beta: Tensor,
                    film_lambda: float) -> Tensor:
    """(1 + lambda*gamma) * [(1 - alpha) * f_vi + alpha * f_ir] + beta, gates broadcast over channels."""
    if f_vi.shape != f_ir.shape:
        raise ShapeError(f"lang_gated_fuse: feature shapes differ {f_vi.shape} vs {f_ir.shape}")
    mixed = (1.0 - alpha) * f_vi + alpha * f_ir
    return (1.0 + film_lambda * gamma) * mixed + beta


@dataclass
class LangGateOutput:
    fused: Tensor
    alpha: Tensor
    gamma: Tensor
    beta: Tensor
    ctx: Tensor
    attention: Tensor


class LangGatedFusion(Module):
    def __init__(self, channels: int, dim: int, film_lambda: float = 0.1, *, rng: SplitMix64, dtype=np.float64):
        self.film_lambda = film_lambda
        self.lga = LanguageGuidedAttention(2 * channels, dim, rng=rng, dtype=dtype)
        self.conv_alpha = Conv2d(dim, 1, 1, rng=rng, dtype=dtype)
        self.conv_film = Conv2d(dim, 2, 1, rng=rng, zero_init=True, dtype=dtype)

    def __call__(self, f_vi: Tensor, f_ir: Tensor, text: TextBatch) -> LangGateOutput:
        if f_vi.shape != f_ir.shape:
            raise ShapeError(f"LangGatedFusion: feature shapes differ {f_vi.shape} vs {f_ir.shape}")
        ctx, attention = self.lga(ops.concat([f_vi, f_ir], axis=1), text)
        alpha = ops.sigmoid(self.conv_alpha(ctx))
        gamma, beta = ops.split(self.conv_film(ctx), [1, 1], axis=1)
        fused = lang_gated_fuse(f_vi, f_ir, alpha, gamma, beta, self.film_lambda)
        return LangGateOutput(fused, alpha, gamma, beta, ctx, attention)


class PyramidEncoder(Module):
    """Four levels of [conv3x3 -> relu -> conv3x3 -> relu]; levels 2-4 open with a stride-2 conv."""

    def __init__(self, channels: Sequence[int], cin: int = 1, *, rng: SplitMix64, dtype=np.float64):
        self.blocks = []
        prev = cin
        for level, c in enumerate(channels):
            stride = 1 if level == 0 else 2
            self.blocks.append(_Block(prev, c, stride, rng=rng, dtype=dtype))
            prev = c

    def __call__(self, x: Tensor) -> list[Tensor]:
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


class _Block(Module):
    def __init__(self, cin: int, cout: int, stride: int, *, rng: SplitMix64, group: str = "fusion", dtype=np.float64):
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng, group=group, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, group=group, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.conv2(ops.relu(self.conv1(x))))


class UNetDecoder(Module):
    """Nearest upsample, concatenate the skip level, conv3x3 + relu; 1x1 conv + sigmoid head."""

    def __init__(self, channels: Sequence[int], *, rng: SplitMix64, dtype=np.float64):
        self.ups = [Conv2d(channels[l + 1] + channels[l], channels[l], 3, rng=rng, dtype=dtype)
                    for l in reversed(range(len(channels) - 1))]
        self.head = Conv2d(channels[0], 1, 1, rng=rng, dtype=dtype)

    def __call__(self, levels: Sequence[Tensor]) -> Tensor:
        x = levels[-1]
        for conv, skip in zip(self.ups, reversed(levels[:-1])):
            x = ops.upsample_nearest2d(x, 2, size=skip.shape[2:])
            x = ops.relu(conv(ops.concat([x, skip], axis=1)))
        return ops.sigmoid(self.head(x))


@dataclass
class FusionOutput:
    y_fuse: Tensor
    gates: list[LangGateOutput]


class FusionNet(Module):
    """Text-conditioned IR/VIS luminance fusion.

    With ``use_text=False`` every level is fused by addition and the text
    input is ignored (the "no LangGatedFusion" ablation arm).
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 128), text_dim: int = 32,
                 film_lambda: float = 0.1, use_text: bool = True, seed: int = 0, dtype=np.float64):
        if len(channels) != NUM_LEVELS:
            raise ValidationError(f"fusion encoder needs {NUM_LEVELS} channel widths, got {len(channels)}")
        self.channels = tuple(int(c) for c in channels)
        self.text_dim = int(text_dim)
        self.film_lambda = float(film_lambda)
        self.use_text = bool(use_text)
        rng = SplitMix64(seed)
        self.enc_vi = PyramidEncoder(self.channels, rng=rng.spawn(1), dtype=dtype)
        self.enc_ir = PyramidEncoder(self.channels, rng=rng.spawn(2), dtype=dtype)
        gate_rng = rng.spawn(3)
        self.gates = ([LangGatedFusion(self.channels[l], self.text_dim, self.film_lambda, rng=gate_rng, dtype=dtype)
                       for l in TEXT_LEVELS] if self.use_text else [])
        self.decoder = UNetDecoder(self.channels, rng=rng.spawn(4), dtype=dtype)

    @property
    def dtype(self):
        return self.decoder.head.weight.dtype

    def encode(self, y: Tensor, stream: str) -> list[Tensor]:
        h, w = y.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"input {h}x{w} must be divisible by 8; resize first (e.g. resize_bilinear)")
        if stream == "vi":
            return self.enc_vi(y)
        if stream == "ir":
            return self.enc_ir(y)
        raise ValidationError(f"unknown stream {stream!r}")

    def fuse_pyramids(self, p_vi: Sequence[Tensor], p_ir: Sequence[Tensor], text: TextBatch | None):
        fused, gates = [], []
        for level, (a, b) in enumerate(zip(p_vi, p_ir)):
            if a.shape != b.shape:
                raise ShapeError(f"pyramid level {level + 1}: {a.shape} vs {b.shape}")
            if self.use_text and level in TEXT_LEVELS:
                if text is None:
                    raise ValidationError("text embedding required when use_text=True")
                out = self.gates[TEXT_LEVELS.index(level)](a, b, text)
                gates.append(out)
                fused.append(out.fused)
            else:
                fused.append(a + b)
        return fused, gates

    def decode(self, levels: Sequence[Tensor]) -> Tensor:
        if len(levels) != NUM_LEVELS:
            raise ValidationError(f"decoder expects {NUM_LEVELS} levels, got {len(levels)}")
        return self.decoder(levels)

    def __call__(self, y_vi: Tensor, y_ir: Tensor, text=None) -> FusionOutput:
        if y_vi.shape != y_ir.shape:
            raise ShapeError(f"visible {y_vi.shape} and infrared {y_ir.shape} luminance differ")
        if text is not None and not isinstance(text, TextBatch):
            text = as_text_batch(text, y_vi.shape[0], self.dtype)
        levels, gates = self.fuse_pyramids(self.encode(y_vi, "vi"), self.encode(y_ir, "ir"), text)
        return FusionOutput(self.decode(levels), gates)


@dataclass
class FusedPair:
    rgb: Tensor  # (B, 3, H, W)
    y_fuse: Tensor  # (B, 1, H, W)
    y_vi: np.ndarray
    y_ir: np.ndarray
    cb: np.ndarray
    cr: np.ndarray
    gates: list[LangGateOutput]


def split_inputs(vis: np.ndarray, ir: np.ndarray):
    """Batch (B,3,H,W) visible and (B,1|3,H,W) infrared arrays into luminance/chroma planes."""
    vis = np.asarray(vis, dtype=np.float64)
    ir = np.asarray(ir, dtype=np.float64)
    if vis.ndim == 3:
        vis, ir = vis[None], ir[None]
    if vis.shape[0] != ir.shape[0] or vis.shape[2:] != ir.shape[2:]:
        raise ShapeError(f"visible {vis.shape} and infrared {ir.shape} sizes differ (no implicit resize)")
    planes = [rgb_to_ycbcr(v) for v in vis]
    y_vi = np.stack([p.y for p in planes])
    cb = np.stack([p.cb for p in planes])
    cr = np.stack([p.cr for p in planes])
    y_ir = np.stack([to_luminance(i) for i in ir])
    return y_vi, y_ir, cb, cr


def fuse_pair(net: FusionNet, vis: np.ndarray, ir: np.ndarray, text=None) -> FusedPair:
    """Full fusion pass: YCbCr split, encode, fuse, decode, re-attach the visible chroma."""
    y_vi, y_ir, cb, cr = split_inputs(vis, ir)
    dtype = net.dtype
    out = net(Tensor(y_vi.astype(dtype)), Tensor(y_ir.astype(dtype)), text)
    rgb = luma_to_rgb(out.y_fuse, cb, cr)
    return FusedPair(rgb, out.y_fuse, y_vi, y_ir, cb, cr, out.gates)
