"""Toy referring-segmentation head.

A three-stage conv encoder over the fused RGB image (plus two coordinate
channels so spatial words in the expression can be grounded). Stage 1 already
runs at half resolution; logits are predicted there and upsampled, as
LAVT-style heads do at quarter resolution. Text enters through
language-guided attention after stages 2 and 3, and again in the decoder as
the mean-pooled vector concatenated to every pixel. The decoder conv taps on
those constant text channels are kept only at the kernel centre, which turns
them into a linear map of the pooled text added as a per-channel offset.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import ShapeError, ValidationError
from .fusion import LanguageGuidedAttention, TextBatch, _Block, as_text_batch
from .nn import Conv2d, Linear, Module
from .rng import SplitMix64

GROUP = "segmentation"


@dataclass
class MaskLogits:
    logits: Tensor  # (B, 1, H, W)
    prob: Tensor


def coordinate_planes(batch: int, height: int, width: int, dtype) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, height, dtype=dtype)
    xs = np.linspace(-1.0, 1.0, width, dtype=dtype)
    grid = np.stack(np.meshgrid(xs, ys, indexing="xy"))  # (2, H, W): x then y
    return np.broadcast_to(grid, (batch, 2, height, width)).copy()


class _TextInjection(Module):
    """feats + relu(conv1x1([feats, LGA(feats, text)]))."""

    def __init__(self, channels: int, dim: int, *, rng: SplitMix64, dtype):
        self.lga = LanguageGuidedAttention(channels, dim, rng=rng, group=GROUP, dtype=dtype)
        self.mix = Conv2d(channels + dim, channels, 1, rng=rng, group=GROUP, dtype=dtype)

    def __call__(self, feats: Tensor, text: TextBatch) -> Tensor:
        ctx, _ = self.lga(feats, text)
        return feats + ops.relu(self.mix(ops.concat([feats, ctx], axis=1)))


class RISHead(Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64), text_dim: int = 32, seed: int = 0,
                 dtype=np.float64):
        if len(channels) != 3:
            raise ValidationError(f"segmentation encoder needs 3 channel widths, got {len(channels)}")
        self.channels = tuple(int(c) for c in channels)
        self.text_dim = int(text_dim)
        rng = SplitMix64(seed).spawn(7)
        c1, c2, c3 = self.channels
        d = self.text_dim
        self.stage1 = _Block(3 + 2, c1, 2, rng=rng, group=GROUP, dtype=dtype)
        self.stage2 = _Block(c1, c2, 2, rng=rng, group=GROUP, dtype=dtype)
        self.stage3 = _Block(c2, c3, 2, rng=rng, group=GROUP, dtype=dtype)
        self.inject2 = _TextInjection(c2, d, rng=rng, dtype=dtype)
        self.inject3 = _TextInjection(c3, d, rng=rng, dtype=dtype)
        self.up2 = Conv2d(c3 + c2, c2, 3, rng=rng, group=GROUP, dtype=dtype)
        self.up1 = Conv2d(c2 + c1, c1, 3, rng=rng, group=GROUP, dtype=dtype)
        self.text2 = Linear(d, c2, rng=rng, group=GROUP, dtype=dtype)
        self.text1 = Linear(d, c1, rng=rng, group=GROUP, dtype=dtype)
        self.head = Conv2d(c1, 1, 1, rng=rng, group=GROUP, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def __call__(self, image: Tensor, text) -> MaskLogits:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"segment: expected (B,3,H,W) image, got {image.shape}")
        b, _, h, w = image.shape
        if h % 8 or w % 8:
            raise ShapeError(f"segment: input {h}x{w} must be divisible by 8; resize first")
        text = as_text_batch(text, b, self.dtype)
        coords = Tensor(coordinate_planes(b, h, w, self.dtype))
        s1 = self.stage1(ops.concat([image, coords], axis=1))
        s2 = self.inject2(self.stage2(s1), text)
        s3 = self.inject3(self.stage3(s2), text)
        pooled = text.pooled()

        x = ops.upsample_nearest2d(s3, 2, size=s2.shape[2:])
        x = self.up2(ops.concat([x, s2], axis=1)) + _offset(self.text2(pooled))
        x = ops.upsample_nearest2d(ops.relu(x), 2, size=s1.shape[2:])
        x = self.up1(ops.concat([x, s1], axis=1)) + _offset(self.text1(pooled))
        logits = ops.upsample_nearest2d(self.head(ops.relu(x)), 2, size=(h, w))
        return MaskLogits(logits, ops.sigmoid(logits))


def _offset(vec: Tensor) -> Tensor:
    return ops.reshape(vec, vec.shape + (1, 1))


def segment(head: RISHead, image: Tensor, text) -> MaskLogits:
    return head(image, text)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Hard mask ``prob > threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"binarize: threshold {threshold} outside (0, 1)")
    data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return data > threshold
