"""The cascaded fusion -> segmentation model."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ValidationError
from .fusion import FusedPair, FusionNet, TextBatch, fuse_pair
from .nn import Module
from .ris import MaskLogits, RISHead
from .text import TextEmbedding


@dataclass(frozen=True)
class ModelConfig:
    fusion_channels: tuple[int, ...] = (16, 32, 64, 128)
    seg_channels: tuple[int, ...] = (16, 32, 64)
    text_dim: int = 32
    film_lambda: float = 0.1
    use_text: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion_channels", tuple(int(c) for c in self.fusion_channels))
        object.__setattr__(self, "seg_channels", tuple(int(c) for c in self.seg_channels))
        if any(c < 1 for c in self.fusion_channels + self.seg_channels):
            raise ValidationError("channel widths must be positive")
        if self.text_dim < 1:
            raise ValidationError(f"text_dim must be positive, got {self.text_dim}")
        if not np.isfinite(self.film_lambda) or self.film_lambda < 0:
            raise ValidationError(f"film_lambda must be finite and >= 0, got {self.film_lambda}")
        # checkpoints store lambda as f32; keep only representable values so save/load is exact
        object.__setattr__(self, "film_lambda", float(np.float32(self.film_lambda)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_channels"] = list(self.fusion_channels)
        d["seg_channels"] = list(self.seg_channels)
        return d


@dataclass
class Prediction:
    fused: FusedPair
    mask: MaskLogits


class RISFusionModel(Module):
    def __init__(self, config: ModelConfig | None = None, dtype=np.float64):
        self.config = config or ModelConfig()
        c = self.config
        self.fusion = FusionNet(c.fusion_channels, c.text_dim, c.film_lambda, c.use_text, c.seed, dtype=dtype)
        self.ris = RISHead(c.seg_channels, c.text_dim, c.seed, dtype=dtype)

    @property
    def dtype(self):
        return self.fusion.dtype

    def text_batch(self, embeddings: Sequence[TextEmbedding] | TextEmbedding, batch: int) -> TextBatch:
        if isinstance(embeddings, TextEmbedding):
            embeddings = [embeddings] * batch
        if len(embeddings) != batch:
            raise ValidationError(f"{len(embeddings)} embeddings for a batch of {batch}")
        for e in embeddings:
            if e.dim != self.config.text_dim:
                raise ValidationError(f"embedding dim {e.dim} does not match model text_dim {self.config.text_dim}")
        return TextBatch.from_embeddings(list(embeddings), dtype=self.dtype)

    def __call__(self, vis: np.ndarray, ir: np.ndarray, embeddings, detach_fusion: bool = False) -> Prediction:
        vis = np.asarray(vis)
        batch = 1 if vis.ndim == 3 else vis.shape[0]
        text = self.text_batch(embeddings, batch)
        fused = fuse_pair(self.fusion, vis, ir, text if self.config.use_text else None)
        seg_in = Tensor(fused.rgb.data) if detach_fusion else fused.rgb
        return Prediction(fused, self.ris(seg_in, text))
