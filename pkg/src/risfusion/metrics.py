"""IoU, P@t and mIoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def iou(pred, target) -> float:
    """|pred & target| / |pred | target|; two empty masks count as a perfect match."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(target).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"iou: prediction {p.shape} vs target {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class MetricsReport:
    per_sample_iou: list[float]
    mIoU: float
    precision_at: dict[float, float] = field(default_factory=dict)

    @classmethod
    def from_ious(cls, ious: Sequence[float], thresholds: Sequence[float] = THRESHOLDS) -> "MetricsReport":
        vals = [float(v) for v in ious]
        if not vals:
            raise ValidationError("MetricsReport needs at least one IoU value")
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValidationError("IoU values must lie in [0, 1]")
        arr = np.asarray(vals)
        prec = {float(t): float(np.count_nonzero(arr > t) / arr.size) for t in thresholds}
        return cls(vals, float(arr.mean()), prec)

    def to_dict(self) -> dict:
        return {
            "per_sample_iou": list(self.per_sample_iou),
            "mIoU": self.mIoU,
            "precision_at": {f"{t:g}": v for t, v in self.precision_at.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls([float(v) for v in d["per_sample_iou"]], float(d["mIoU"]),
                   {float(k): float(v) for k, v in d["precision_at"].items()})
