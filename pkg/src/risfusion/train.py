"""Joint training loop and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import no_grad
from .data import Dataset, Sample
from .errors import NonFiniteError, TrainingError, ValidationError
from .imaging import resize_bilinear, resize_nearest
from .losses import FUSION_TERMS, LossWeights, dice_loss, fusion_loss, total_loss
from .metrics import MetricsReport, iou
from .model import ModelConfig, RISFusionModel
from .optim import AdamW, AdamWConfig
from .ris import binarize
from .rng import SplitMix64
from .text import TextEmbedding

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    seed: int = 0
    lr_seg: float = 5e-5
    lr_fuse: float = 1e-4
    weight_decay: float = 1e-2
    lambda_fuse: float = 1.0
    lambda_film: float = 0.1
    epsilon_dice: float = 1.0
    steps: int = 500
    batch: int = 4
    size: int = 64
    detach_fusion: bool = False
    use_text: bool = True
    dual_class_dice: bool = False
    fusion_channels: tuple[int, ...] = (16, 32, 64, 128)
    seg_channels: tuple[int, ...] = (16, 32, 64)
    text_dim: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        self.fusion_channels = tuple(int(c) for c in self.fusion_channels)
        self.seg_channels = tuple(int(c) for c in self.seg_channels)
        for name in ("steps", "batch", "size"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.size % 8:
            raise ValidationError(f"size must be divisible by 8, got {self.size}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        # range checks live with the objects that consume the values
        self.loss_weights()
        self.optimizer_config()
        self.model_config()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        try:
            if path.suffix.lower() == ".toml":
                try:
                    import tomllib
                except ImportError:  # Python 3.10
                    import tomli as tomllib

                data = tomllib.loads(text)
            else:
                data = json.loads(text)
        except ValueError as exc:
            raise ValidationError(f"config {path} is not valid {path.suffix or 'JSON'}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"config {path} must hold a table/object at top level")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_channels"] = list(self.fusion_channels)
        d["seg_channels"] = list(self.seg_channels)
        return d

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_fuse=self.lambda_fuse, epsilon_dice=self.epsilon_dice, lambda_film=self.lambda_film)

    def optimizer_config(self) -> AdamWConfig:
        return AdamWConfig(lr_seg=self.lr_seg, lr_fuse=self.lr_fuse, weight_decay=self.weight_decay)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.fusion_channels, self.seg_channels, self.text_dim, self.lambda_film,
                           self.use_text, self.seed)


def prepare(dataset: Dataset, size: int) -> Dataset:
    """Resize every sample to ``size`` x ``size`` (bilinear images, nearest masks)."""
    out = []
    for s in dataset:
        if s.size == (size, size):
            out.append(s)
            continue
        mask = resize_nearest(s.mask, size, size)
        if not mask.any():
            raise ValidationError(f"sample {s.id}: mask vanishes when resized to {size}x{size}")
        out.append(Sample(s.id, resize_bilinear(s.ir, size, size), resize_bilinear(s.vis, size, size),
                          mask, s.expression, s.embedding))
    return Dataset(out)


def batch_indices(n: int, batch: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of batches: a fresh seeded permutation per epoch, wrapping across epochs."""
    epoch = 0
    pending: list[int] = []
    stream = SplitMix64(seed).spawn(0xBA7C4)
    while True:
        while len(pending) < batch:
            pending.extend(int(i) for i in stream.spawn(epoch).permutation(n))
            epoch += 1
        yield np.array(pending[:batch])
        pending = pending[batch:]


@dataclass
class StepResult:
    total: float
    seg: float
    fuse: float
    terms: dict[str, float]


def train_step(model: RISFusionModel, opt: AdamW, vis, ir, mask, embeddings, config: TrainConfig,
               weights: LossWeights | None = None) -> StepResult:
    weights = weights or config.loss_weights()
    pred = model(vis, ir, embeddings, detach_fusion=config.detach_fusion)
    l_seg = dice_loss(pred.mask.prob, mask.astype(model.dtype), weights.epsilon_dice, config.dual_class_dice)
    fl = fusion_loss(pred.fused.y_fuse, pred.fused.y_vi, pred.fused.y_ir, weights)
    l_total = total_loss(l_seg, fl.total, weights.lambda_fuse)
    opt.zero_grad()
    l_total.backward()
    opt.step(allow_missing=config.detach_fusion and weights.lambda_fuse == 0)
    return StepResult(l_total.item(), l_seg.item(), fl.total.item(), fl.breakdown())


@dataclass
class TrainResult:
    model: RISFusionModel
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def final_losses(self) -> dict[str, float]:
        return {k: v for k, v in self.log[-1].items() if k != "step"} if self.log else {}


def log_record(step: int, res: StepResult) -> dict:
    rec = {"step": step, "L_seg": res.seg}
    rec.update({f"L_{k}": res.terms[k] for k in FUSION_TERMS})
    rec["L_fuse"] = res.fuse
    rec["L_total"] = res.total
    return rec


def train(config: TrainConfig, dataset: Dataset, log_path=None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Deterministic joint training; one JSONL record per step when ``log_path`` is given."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    data = prepare(dataset, config.size)
    dtype = DTYPES[config.dtype]
    model = RISFusionModel(config.model_config(), dtype=dtype)
    opt = AdamW(model.named_parameters(), config.optimizer_config())
    weights = config.loss_weights()
    result = TrainResult(model)
    batches = batch_indices(len(data), config.batch, config.seed)
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    start = time.perf_counter()
    try:
        for step in range(1, config.steps + 1):
            vis, ir, mask, embs = data.batch(next(batches))
            try:
                res = train_step(model, opt, vis, ir, mask, embs, config, weights)
            except NonFiniteError as exc:
                last = result.log[-1] if result.log else {}
                raise TrainingError(f"non-finite value at step {step} ({exc}); last losses {last}") from exc
            if not math.isfinite(res.total):
                raise TrainingError(f"loss became non-finite at step {step}: {res}")
            rec = log_record(step, res)
            result.log.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(rec)
    finally:
        if fh is not None:
            fh.close()
    result.seconds = time.perf_counter() - start
    return result


def predict_masks(model: RISFusionModel, dataset: Dataset, threshold: float = 0.5, batch: int = 8,
                  embeddings: Sequence[TextEmbedding] | None = None) -> list[np.ndarray]:
    """Binary masks for every sample, in dataset order; ``embeddings`` overrides the samples' own."""
    if embeddings is not None and len(embeddings) != len(dataset):
        raise ValidationError(f"{len(embeddings)} override embeddings for {len(dataset)} samples")
    masks = []
    with no_grad():
        for lo in range(0, len(dataset), batch):
            idx = list(range(lo, min(lo + batch, len(dataset))))
            vis, ir, _, embs = dataset.batch(idx)
            if embeddings is not None:
                embs = [embeddings[i] for i in idx]
            pred = model(vis, ir, embs)
            masks.extend(binarize(pred.mask.prob, threshold)[:, 0])
    return masks


def evaluate(model: RISFusionModel, dataset: Dataset, threshold: float = 0.5, batch: int = 8,
             embeddings: Sequence[TextEmbedding] | None = None) -> MetricsReport:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    masks = predict_masks(model, dataset, threshold, batch, embeddings)
    return MetricsReport.from_ious([iou(m, s.mask) for m, s in zip(masks, dataset)])


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
