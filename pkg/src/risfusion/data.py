"""Samples, the synthetic IR/VIS generator, region splitting and manifest I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, ShapeError, ValidationError
from .imaging import read_image, write_image
from .rng import SplitMix64
from .text import TextEmbedding, load_embedding, save_embedding, toy_embed

QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
VARIANTS = ("single", "two_targets")


@dataclass
class Sample:
    id: str
    ir: np.ndarray  # (1, H, W)
    vis: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H, W) bool
    expression: str
    embedding: TextEmbedding

    def __post_init__(self):
        self.ir = np.asarray(self.ir, dtype=np.float64)
        self.vis = np.asarray(self.vis, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.ir.ndim == 2:
            self.ir = self.ir[None]
        if self.mask.ndim == 3 and self.mask.shape[0] == 1:
            self.mask = self.mask[0]
        if self.vis.ndim != 3 or self.vis.shape[0] != 3:
            raise ShapeError(f"sample {self.id}: visible image must be (3,H,W), got {self.vis.shape}")
        if self.ir.shape[0] not in (1, 3):
            raise ShapeError(f"sample {self.id}: infrared image must be (1|3,H,W), got {self.ir.shape}")
        hw = self.vis.shape[1:]
        if self.ir.shape[1:] != hw or self.mask.shape != hw:
            raise ShapeError(f"sample {self.id}: ir {self.ir.shape}, vis {self.vis.shape}, mask {self.mask.shape} disagree")
        if not self.mask.any():
            raise ValidationError(f"sample {self.id}: mask has no positive pixel")

    @property
    def size(self) -> tuple[int, int]:
        return self.vis.shape[1], self.vis.shape[2]


class Dataset(Sequence):
    """An ordered list of samples with batch stacking."""

    def __init__(self, samples: Iterable[Sample]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i])
        return self.samples[i]

    def check_nonempty(self) -> None:
        if not self.samples:
            raise ValidationError("dataset is empty")

    def batch(self, indices: Sequence[int]):
        """Stack ``indices`` into (vis, ir, mask, embeddings) with masks shaped (B,1,H,W)."""
        picked = [self.samples[i] for i in indices]
        vis = np.stack([s.vis for s in picked])
        ir = np.stack([s.ir for s in picked])
        mask = np.stack([s.mask for s in picked])[:, None]
        return vis, ir, mask, [s.embedding for s in picked]


# -- region splitting --------------------------------------------------------

def split_regions(class_mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """One binary mask per connected component, ordered by first pixel in raster order."""
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(class_mask)
    if mask.ndim != 2:
        raise ShapeError(f"split_regions: expected an (H,W) mask, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("split_regions: mask must be binary")
    structure = np.ones((3, 3), bool) if connectivity == 8 else ndimage.generate_binary_structure(2, 1)
    labels, count = ndimage.label(mask.astype(bool), structure=structure)
    return [labels == k for k in range(1, count + 1)]


# -- synthetic data ----------------------------------------------------------

def _quadrant_centre(rng: SplitMix64, q: int, h: int, w: int, ry: float, rx: float):
    top, left = (q // 2) * h / 2, (q % 2) * w / 2
    cy = rng.uniform(top + ry + 1, top + h / 2 - ry - 1)
    cx = rng.uniform(left + rx + 1, left + w / 2 - rx - 1)
    return float(cy), float(cx)


def _blob(rng: SplitMix64, q: int, h: int, w: int, scale=(0.10, 0.17)):
    """Normalised elliptic radius map of a random blob inside quadrant ``q``."""
    ry = float(rng.uniform(*scale)) * h
    rx = float(rng.uniform(*scale)) * w
    cy, cx = _quadrant_centre(rng, q, h, w, ry, rx)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)


def _soft(dist: np.ndarray, edge: float = 0.15) -> np.ndarray:
    return np.clip((1.0 + edge - dist) / (2 * edge), 0.0, 1.0)


def _texture(rng: SplitMix64, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    return tex / 3.0


def _quantize(img: np.ndarray) -> np.ndarray:
    # generated data matches what a PNG/PGM round trip would give back
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def toy_sample(rng: SplitMix64, height: int, width: int, variant: str = "single",
               sample_id: str = "0", text_dim: int = 32) -> Sample:
    """One synthetic triplet: a hot target seen only in IR plus a bright VIS-only distractor."""
    h, w = height, width
    order = rng.permutation(4)
    target_q = int(order[0])
    d_target = _blob(rng, target_q, h, w)
    mask = d_target <= 1.0

    ir = rng.uniform(0.10, 0.25) + 0.05 * _texture(rng, h, w) + rng.normal(0.0, 0.03, size=(h, w))
    ir = ir + (rng.uniform(0.75, 0.95) - ir) * _soft(d_target)
    if variant == "two_targets":
        d_other = _blob(rng, int(order[1]), h, w)
        ir = ir + (rng.uniform(0.75, 0.95) - ir) * _soft(d_other)
        distract_q = int(order[2])
    else:
        distract_q = int(order[1])

    tint = rng.uniform(0.3, 0.7, size=3)
    vis = tint[:, None, None] + 0.18 * _texture(rng, h, w)[None] + rng.normal(0.0, 0.03, size=(3, h, w))
    vis = vis + 0.03 * _soft(d_target)[None]  # the target is barely there in VIS
    d_dis = _blob(rng, distract_q, h, w, scale=(0.12, 0.2))
    colour = np.clip(rng.uniform(0.0, 1.0, size=3), 0.0, 1.0)
    colour[int(rng.integers(0, 3))] = 1.0
    vis = vis + (colour[:, None, None] - vis) * _soft(d_dis)[None]
    ir = ir + 0.12 * _soft(d_dis)  # the distractor is only mildly warm

    expression = f"hot blob {QUADRANTS[target_q]}"
    return Sample(sample_id, _quantize(ir)[None], _quantize(vis), mask, expression,
                  toy_embed(expression, text_dim))


def make_toy_data(n: int, height: int = 64, width: int | None = None, seed: int = 0,
                  variant: str = "single", text_dim: int = 32, offset: int = 0) -> Dataset:
    """``n`` synthetic samples; sample ``i`` depends only on (seed, offset + i, shape, variant)."""
    width = height if width is None else width
    if n < 1:
        raise ValidationError(f"make_toy_data: n must be positive, got {n}")
    if height % 8 or width % 8:
        raise ShapeError(f"make_toy_data: {height}x{width} must be divisible by 8")
    if height < 32 or width < 32:
        raise ValidationError("make_toy_data: images must be at least 32x32")
    if variant not in VARIANTS:
        raise ValidationError(f"unknown toy variant {variant!r}; choose from {VARIANTS}")
    root = SplitMix64(seed).spawn(VARIANTS.index(variant) + 101)
    return Dataset(toy_sample(root.spawn(offset + i), height, width, variant, f"{offset + i:05d}", text_dim)
                   for i in range(n))


def make_toy_split(n_train: int, n_test: int, size: int = 64, seed: int = 0, variant: str = "single",
                   text_dim: int = 32) -> tuple[Dataset, Dataset]:
    train = make_toy_data(n_train, size, size, seed, variant, text_dim)
    test = make_toy_data(n_test, size, size, seed, variant, text_dim, offset=n_train)
    return train, test


# -- manifests -----------------------------------------------------------------

MANIFEST_KEYS = ("id", "ir", "vis", "mask", "expression", "embedding")


def write_manifest(dataset: Dataset, out_dir, name: str = "manifest.jsonl") -> Path:
    """Write images (PGM/PPM), embeddings (TEB) and a JSONL manifest with relative paths."""
    out = Path(out_dir)
    for sub in ("ir", "vis", "mask", "emb"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset:
            rec = {
                "id": s.id,
                "ir": f"ir/{s.id}.{'pgm' if s.ir.shape[0] == 1 else 'ppm'}",
                "vis": f"vis/{s.id}.ppm",
                "mask": f"mask/{s.id}.pgm",
                "expression": s.expression,
                "embedding": f"emb/{s.id}.teb",
            }
            write_image(s.ir, out / rec["ir"])
            write_image(s.vis, out / rec["vis"])
            write_image(s.mask.astype(np.float64), out / rec["mask"])
            save_embedding(s.embedding, out / rec["embedding"])
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def read_manifest(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest {path} does not exist")
    base = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in MANIFEST_KEYS if k not in rec]
            if missing:
                raise ValidationError(f"{path}:{lineno}: missing keys {missing}")
            emb = load_embedding(_resolve(base, rec["embedding"]))
            if emb.expression != rec["expression"]:
                raise ValidationError(f"{path}:{lineno}: embedding expression {emb.expression!r} "
                                      f"differs from manifest {rec['expression']!r}")
            mask = read_image(_resolve(base, rec["mask"]))[0] > 0.5
            samples.append(Sample(str(rec["id"]), read_image(_resolve(base, rec["ir"])),
                                  read_image(_resolve(base, rec["vis"])), mask, rec["expression"], emb))
    dataset = Dataset(samples)
    dataset.check_nonempty()
    return dataset


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p

