"""Training objectives: Dice for the mask, the five-term fusion loss, and their weighted total.

Norms are taken as per-pixel means so the loss scale does not depend on the
image size; with that reading a constant-plane residual ``c`` costs ``c**2``
in the MSE terms.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, ops
from .errors import ShapeError, ValidationError
from .imaging import directional_gradients, sobel_magnitude

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

FUSION_TERMS = ("ssim_vi", "mse_vi", "mse_ir", "sobel_ir", "grad")


@dataclass(frozen=True)
class LossWeights:
    ssim_vi: float = 0.5
    mse_vi: float = 0.5
    mse_ir: float = 2.0
    sobel_ir: float = 1.0
    grad: float = 1.0
    lambda_fuse: float = 1.0
    epsilon_dice: float = 1.0
    lambda_film: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")
        if self.epsilon_dice <= 0:
            raise ValidationError(f"epsilon_dice must be > 0, got {self.epsilon_dice}")

    def term_weights(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FUSION_TERMS}

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else Tensor(x.data.astype(dtype))
    arr = np.asarray(x)
    return Tensor(arr.astype(dtype or (arr.dtype if arr.dtype.kind == "f" else np.float64)))


def _per_sample(t: Tensor) -> Tensor:
    # (..., H, W) or (B, 1, H, W) -> (B, H*W); a bare plane is a batch of one
    if t.ndim <= 3 and (t.ndim < 3 or t.shape[0] == 1):
        return ops.reshape(t, (1, -1))
    return ops.reshape(t, (t.shape[0], -1))


def dice_loss(prob, target, eps: float = 1.0, dual_class: bool = False) -> Tensor:
    """Smoothed Dice ``1 - (2*sum(PG) + eps) / (sum(P) + sum(G) + eps)``, averaged over the batch.

    ``dual_class`` averages the foreground term with the same expression on
    the complements ``1-P``, ``1-G``.
    """
    p = _as_tensor(prob)
    g = np.asarray(target.data if isinstance(target, Tensor) else target)
    if p.shape != g.shape:
        raise ShapeError(f"dice_loss: prediction {p.shape} vs target {g.shape}")
    if not np.isin(g, (0, 1)).all():
        raise ValidationError("dice_loss: target mask must be binary (0/1)")
    if eps <= 0:
        raise ValidationError(f"dice_loss: eps must be > 0, got {eps}")
    gt = Tensor(g.astype(p.dtype))
    loss = _dice(_per_sample(p), _per_sample(gt), eps)
    if dual_class:
        loss = 0.5 * (loss + _dice(_per_sample(1.0 - p), _per_sample(1.0 - gt), eps))
    return loss


def _dice(p: Tensor, g: Tensor, eps: float) -> Tensor:
    inter = ops.sum(p * g, axis=1)
    denom = ops.sum(p, axis=1) + ops.sum(g, axis=1) + eps
    return ops.mean(1.0 - (2.0 * inter + eps) / denom)


def gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = gaussian_1d(size, sigma)
    return np.outer(g, g)


@lru_cache(maxsize=32)
def _band(n: int, dtype) -> np.ndarray:
    # (n - k + 1, n) matrix whose rows are the shifted 1-d window: valid correlation
    g = gaussian_1d()
    out = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(out.shape[0]):
        out[i, i:i + SSIM_WINDOW] = g
    return out.astype(dtype)


def _blur(t: Tensor) -> Tensor:
    """Valid 2-d Gaussian filtering as ``A_h @ t @ A_w.T`` (the window is separable)."""
    h, w = t.shape[-2:]
    rows = Tensor(_band(h, t.dtype))
    cols = Tensor(np.ascontiguousarray(_band(w, t.dtype).T))
    return ops.matmul(rows, ops.matmul(t, cols))


def ssim(x, y) -> Tensor:
    """Mean local SSIM over all valid 11x11 Gaussian windows (no padding)."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: {x.shape} vs {y.shape}")
    h, w = x.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValidationError(f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if y.dtype != x.dtype:
        y = _as_tensor(y, x.dtype)
    xp, yp = x, y
    mu_x, mu_y = _blur(xp), _blur(yp)
    exx, eyy, exy = _blur(xp * xp), _blur(yp * yp), _blur(xp * yp)
    mxx, myy, mxy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    num = (2.0 * mxy + SSIM_C1) * (2.0 * (exy - mxy) + SSIM_C2)
    den = (mxx + myy + SSIM_C1) * ((exx - mxx) + (eyy - myy) + SSIM_C2)
    return ops.mean(num / den)


@dataclass
class FusionLoss:
    total: Tensor
    terms: dict[str, Tensor]  # unweighted

    def breakdown(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


def fusion_loss(y_fuse, y_vi, y_ir, weights: LossWeights | None = None) -> FusionLoss:
    """Weighted sum of the five luminance terms; ``terms`` holds each unweighted value."""
    w = weights or LossWeights()
    f = _as_tensor(y_fuse)
    vi = _as_tensor(y_vi, f.dtype)
    ir = _as_tensor(y_ir, f.dtype)
    if not (f.shape == vi.shape == ir.shape):
        raise ShapeError(f"fusion_loss: fused {f.shape}, visible {vi.shape}, infrared {ir.shape}")

    gx_vi, gy_vi = (t.data for t in directional_gradients(vi))
    gx_ir, gy_ir = (t.data for t in directional_gradients(ir))
    gx_f, gy_f = directional_gradients(f)
    terms = {
        "ssim_vi": 1.0 - ssim(f, vi),
        "mse_vi": ops.mean(ops.square(f - vi)),
        "mse_ir": ops.mean(ops.square(f - ir)),
        "sobel_ir": ops.mean(ops.abs(sobel_magnitude(f) - Tensor(sobel_magnitude(ir).data))),
        "grad": ops.mean(ops.abs(gx_f - Tensor(np.maximum(gx_vi, gx_ir))))
        + ops.mean(ops.abs(gy_f - Tensor(np.maximum(gy_vi, gy_ir)))),
    }
    total = None
    for name, weight in w.term_weights().items():
        part = weight * terms[name]
        total = part if total is None else total + part
    return FusionLoss(total, terms)


def total_loss(l_seg, l_fuse, lambda_fuse: float = 1.0) -> Tensor:
    return _as_tensor(l_seg) + lambda_fuse * _as_tensor(l_fuse)
