"""Non-learned image math: color space, resizing, gradient operators, overlay, file I/O.

Images are float arrays shaped (C, H, W) with values in [0, 1]. The gradient
operators work on :class:`Tensor` planes shaped (..., H, W) so they can sit
inside the fusion loss.
"""
from __future__ import annotations

import io
import logging
import os
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ops
from .errors import FormatError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

# BT.601 full-range luma weights.
KR, KB = 0.299, 0.114
KG = 1.0 - KR - KB

MIN_SIDE = 8

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class YCbCrImage(NamedTuple):
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray


def check_image(img: np.ndarray, channels: tuple[int, ...] = (1, 3), name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in channels:
        raise ShapeError(f"{name}: expected (C,H,W) with C in {channels}, got {img.shape}")
    if min(img.shape[1:]) < MIN_SIDE:
        raise ShapeError(f"{name}: spatial size {img.shape[1:]} below {MIN_SIDE}")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(f"{name}: values must lie in [0, 1]")
    return img


def rgb_to_ycbcr(img: np.ndarray) -> YCbCrImage:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"rgb_to_ycbcr: expected 3 channels, got shape {img.shape}")
    r, g, b = img[0:1], img[1:2], img[2:3]
    y = KR * r + KG * g + KB * b
    cb = 0.5 + (b - y) / (2.0 * (1.0 - KB))
    cr = 0.5 + (r - y) / (2.0 * (1.0 - KR))
    return YCbCrImage(y, cb, cr)


def _inverse(y, cb, cr):
    r = y + 2.0 * (1.0 - KR) * (cr - 0.5)
    b = y + 2.0 * (1.0 - KB) * (cb - 0.5)
    g = (y - KR * r - KB * b) * (1.0 / KG)
    return r, g, b


def ycbcr_to_rgb(img: YCbCrImage, clamp: bool = True) -> np.ndarray:
    y, cb, cr = (np.asarray(p, dtype=np.float64) for p in img)
    if not (y.shape == cb.shape == cr.shape):
        raise ShapeError(f"ycbcr_to_rgb: plane shapes differ {y.shape}, {cb.shape}, {cr.shape}")
    out = np.concatenate(_inverse(y, cb, cr), axis=0)
    return np.clip(out, 0.0, 1.0) if clamp else out


def luma_to_rgb(y: Tensor, cb: np.ndarray, cr: np.ndarray) -> Tensor:
    """Differentiable RGB reconstruction from a luminance tensor (B,1,H,W) and fixed chroma."""
    cb_t = Tensor(np.asarray(cb, dtype=y.dtype))
    cr_t = Tensor(np.asarray(cr, dtype=y.dtype))
    r, g, b = _inverse(y, cb_t, cr_t)
    return ops.clip(ops.concat([r, g, b], axis=1), 0.0, 1.0)


def to_luminance(img: np.ndarray, name: str = "infrared") -> np.ndarray:
    """Single-plane view of an image; 3-channel inputs are reduced to BT.601 luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        return img
    if img.shape[0] == 3:
        logger.warning("%s input has 3 channels; using its luminance", name)
        return rgb_to_ycbcr(img).y
    raise ShapeError(f"{name}: expected 1 or 3 channels, got {img.shape[0]}")


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    img = np.asarray(img, dtype=np.float64)
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ShapeError(f"resize_bilinear: target {height}x{width} below {MIN_SIDE}")
    ry = _bilinear_matrix(img.shape[-2], height)
    rx = _bilinear_matrix(img.shape[-1], width)
    return ry @ img @ rx.T


def resize_nearest(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.minimum(((np.arange(height) + 0.5) * mask.shape[-2] / height).astype(int), mask.shape[-2] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * mask.shape[-1] / width).astype(int), mask.shape[-1] - 1)
    return mask[..., rows, :][..., cols]


def _as_planes(y) -> tuple[Tensor, tuple[int, ...]]:
    t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    shape = t.shape
    h, w = shape[-2:]
    return ops.reshape(t, (-1, 1, h, w)), shape


def sobel_xy(y) -> tuple[Tensor, Tensor]:
    """Raw Sobel responses (G_x, G_y) with reflect padding, same shape as ``y``.

    Evaluated separably, central difference first and [1, 2, 1] smoothing
    second, so constant regions give exactly zero.
    """
    planes, shape = _as_planes(y)
    p = ops.pad2d(planes, 1, mode="reflect")
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2.0 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2.0 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return ops.reshape(gx, shape), ops.reshape(gy, shape)


def sobel_magnitude(y) -> Tensor:
    """|G_x| + |G_y| of the standard 3x3 Sobel kernels."""
    gx, gy = sobel_xy(y)
    return ops.abs(gx) + ops.abs(gy)


def directional_gradients(y) -> tuple[Tensor, Tensor]:
    """Forward differences along x (columns) and y (rows); last column/row are zero."""
    t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    zcol = Tensor(np.zeros(t.shape[:-1] + (1,), dtype=t.dtype))
    zrow = Tensor(np.zeros(t.shape[:-2] + (1, t.shape[-1]), dtype=t.dtype))
    dx = ops.concat([t[..., 1:] - t[..., :-1], zcol], axis=-1)
    dy = ops.concat([t[..., 1:, :] - t[..., :-1, :], zrow], axis=-2)
    return dx, dy


def overlay_mask(img: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend masked pixels toward pure red with weight ``alpha``."""
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"overlay_mask: expected RGB (3,H,W), got {img.shape}")
    if mask.shape != img.shape[1:]:
        raise ShapeError(f"overlay_mask: mask {mask.shape} does not match image {img.shape[1:]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"overlay_mask: alpha {alpha} outside [0, 1]")
    red = np.array([1.0, 0.0, 0.0])[:, None, None]
    blended = (1.0 - alpha) * img + alpha * red
    return np.where(mask[None], blended, img)


# -- file I/O ----------------------------------------------------------------

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _parse_pnm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    channels = {b"P5": 1, b"P6": 3}[magic]
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed {magic.decode()} header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: malformed {magic.decode()} header")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported dimensions/maxval {width}x{height}/{maxval} (8-bit only)")
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG, PGM (P5) or PPM (P6) file into a (C,H,W) array in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] in (b"P5", b"P6"):
        return _parse_pnm(raw, path)
    if raw.startswith(_PNG_MAGIC):
        from PIL import Image

        try:
            with Image.open(io.BytesIO(raw)) as im:
                im.load()
                mode = im.mode
                if mode in ("1", "L", "P", "LA", "I;16", "I"):
                    im = im.convert("L") if mode != "P" else im.convert("RGB")
                elif mode != "RGB":
                    im = im.convert("RGB")
                arr = np.asarray(im)
        except (OSError, SyntaxError) as exc:
            raise FormatError(f"{path}: unreadable PNG ({exc})") from exc
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
    raise FormatError(f"{path}: unsupported image format (expected PNG, P5 or P6)")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    """Write (C,H,W) or (H,W) values in [0, 1]; format chosen by extension."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"write_image: expected (C,H,W) with C in (1,3), got {img.shape}")
    data = to_uint8(img).transpose(1, 2, 0)
    ext = os.path.splitext(str(path))[1].lower()
    c, h, w = img.shape
    if ext in (".pgm", ".ppm"):
        if (ext == ".pgm") != (c == 1):
            raise FormatError(f"{path}: {ext} cannot hold a {c}-channel image")
        header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header + data.tobytes())
    elif ext == ".png":
        from PIL import Image

        Image.fromarray(data[:, :, 0] if c == 1 else data).save(path)
    else:
        raise FormatError(f"{path}: unsupported extension {ext!r} (use .png, .pgm or .ppm)")
