"""Differentiable ops.

Each function computes the forward value with numpy and registers a closure
mapping the output gradient to one gradient per parent.
"""
from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = _coerce(a, b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data

    def backward(g):
        ga = unbroadcast(np.where(pick_a, g, 0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(pick_a, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary -----------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    """Logistic function kept strictly inside (0, 1) even where it rounds to 0 or 1."""
    info = np.finfo(x.dtype)
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * x.data)), info.tiny, 1.0 - info.epsneg)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                     lambda g: (g * mask,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (x,), backward, "getitem")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


# -- spatial ops (NCHW) ----------------------------------------------------

def _rows(xh: np.ndarray, k: int, stride: int) -> np.ndarray:
    """im2col on channels-last input (B,H,W,C) -> (B*Ho*Wo, k*k*C)."""
    if k == 1 and stride == 1:
        return xh.reshape(-1, xh.shape[-1])
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # B,Ho,Wo,C,k,k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * xh.shape[-1])


def _correlate_nhwc(xh: np.ndarray, wr: np.ndarray, k: int, stride: int) -> np.ndarray:
    b, hp, wp, _ = xh.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    return (_rows(xh, k, stride) @ wr).reshape(b, ho, wo, wr.shape[1])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,k,k), zero padding.

    The kernels come from :mod:`torch` when it is installed and from the numpy
    reference otherwise (see :func:`set_conv_backend`); the tape is ours either way.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, wc, k, k2 = weight.shape
    if wc != cin or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: input {x.shape} with padding {padding} smaller than kernel {k}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d: input dtype {x.dtype} differs from weight dtype {weight.dtype}")
    kernels = _torch_conv if _conv_backend == "torch" else _numpy_conv
    out, grads = kernels(x.data, weight.data, None if bias is None else bias.data, stride, padding)

    def backward(g):
        need = (x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad)
        gx, gw, gb = grads(g, need)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def _numpy_conv(x, weight, bias, stride, padding):
    # Channels-last so every product is one row-major GEMM. The input gradient is
    # the full correlation of the (stride-dilated) output gradient with the
    # spatially flipped, channel-transposed kernel.
    bsz, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xh = _pad_nhwc(x.transpose(0, 2, 3, 1), padding, padding, padding, padding)
    cols = _rows(xh, k, stride)
    out = cols @ weight.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def grads(g, need):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = gb = None
        if need[1]:
            gw = np.ascontiguousarray((cols.T @ gr).reshape(k, k, cin, cout).transpose(3, 2, 0, 1))
        if need[2]:
            gb = gr.sum(axis=0)
        if need[0]:
            gh = gr.reshape(bsz, ho, wo, cout)
            if stride > 1:
                dil = np.zeros((bsz, (ho - 1) * stride + 1, (wo - 1) * stride + 1, cout), dtype=g.dtype)
                dil[:, ::stride, ::stride] = gh
                gh = dil
            extra_h = hp - (gh.shape[1] + k - 1)
            extra_w = wp - (gh.shape[2] + k - 1)
            gh = _pad_nhwc(gh, k - 1, k - 1 + extra_h, k - 1, k - 1 + extra_w)
            wflip = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
            gxp = _correlate_nhwc(gh, wflip, k, 1)
            gx = np.ascontiguousarray(gxp[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return out, grads


def _pad_nhwc(a, top, bottom, left, right):
    if not (top or bottom or left or right):
        return np.ascontiguousarray(a)
    b, h, w, c = a.shape
    out = np.zeros((b, h + top + bottom, w + left + right, c), dtype=a.dtype)
    out[:, top:top + h, left:left + w] = a
    return out


def _torch_conv(x, weight, bias, stride, padding):
    xt = _torch.from_numpy(np.ascontiguousarray(x))
    wt = _torch.from_numpy(np.ascontiguousarray(weight))
    bt = None if bias is None else _torch.from_numpy(np.ascontiguousarray(bias))
    with _torch.no_grad():
        out = _torch.nn.functional.conv2d(xt, wt, bt, stride=stride, padding=padding).numpy()

    def grads(g, need):
        gt = _torch.from_numpy(np.ascontiguousarray(g))
        res = _torch.ops.aten.convolution_backward(
            gt, xt, wt, [wt.shape[0]], [stride, stride], [padding, padding], [1, 1],
            False, [0, 0], 1, list(need))
        return tuple(None if r is None or not n else r.numpy() for r, n in zip(res, need))

    return out, grads


try:
    import torch as _torch
except ImportError:  # pragma: no cover - depends on the environment
    _torch = None

_conv_backend = "torch" if _torch is not None else "numpy"


def set_conv_backend(name: str) -> str:
    """Select ``"numpy"`` or ``"torch"`` conv kernels; returns the previous choice."""
    global _conv_backend
    if name not in ("numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and _torch is None:
        raise ImportError("torch conv backend requested but torch is not installed")
    prev, _conv_backend = _conv_backend, name
    return prev


def get_conv_backend() -> str:
    return _conv_backend


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    b, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: spatial shape {x.shape[2:]} not divisible by {kernel}")
    out = x.data.reshape(b, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (g / (kernel * kernel),)

    return make_node(out, (x,), backward, "avg_pool2d")


def upsample_nearest2d(x: Tensor, scale: int = 2, size: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor, cropped to ``size`` if given."""
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)
    th, tw = size if size is not None else (h * scale, w * scale)
    if th > h * scale or tw > w * scale:
        raise ShapeError(f"upsample_nearest2d: target {size} exceeds {scale}x of {x.shape}")
    out = out[:, :, :th, :tw]

    def backward(g):
        full = np.zeros((b, c, h * scale, w * scale), dtype=g.dtype)
        full[:, :, :th, :tw] = g
        return (full.reshape(b, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "upsample_nearest2d")


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Pad the last two axes by ``pad`` on every side (``reflect`` or ``zeros``)."""
    h, w = x.shape[-2:]
    if mode == "zeros":
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        out = np.pad(x.data, width)
        return make_node(out, (x,), lambda g: (g[..., pad:pad + h, pad:pad + w],), "pad2d")
    if mode != "reflect":
        raise ValueError(f"pad2d: unknown mode {mode!r}")
    if pad >= h or pad >= w:
        raise ShapeError(f"pad2d: reflect pad {pad} too large for shape {x.shape}")
    ri = np.pad(np.arange(h), pad, mode="reflect")
    ci = np.pad(np.arange(w), pad, mode="reflect")
    out = x.data[..., ri, :][..., ci]

    def backward(g):
        gr = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(gr, (..., ri, slice(None)), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (..., ci), gr)
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "pad2d")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts = []
    start = 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + n)
        parts.append(getitem(x, tuple(index)))
        start += n
    return parts
