"""Finite-difference gradient suites behind the ``gradcheck`` command.

Every suite runs in float64 on small random inputs. Inputs to kinked ops
(relu, abs, maximum) are kept at least 0.05 away from their kinks so central
differences with step 1e-4 never straddle one. Images fed to the loss suite
sit on the exactly representable grid k/256: every signed sum of pixel values
is then either exactly 0 (where the symmetric difference of abs agrees with
the analytic sign(0) = 0) or at least 1/256 in size, far beyond the step. Models get random nonzero biases;
zero biases behind dead relu channels put pre-activations exactly on the
kink.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import GradcheckReport, Tensor, gradcheck, ops
from .fusion import LangGatedFusion, TextBatch
from .imaging import directional_gradients, sobel_magnitude
from .losses import dice_loss, fusion_loss, ssim, total_loss
from .model import ModelConfig, RISFusionModel
from .rng import SplitMix64, fnv1a64
from .text import toy_embed

MODULES = ("all", "ops", "lga", "losses", "pipeline")
TOLERANCE = 1e-4


def _away_from_zero(rng: SplitMix64, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _image(rng: SplitMix64, size) -> np.ndarray:
    return np.floor(rng.uniform(0.0, 1.0, size=size) * 256.0) / 256.0


def _randomize(module, rng: SplitMix64) -> None:
    """Redraw zero-initialised tensors (biases, FiLM weights) uniformly in +-[0.05, 0.5]."""
    for name, p in module.named_parameters():
        if not p.data.any():
            mag = rng.spawn(fnv1a64(name.encode())).uniform(0.05, 0.5, size=p.shape)
            sign = np.where(rng.spawn(fnv1a64(name.encode()) + 1).random(p.shape) < 0.5, -1.0, 1.0)
            p.data[...] = mag * sign


def op_cases(rng: SplitMix64) -> dict[str, tuple[Callable[[dict], Tensor], dict[str, Tensor]]]:
    """name -> (graph over the leaves, leaves) for every differentiable op."""
    u = lambda *s: _leaf(rng.uniform(-1.0, 1.0, size=s))  # noqa: E731
    pos = lambda *s: _leaf(rng.uniform(0.5, 2.0, size=s))  # noqa: E731
    kinked = lambda *s: _leaf(_away_from_zero(rng, s))  # noqa: E731
    a4, b4 = u(2, 3, 4, 4), u(2, 3, 4, 4)
    gap = _away_from_zero(rng, (3, 4), 0.1)
    ma = u(3, 4)
    mb = _leaf(ma.data + gap)
    cases = {
        "add": (lambda t: t["a"] + t["b"], {"a": u(3, 4), "b": u(4)}),
        "sub": (lambda t: t["a"] - t["b"], {"a": u(3, 4), "b": u(3, 1)}),
        "mul": (lambda t: t["a"] * t["b"], {"a": u(3, 4), "b": u(1, 4)}),
        "div": (lambda t: t["a"] / t["b"], {"a": u(3, 4), "b": pos(3, 4)}),
        "matmul": (lambda t: ops.matmul(t["a"], t["b"]), {"a": u(2, 3, 4), "b": u(4, 5)}),
        "conv2d": (lambda t: ops.conv2d(t["x"], t["w"], t["b"], 1, 1), {"x": u(2, 3, 5, 5), "w": u(4, 3, 3, 3), "b": u(4)}),
        "conv2d_stride2": (lambda t: ops.conv2d(t["x"], t["w"], None, 2, 1), {"x": u(1, 2, 6, 6), "w": u(3, 2, 3, 3)}),
        "transpose_reshape": (lambda t: ops.reshape(ops.transpose(t["a"], (0, 2, 1)), (2, 12)), {"a": u(2, 3, 4)}),
        "concat": (lambda t: ops.concat([t["a"], t["b"]], axis=1), {"a": u(2, 3, 4), "b": u(2, 2, 4)}),
        "split": (lambda t: ops.split(t["a"], [1, 2], axis=1)[1] * 2.0, {"a": u(2, 3, 4)}),
        "getitem": (lambda t: t["a"][:, 1:3], {"a": u(3, 4)}),
        "softmax": (lambda t: ops.softmax(t["a"], axis=-1), {"a": u(3, 5)}),
        "sigmoid": (lambda t: ops.sigmoid(t["a"]), {"a": u(3, 4)}),
        "relu": (lambda t: ops.relu(t["a"]), {"a": kinked(3, 4)}),
        "elementwise_max": (lambda t: ops.maximum(t["a"], t["b"]), {"a": ma, "b": mb}),
        "mean": (lambda t: ops.mean(t["a"], axis=1, keepdims=True), {"a": u(3, 4)}),
        "sum": (lambda t: ops.sum(t["a"], axis=0), {"a": u(3, 4)}),
        "abs": (lambda t: ops.abs(t["a"]), {"a": kinked(3, 4)}),
        "square": (lambda t: ops.square(t["a"]), {"a": u(3, 4)}),
        "sqrt": (lambda t: ops.sqrt(t["a"]), {"a": pos(3, 4)}),
        "exp": (lambda t: ops.exp(t["a"]), {"a": u(3, 4)}),
        "avg_pool2d": (lambda t: ops.avg_pool2d(t["a"], 2), {"a": u(2, 2, 4, 4)}),
        "nearest_upsample2d": (lambda t: ops.upsample_nearest2d(t["a"], 2), {"a": u(2, 2, 3, 3)}),
        "pad2d_reflect": (lambda t: ops.pad2d(t["a"], 1, mode="reflect"), {"a": u(1, 2, 4, 4)}),
        "broadcast_chain": (lambda t: ops.sigmoid(t["a"] * t["b"] + t["a"]), {"a": a4, "b": b4}),
    }
    return cases


def check_ops(seed: int = 0, repeats: int = 1) -> GradcheckReport:
    report = GradcheckReport(TOLERANCE)
    for r in range(repeats):
        rng = SplitMix64(seed).spawn(r)
        for name, (graph, leaves) in op_cases(rng).items():
            weights_rng = rng.spawn(fnv1a64(name.encode()))
            w = None

            # a random linear functional, so every output entry has its own weight
            def fn(graph=graph, leaves=leaves):
                nonlocal w
                out = graph(leaves)
                if w is None:
                    w = Tensor(weights_rng.uniform(-1.0, 1.0, size=out.shape))
                return ops.sum(out * w)

            sub = gradcheck(fn, leaves, TOLERANCE)
            report.merge(sub, prefix=f"{name}[{r}]." if repeats > 1 else f"{name}.")
    return report


def check_lga(seed: int = 0) -> GradcheckReport:
    """LangGatedFusion block (attention, gate, FiLM, fusion rule) at random init.

    The FiLM conv is zero at the standard init; it is re-drawn here so the
    gamma/beta paths carry gradient too.
    """
    rng = SplitMix64(seed)
    block = LangGatedFusion(3, 4, film_lambda=0.1, rng=rng.spawn(1))
    _randomize(block, rng.spawn(2))
    f_vi = _leaf(rng.spawn(3).uniform(-1, 1, size=(2, 3, 4, 4)))
    f_ir = _leaf(rng.spawn(4).uniform(-1, 1, size=(2, 3, 4, 4)))
    tokens = np.zeros((2, 3, 4))
    tokens[0] = rng.spawn(5).uniform(-1, 1, size=(3, 4))
    tokens[1, :2] = rng.spawn(6).uniform(-1, 1, size=(2, 4))
    text = TextBatch(_leaf(tokens), np.array([[True, True, True], [True, True, False]]))
    w = Tensor(rng.spawn(7).uniform(-1, 1, size=(2, 3, 4, 4)))
    params = dict(block.named_parameters())
    params.update({"f_vi": f_vi, "f_ir": f_ir, "text": text.tokens})
    return gradcheck(lambda: ops.sum(block(f_vi, f_ir, text).fused * w), params, TOLERANCE)


def check_losses(seed: int = 0) -> GradcheckReport:
    rng = SplitMix64(seed)
    size = (2, 1, 16, 16)
    y_fuse = _leaf(_image(rng, size))
    y_vi = _image(rng.spawn(1), size)
    y_ir = _image(rng.spawn(2), size)
    prob = _leaf(rng.spawn(3).uniform(0.05, 0.95, size=size))
    mask = rng.spawn(4).random(size) > 0.6
    report = GradcheckReport(TOLERANCE)
    report.merge(gradcheck(lambda: dice_loss(prob, mask), {"P": prob}, TOLERANCE), "dice.")
    report.merge(gradcheck(lambda: dice_loss(prob, mask, dual_class=True), {"P": prob}, TOLERANCE), "dice_dual.")
    report.merge(gradcheck(lambda: ssim(y_fuse, y_vi), {"x": y_fuse}, TOLERANCE), "ssim.")
    report.merge(gradcheck(lambda: _weighted_sobel(y_fuse, rng.spawn(5)), {"y": y_fuse}, TOLERANCE), "sobel.")
    report.merge(gradcheck(lambda: fusion_loss(y_fuse, y_vi, y_ir).total, {"Y_fuse": y_fuse}, TOLERANCE), "fusion.")
    a, b = _leaf(np.array(0.7)), _leaf(np.array(1.3))
    report.merge(gradcheck(lambda: total_loss(a, b, 0.5), {"L_seg": a, "L_fuse": b}, TOLERANCE), "total.")
    return report


def _weighted_sobel(y: Tensor, rng: SplitMix64) -> Tensor:
    dx, dy = directional_gradients(y)
    mag = sobel_magnitude(y)
    w = rng.uniform(-1, 1, size=y.shape)
    return ops.sum(mag * Tensor(w)) + ops.sum(dx * dx) + ops.sum(dy * Tensor(w))


def check_pipeline(seed: int = 0, max_entries: int = 3) -> GradcheckReport:
    """L_total of a tiny fusion -> segmentation model on 16x16 inputs, every parameter block."""
    rng = SplitMix64(seed)
    config = ModelConfig((2, 3, 3, 4), (2, 3, 3), text_dim=4, film_lambda=0.1, seed=seed)
    model = RISFusionModel(config, dtype=np.float64)
    _randomize(model, rng.spawn(99))
    vis = rng.spawn(1).uniform(0, 1, size=(2, 3, 16, 16))
    ir = rng.spawn(2).uniform(0, 1, size=(2, 1, 16, 16))
    mask = rng.spawn(3).random((2, 1, 16, 16)) > 0.7
    embs = [toy_embed("hot blob upper left", 4), toy_embed("warm car right", 4)]

    def fn():
        pred = model(vis, ir, embs)
        l_seg = dice_loss(pred.mask.prob, mask)
        l_fuse = fusion_loss(pred.fused.y_fuse, pred.fused.y_vi, pred.fused.y_ir).total
        return total_loss(l_seg, l_fuse, 1.0)

    return gradcheck(fn, dict(model.named_parameters()), TOLERANCE, max_entries=max_entries, seed=seed)


def run(module: str = "all", seed: int = 0) -> GradcheckReport:
    if module not in MODULES:
        raise ValueError(f"unknown gradcheck module {module!r}; choose from {MODULES}")
    suites = {"ops": check_ops, "lga": check_lga, "losses": check_losses, "pipeline": check_pipeline}
    report = GradcheckReport(TOLERANCE)
    for name, suite in suites.items():
        if module in ("all", name):
            report.merge(suite(seed=seed), prefix=f"{name}/")
    return report
