import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from risfusion.autodiff import Tensor
from risfusion.checks import check_losses
from risfusion.errors import ShapeError, ValidationError
from risfusion.losses import LossWeights, dice_loss, fusion_loss, ssim, total_loss

unit = st.floats(0.0, 1.0, allow_nan=False)


# -- independent scalar-loop oracle for the five-term fusion loss -------------------

def _gauss(size=11, sigma=1.5):
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    return [v / s for v in g]


def loop_ssim(x, y):
    g = _gauss()
    h, w = len(x), len(x[0])
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    total, count = 0.0, 0
    for i in range(h - 10):
        for j in range(w - 10):
            mx = my = sxx = syy = sxy = 0.0
            for a in range(11):
                for b in range(11):
                    wt = g[a] * g[b]
                    u, v = x[i + a][j + b], y[i + a][j + b]
                    mx += wt * u
                    my += wt * v
                    sxx += wt * u * u
                    syy += wt * v * v
                    sxy += wt * u * v
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            count += 1
    return total / count


def _reflect(i, n):
    return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)


def loop_sobel(y):
    h, w = len(y), len(y[0])
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    v = y[_reflect(i + a - 1, h)][_reflect(j + b - 1, w)]
                    gx += kx[a][b] * v
                    gy += kx[b][a] * v
            out[i][j] = abs(gx) + abs(gy)
    return out


def loop_forward_diff(y):
    h, w = len(y), len(y[0])
    dx = [[(y[i][j + 1] - y[i][j]) if j + 1 < w else 0.0 for j in range(w)] for i in range(h)]
    dy = [[(y[i + 1][j] - y[i][j]) if i + 1 < h else 0.0 for j in range(w)] for i in range(h)]
    return dx, dy


def loop_fusion_loss(f, vi, ir, w=(0.5, 0.5, 2.0, 1.0, 1.0)):
    h, wd = len(f), len(f[0])
    n = h * wd
    mse_vi = sum((f[i][j] - vi[i][j]) ** 2 for i in range(h) for j in range(wd)) / n
    mse_ir = sum((f[i][j] - ir[i][j]) ** 2 for i in range(h) for j in range(wd)) / n
    sf, si = loop_sobel(f), loop_sobel(ir)
    sobel = sum(abs(sf[i][j] - si[i][j]) for i in range(h) for j in range(wd)) / n
    (fx, fy), (vx, vy), (ix, iy) = loop_forward_diff(f), loop_forward_diff(vi), loop_forward_diff(ir)
    grad = (sum(abs(fx[i][j] - max(vx[i][j], ix[i][j])) for i in range(h) for j in range(wd))
            + sum(abs(fy[i][j] - max(vy[i][j], iy[i][j])) for i in range(h) for j in range(wd))) / n
    terms = [1.0 - loop_ssim(f, vi), mse_vi, mse_ir, sobel, grad]
    return sum(a * b for a, b in zip(w, terms)), terms


def test_fusion_loss_matches_loop_oracle():
    g = np.random.default_rng(0)
    f, vi, ir = (g.random((1, 16, 14)) for _ in range(3))
    expected, terms = loop_fusion_loss(f[0].tolist(), vi[0].tolist(), ir[0].tolist())
    out = fusion_loss(f, vi, ir)
    assert abs(out.total.item() - expected) <= 1e-6
    for name, value in zip(("ssim_vi", "mse_vi", "mse_ir", "sobel_ir", "grad"), terms):
        assert abs(out.terms[name].item() - value) <= 1e-6, name


def test_ssim_matches_loop_and_skimage():
    from skimage.metrics import structural_similarity

    g = np.random.default_rng(1)
    x, y = g.random((13, 17)), g.random((13, 17))
    ours = ssim(x[None], y[None]).item()
    assert abs(ours - loop_ssim(x.tolist(), y.tolist())) <= 1e-12
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    assert abs(ours - ref) <= 1e-12


# -- Dice -------------------------------------------------------------------------

def test_dice_perfect_prediction_is_zero():
    g = np.zeros((1, 4, 4))
    g[0, 1:3, 1:3] = 1
    for eps in (1.0, 0.5, 1e-3):
        assert dice_loss(g, g, eps).item() == 0.0


def test_dice_empty_prediction():
    g = np.zeros((1, 4, 4))
    g[0, 0, :] = 1
    assert dice_loss(np.zeros((1, 4, 4)), g, 1.0).item() == 0.8


def test_dice_half_probability_fixture():
    g = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    assert dice_loss(np.full((1, 2, 2), 0.5), g, 1.0).item() == 0.5


def test_dice_rejects_non_binary_target():
    with pytest.raises(ValidationError):
        dice_loss(np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5))


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_dual_class_dice_averages_complement():
    p = np.array([[[0.9, 0.2], [0.1, 0.4]]])
    g = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    fg = dice_loss(p, g).item()
    bg = dice_loss(1 - p, 1 - g).item()
    assert dice_loss(p, g, dual_class=True).item() == pytest.approx((fg + bg) / 2, abs=1e-15)


@given(arrays(np.float64, (1, 3, 3), elements=unit), arrays(np.bool_, (1, 3, 3)),
       st.floats(0.01, 5.0))
def test_dice_range(p, g, eps):
    loss = dice_loss(p, g.astype(float), eps).item()
    assert 0.0 <= loss < 1.0
    if loss == 0.0:
        np.testing.assert_allclose(p, g, atol=1e-12)


# -- SSIM and fusion loss properties ------------------------------------------------

def test_ssim_identity_and_symmetry():
    g = np.random.default_rng(2)
    x, y = g.random((1, 12, 12)), g.random((1, 12, 12))
    assert abs(ssim(x, x).item() - 1.0) <= 1e-9
    assert abs(ssim(x, y).item() - ssim(y, x).item()) <= 1e-9


def test_ssim_inverted_checkerboard_is_low():
    board = np.kron(np.indices((8, 8)).sum(0) % 2, np.ones((4, 4)))[None].astype(float)
    assert ssim(board, 1 - board).item() < 0.1


def test_ssim_rejects_small_images():
    with pytest.raises(ValidationError):
        ssim(np.zeros((1, 10, 12)), np.zeros((1, 10, 12)))


def test_fusion_loss_vanishes_on_equal_inputs():
    y = np.random.default_rng(3).random((1, 12, 12))
    out = fusion_loss(y, y, y)
    assert out.total.item() == 0.0


def test_fusion_loss_constant_planes():
    c1, c2 = 0.75, 0.25
    a, b = np.full((1, 12, 12), c1), np.full((1, 12, 12), c2)
    out = fusion_loss(a, a, b)
    assert out.total.item() == pytest.approx(2.0 * (c1 - c2) ** 2, abs=1e-15)
    assert out.terms["sobel_ir"].item() == 0.0 and out.terms["grad"].item() == 0.0


def test_grad_term_zero_when_matching_max_gradients():
    # the fused ramp has the visible slope, which exceeds the infrared one everywhere
    x = np.arange(12) / 16.0
    vi = np.tile(x, (12, 1))[None]
    ir = np.tile(x / 2, (12, 1))[None]
    fused = vi + 0.125
    assert fusion_loss(fused, vi, ir).terms["grad"].item() == pytest.approx(0.0, abs=1e-15)


def test_fusion_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        fusion_loss(np.zeros((1, 12, 12)), np.zeros((1, 12, 12)), np.zeros((1, 12, 13)))


@given(arrays(np.float64, (3, 1, 12, 12), elements=unit))
def test_fusion_loss_non_negative(planes):
    out = fusion_loss(planes[0], planes[1], planes[2])
    assert out.total.item() >= 0.0
    for v in out.terms.values():
        assert v.item() >= -1e-12


def test_total_loss():
    assert total_loss(1.0, 2.0, 0.5).item() == 2.0
    assert total_loss(1.25, 7.0, 0.0).item() == 1.25
    a, b = Tensor(0.3, requires_grad=True), Tensor(0.9, requires_grad=True)
    total_loss(a, b, 0.25).backward()
    assert (a.grad, b.grad) == (1.0, 0.25)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert w.term_weights() == {"ssim_vi": 0.5, "mse_vi": 0.5, "mse_ir": 2.0, "sobel_ir": 1.0, "grad": 1.0}
    assert (w.lambda_fuse, w.epsilon_dice, w.lambda_film) == (1.0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        LossWeights(mse_ir=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(epsilon_dice=0.0)
    with pytest.raises(ValidationError):
        LossWeights(grad=float("nan"))


def test_loss_suite_gradcheck():
    report = check_losses(seed=5)
    assert report.passed, report.failures()
