import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from risfusion.errors import FormatError, ShapeError, ValidationError
from risfusion.imaging import (_bilinear_matrix, directional_gradients, overlay_mask, read_image, resize_bilinear,
                               rgb_to_ycbcr, sobel_magnitude, sobel_xy, to_luminance, write_image, ycbcr_to_rgb,
                               YCbCrImage)

unit = st.floats(0.0, 1.0, allow_nan=False)


def px(r, g, b):
    return np.array([r, g, b], dtype=np.float64).reshape(3, 1, 1)


def test_white_and_black_to_ycbcr():
    y, cb, cr = rgb_to_ycbcr(px(1, 1, 1))
    assert (y.item(), cb.item(), cr.item()) == pytest.approx((1.0, 0.5, 0.5), abs=1e-15)
    y, cb, cr = rgb_to_ycbcr(px(0, 0, 0))
    assert (y.item(), cb.item(), cr.item()) == (0.0, 0.5, 0.5)


def test_gray_axis_inverse():
    one = np.ones((1, 1, 1))
    np.testing.assert_allclose(ycbcr_to_rgb(YCbCrImage(one, one / 2, one / 2)).ravel(), [1, 1, 1], atol=1e-15)
    np.testing.assert_allclose(ycbcr_to_rgb(YCbCrImage(one / 2, one / 2, one / 2)).ravel(), [.5, .5, .5],
                               atol=1e-15)


def test_luma_weights():
    y = rgb_to_ycbcr(px(0.2, 0.4, 0.6)).y.item()
    assert y == pytest.approx(0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6, abs=1e-15)


def test_rgb_to_ycbcr_rejects_gray():
    with pytest.raises(ShapeError):
        rgb_to_ycbcr(np.zeros((1, 8, 8)))


def test_color_round_trip_1000_triples():
    rgb = np.random.default_rng(0).random((3, 1000, 1))
    back = ycbcr_to_rgb(rgb_to_ycbcr(rgb), clamp=False)
    assert np.abs(back - rgb).max() <= 1e-6


@given(arrays(np.float64, (3, 2, 3), elements=unit))
def test_ycbcr_planes_in_unit_range(rgb):
    for plane in rgb_to_ycbcr(rgb):
        assert plane.min() >= -1e-12 and plane.max() <= 1 + 1e-12


def test_three_channel_infrared_reduced_to_luma(caplog):
    img = np.random.default_rng(1).random((3, 8, 8))
    with caplog.at_level("WARNING"):
        out = to_luminance(img)
    assert out.shape == (1, 8, 8)
    assert "3 channels" in caplog.text


# -- resizing ----------------------------------------------------------------

def test_bilinear_weights_checkerboard_2_to_4():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    m = _bilinear_matrix(2, 4)
    expected = np.array([
        [0.00, 0.250, 0.750, 1.00],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.00, 0.750, 0.250, 0.00],
    ])
    np.testing.assert_array_equal(m @ board @ m.T, expected)


def test_resize_checkerboard_2_to_8():
    board = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    u = np.array([0, 0, 0.125, 0.375, 0.625, 0.875, 1, 1])
    expected = (1 - u)[:, None] * u[None, :] + u[:, None] * (1 - u)[None, :]
    np.testing.assert_allclose(resize_bilinear(board, 8, 8)[0], expected, rtol=0, atol=1e-15)


def test_resize_constant_and_identity():
    img = np.random.default_rng(2).random((3, 16, 12))
    np.testing.assert_array_equal(resize_bilinear(img, 16, 12), img)
    const = np.full((1, 9, 11), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 24, 8), 0.3, rtol=0, atol=1e-15)


def test_resize_rejects_tiny_target():
    with pytest.raises(ShapeError):
        resize_bilinear(np.zeros((1, 8, 8)), 4, 8)


# -- gradient operators --------------------------------------------------------

def test_sobel_constant_is_zero():
    np.testing.assert_array_equal(sobel_magnitude(np.full((1, 8, 8), 0.7)).data, 0.0)


def test_sobel_vertical_step_edge():
    y = np.zeros((1, 8, 8))
    y[..., 4:] = 1.0
    mag = sobel_magnitude(y).data[0]
    np.testing.assert_array_equal(mag[:, 3], 4.0)
    np.testing.assert_array_equal(mag[:, 4], 4.0)
    np.testing.assert_array_equal(mag[:, :3], 0.0)
    np.testing.assert_array_equal(mag[:, 5:], 0.0)
    gx, gy = sobel_xy(y)
    np.testing.assert_array_equal(gy.data, 0.0)


def test_sobel_matches_scipy_correlation():
    from scipy import ndimage

    from risfusion.imaging import SOBEL_X, SOBEL_Y

    y = np.random.default_rng(6).random((9, 11))
    gx, gy = sobel_xy(y)
    np.testing.assert_allclose(gx.data, ndimage.correlate(y, SOBEL_X, mode="mirror"), rtol=0, atol=1e-14)
    np.testing.assert_allclose(gy.data, ndimage.correlate(y, SOBEL_Y, mode="mirror"), rtol=0, atol=1e-14)


def test_sobel_horizontal_ramp():
    s = 0.125
    y = np.tile(np.arange(8) * s, (8, 1))[None]
    gx = sobel_xy(y)[0].data[0]
    np.testing.assert_array_equal(np.abs(gx[:, 1:-1]), 8 * s)


def test_directional_gradient_ramp():
    w = 8
    y = np.tile(np.arange(w) / w, (5, 1))[None]
    dx, dy = directional_gradients(y)
    np.testing.assert_allclose(dx.data[..., :-1], 1 / w, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(dx.data[..., -1], 0.0)
    np.testing.assert_array_equal(dy.data, 0.0)


def test_directional_gradients_match_loop():
    y = np.random.default_rng(3).random((1, 6, 7))
    dx, dy = directional_gradients(y)
    ex, ey = np.zeros_like(y), np.zeros_like(y)
    for i in range(6):
        for j in range(7):
            if j + 1 < 7:
                ex[0, i, j] = y[0, i, j + 1] - y[0, i, j]
            if i + 1 < 6:
                ey[0, i, j] = y[0, i + 1, j] - y[0, i, j]
    np.testing.assert_array_equal(dx.data, ex)
    np.testing.assert_array_equal(dy.data, ey)


@given(arrays(np.float64, (1, 10, 10), elements=unit), st.sampled_from([(0, 1), (1, 0)]))
def test_gradient_ops_translation_equivariant(y, shift):
    di, dj = shift
    moved = np.roll(y, (di, dj), axis=(1, 2))
    for op in (lambda t: sobel_magnitude(t).data, lambda t: directional_gradients(t)[0].data):
        a, b = op(y), op(moved)
        # compare pixels whose stencils stay inside the original content
        np.testing.assert_allclose(np.roll(a, (di, dj), axis=(1, 2))[:, 2:-2, 2:-2], b[:, 2:-2, 2:-2],
                                   rtol=0, atol=1e-12)
    assert sobel_magnitude(y).data.min() >= 0


# -- overlay -----------------------------------------------------------------

def test_overlay_cases():
    img = np.random.default_rng(4).random((3, 8, 8))
    ones = np.ones((8, 8), bool)
    np.testing.assert_array_equal(overlay_mask(img, ones, 0.0), img)
    red = overlay_mask(img, ones, 1.0)
    np.testing.assert_array_equal(red[0], 1.0)
    np.testing.assert_array_equal(red[1:], 0.0)
    half = overlay_mask(np.full((3, 8, 8), 0.4), ones, 0.5)
    np.testing.assert_allclose(half[:, 0, 0], [0.7, 0.2, 0.2], rtol=0, atol=1e-15)


def test_overlay_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        overlay_mask(np.zeros((3, 8, 8)), np.zeros((4, 4), bool))
    with pytest.raises(ValidationError):
        overlay_mask(np.zeros((3, 8, 8)), np.zeros((8, 8), bool), 1.5)


# -- file I/O ----------------------------------------------------------------

def test_p5_fixture(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 4 4 255\n" + bytes(range(0, 160, 10)))
    img = read_image(path)
    assert img.shape == (1, 4, 4)
    np.testing.assert_array_equal(img[0].ravel() * 255, np.arange(0, 160, 10))


def test_pnm_header_comment(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(read_image(path).ravel(), [1.0, 0.0, 0.2])


@pytest.mark.parametrize("ext,channels", [(".png", 3), (".png", 1), (".pgm", 1), (".ppm", 3)])
def test_write_read_quantisation_bound(tmp_path, ext, channels):
    img = np.random.default_rng(5).random((channels, 9, 8))
    write_image(img, tmp_path / f"x{ext}")
    back = read_image(tmp_path / f"x{ext}")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255
    write_image(back, tmp_path / f"y{ext}")
    np.testing.assert_array_equal(read_image(tmp_path / f"y{ext}"), back)


def test_text_file_is_format_error(tmp_path):
    path = tmp_path / "notes.txt"
    path.write_text("hello")
    with pytest.raises(FormatError):
        read_image(path)


def test_truncated_pgm(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5 4 4 255\n" + bytes(10))
    with pytest.raises(FormatError, match="truncated"):
        read_image(path)


def test_unsupported_extension(tmp_path):
    with pytest.raises(FormatError):
        write_image(np.zeros((1, 8, 8)), tmp_path / "x.bmp")
