"""Image I/O, filters and modality extractors."""
import math

import numpy as np
import pytest

from mmfusion import imaging
from mmfusion.errors import MalformedHeaderError, TruncatedPayloadError


def _write(path, data: bytes):
    path.write_bytes(data)
    return path


def _loop_correlate(img, kern):
    """Nested-loop zero-padded correlation used as an oracle."""
    h, w = img.shape
    r = kern.shape[0] // 2
    out = np.zeros_like(img, dtype=float)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for i in range(kern.shape[0]):
                for j in range(kern.shape[1]):
                    yy, xx = y + i - r, x + j - r
                    if 0 <= yy < h and 0 <= xx < w:
                        s += img[yy, xx] * kern[i, j]
            out[y, x] = s
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def test_load_p5_bytes(tmp_path):
    p = _write(tmp_path / "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = imaging.load_image(p)
    assert img.shape == (2, 2)
    np.testing.assert_array_equal(img.ravel(), [0.0, 1.0, 128 / 255, 64 / 255])


def test_load_p6_pixel(tmp_path):
    p = _write(tmp_path / "a.ppm", b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    img = imaging.load_image(p)
    assert img.shape == (1, 1, 3)
    np.testing.assert_array_equal(img[0, 0], [1.0, 0.0, 0.0])


def test_header_comment_is_skipped(tmp_path):
    p = _write(tmp_path / "c.pgm", b"P5\n# made by hand\n1 2\n255\n" + bytes([10, 20]))
    np.testing.assert_array_equal(imaging.load_image(p).ravel(), [10 / 255, 20 / 255])


def test_truncated_payload(tmp_path):
    p = _write(tmp_path / "t.pgm", b"P5\n4 4\n255\n" + bytes(8))
    with pytest.raises(TruncatedPayloadError):
        imaging.load_image(p)


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n\x00", b"P5\n1 x\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
def test_malformed_header(tmp_path, data):
    p = _write(tmp_path / "m.pgm", data)
    with pytest.raises(MalformedHeaderError):
        imaging.load_image(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        imaging.load_image(tmp_path / "nope.pgm")


def test_error_types_are_distinct():
    assert not issubclass(TruncatedPayloadError, MalformedHeaderError)
    assert not issubclass(MalformedHeaderError, TruncatedPayloadError)


@pytest.mark.parametrize("shape", [(5, 7), (4, 3, 3)])
def test_save_load_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=shape) / 255.0
    p = tmp_path / ("x.pgm" if len(shape) == 2 else "x.ppm")
    imaging.save_image(p, img)
    np.testing.assert_array_equal(imaging.load_image(p), img)


# ---------------------------------------------------------------------------
# Grayscale and convolution
# ---------------------------------------------------------------------------

def test_grayscale_white_and_red():
    img = np.array([[[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]])
    g = imaging.to_grayscale(img)
    assert g[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert g[0, 1] == pytest.approx(0.299, abs=1e-15)


def test_grayscale_identity_on_gray():
    g = np.random.default_rng(1).random((4, 5))
    np.testing.assert_array_equal(imaging.to_grayscale(g), g)


def test_convolve_identity_kernel():
    img = np.random.default_rng(2).random((6, 7))
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    np.testing.assert_array_equal(imaging.convolve2d(img, k), img)


def test_convolve_zero_sum_kernel_on_constant_interior():
    img = np.full((6, 6), 0.7)
    out = imaging.convolve2d(img, imaging.SOBEL_X)
    np.testing.assert_allclose(out[1:-1, 1:-1], 0.0, atol=1e-15)


def test_convolve_ones_center_is_nine():
    out = imaging.convolve2d(np.ones((3, 3)), np.ones((3, 3)))
    assert out[1, 1] == 9.0
    np.testing.assert_allclose(out, _loop_correlate(np.ones((3, 3)), np.ones((3, 3))))


def test_convolve_matches_loop_oracle():
    rng = np.random.default_rng(3)
    img, k = rng.normal(size=(7, 9)), rng.normal(size=(5, 5))
    np.testing.assert_allclose(imaging.convolve2d(img, k), _loop_correlate(img, k), atol=1e-12)


def test_convolve_even_kernel_rejected():
    with pytest.raises(ValueError):
        imaging.convolve2d(np.ones((4, 4)), np.ones((2, 2)))


def test_convolve_linearity():
    rng = np.random.default_rng(4)
    a, b, k = rng.normal(size=(8, 8)), rng.normal(size=(8, 8)), rng.normal(size=(3, 3))
    lhs = imaging.convolve2d(2.5 * a - 1.5 * b, k)
    rhs = 2.5 * imaging.convolve2d(a, k) - 1.5 * imaging.convolve2d(b, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------------------
# Edges
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", imaging.EDGE_METHODS)
def test_constant_image_has_no_edges(method):
    out = imaging.edge_detect(np.full((9, 9), 0.4), method)
    assert out.shape == (9, 9)
    assert not out.any()


def test_sobel_vertical_step_is_local():
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    out = imaging.edge_detect(img, "sobel")
    cols = np.flatnonzero(out.any(axis=0))
    np.testing.assert_array_equal(cols, [3, 4])


def test_prewitt_ramp_interior_constant():
    img = np.tile(np.arange(8) / 7.0, (8, 1))
    gx = _loop_correlate(img, imaging.PREWITT_X)
    gy = _loop_correlate(img, imaging.PREWITT_X.T)
    mag = np.hypot(gx, gy)[1:-1, 1:-1]
    assert np.ptp(mag) < 1e-12
    out = imaging.edge_detect(img, "prewitt")[1:-1, 1:-1]
    assert np.ptp(out) < 1e-12 and out[0, 0] > 0


def test_canny_binary_and_same_shape():
    rng = np.random.default_rng(5)
    img = np.zeros((20, 24))
    img[5:15, 6:18] = 1.0
    img += 0.05 * rng.random(img.shape)
    out = imaging.edge_detect(img, "canny")
    assert out.shape == img.shape
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert out.any()


def test_canny_thresholds_configurable():
    img = np.zeros((20, 20))
    img[5:15, 5:15] = 1.0
    img[8:12, 8:12] = 0.95
    loose = imaging.edge_detect(img, "canny", canny_low=0.01, canny_high=0.02)
    strict = imaging.edge_detect(img, "canny", canny_low=0.5, canny_high=0.9)
    assert loose.sum() >= strict.sum()


def test_unknown_edge_method():
    with pytest.raises(ValueError):
        imaging.edge_detect(np.ones((4, 4)), "laplace")


def test_sobel_magnitude_scaled_to_unit_max():
    img = np.zeros((10, 10))
    img[3:7, 3:7] = 1.0
    out = imaging.edge_detect(img, "sobel")
    assert out.max() == 1.0 and out.min() >= 0.0


# ---------------------------------------------------------------------------
# Scale space
# ---------------------------------------------------------------------------

def test_gaussian_constant_image():
    out = imaging.gaussian_scale(np.full((12, 12), 0.3), 3.0)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_gaussian_impulse_response():
    t = 3.0
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = imaging.gaussian_scale(img, t)
    sigma = math.sqrt(t)
    r = math.ceil(3 * sigma)
    ax = np.arange(-r, r + 1)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * t))
    g /= g.sum()
    np.testing.assert_allclose(out[10 - r:11 + r, 10 - r:11 + r], g, atol=1e-15)
    assert out[10, 10] == pytest.approx(g[r, r], abs=1e-15)


def test_gaussian_kernel_normalized():
    for sigma in (0.5, 1.0, math.sqrt(5)):
        k = imaging.gaussian_kernel(sigma)
        assert k.shape[0] == 2 * math.ceil(3 * sigma) + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)


def test_gaussian_preserves_mean_interior():
    rng = np.random.default_rng(6)
    img = np.zeros((40, 40))
    img[12:28, 12:28] = rng.random((16, 16))
    out = imaging.gaussian_scale(img, 5.0)
    assert abs(out.mean() - img.mean()) <= 1e-6


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_gaussian_rejects_nonpositive_scale(t):
    with pytest.raises(ValueError):
        imaging.gaussian_scale(np.ones((4, 4)), t)


# ---------------------------------------------------------------------------
# Optical flow
# ---------------------------------------------------------------------------

def test_flow_identical_frames_exact_zero():
    img = np.random.default_rng(7).random((16, 16))
    f = imaging.optical_flow(img, img)
    assert not f.u.any() and not f.v.any()


def test_flow_constant_frames_zero():
    f = imaging.optical_flow(np.full((8, 8), 0.2), np.full((8, 8), 0.9))
    assert not f.u.any() and not f.v.any()


def test_flow_right_shift_direction():
    rng = np.random.default_rng(8)
    base = imaging.gaussian_scale(rng.random((32, 32)), 1.0)
    nxt = imaging.shifted_frame(base, dy=0, dx=1)
    f = imaging.optical_flow(base, nxt)
    assert f.u.mean() > 0
    assert abs(f.v.mean()) < 0.2
    assert np.all(np.isfinite(f.u)) and np.all(np.isfinite(f.v))


def test_flow_shape_mismatch():
    with pytest.raises(ValueError):
        imaging.optical_flow(np.zeros((4, 4)), np.zeros((4, 5)))


def test_orientation_values():
    one = np.ones((2, 2))
    zero = np.zeros((2, 2))
    np.testing.assert_array_equal(imaging.flow_orientation(imaging.FlowField(one, zero)), 0.5)
    np.testing.assert_array_equal(imaging.flow_orientation(imaging.FlowField(zero, zero)), 0.0)
    np.testing.assert_allclose(imaging.flow_orientation(imaging.FlowField(zero, one)), 0.75, atol=1e-15)


def test_orientation_range():
    rng = np.random.default_rng(9)
    u = rng.normal(size=1000)
    v = rng.normal(size=1000)
    u[:4], v[:4] = -1.0, [0.0, -0.0, 1e-300, -1e-300]
    o = imaging.flow_orientation(imaging.FlowField(u, v))
    assert o.min() >= 0.0 and o.max() < 1.0


# ---------------------------------------------------------------------------
# Modalities
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", imaging.MODALITIES)
def test_modalities_shape_and_determinism(name):
    img = np.random.default_rng(10).random((16, 16))
    a = imaging.extract_modality(name, img)
    b = imaging.extract_modality(name, img)
    assert a.shape == img.shape
    np.testing.assert_array_equal(a, b)


def test_unknown_modality():
    with pytest.raises(ValueError):
        imaging.extract_modality("Z", np.zeros((4, 4)))
