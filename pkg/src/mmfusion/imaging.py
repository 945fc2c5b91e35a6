"""Image I/O and the modality extractors feeding the backbone columns.

Images are float64 numpy arrays with values in [0, 1], shaped ``(H, W)`` for
grayscale or ``(H, W, 3)`` for RGB.
"""
from __future__ import annotations

import math
import os
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import MalformedHeaderError, TruncatedPayloadError

LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
PREWITT_X = np.array([[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]])

CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2
HS_ALPHA2 = 100.0
HS_ITERS = 100

EDGE_METHODS = ("canny", "sobel", "prewitt")


class FlowField(NamedTuple):
    u: np.ndarray
    v: np.ndarray


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def _read_header(data: bytes) -> tuple[list[bytes], int]:
    """Return the four header tokens and the offset of the first payload byte."""
    tokens: list[bytes] = []
    i, n = 0, len(data)
    while len(tokens) < 4:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise MalformedHeaderError("header ended early")
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        tokens.append(data[start:i])
    # exactly one whitespace byte separates header and raster
    if i >= n:
        return tokens, n
    if not data[i:i + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    return tokens, i + 1


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_header(data)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field in {path}") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeaderError(f"maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3)


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write ``img`` as P5 (2-D) or P6 (H x W x 3), quantizing to 8 bits."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot save image of shape {img.shape}")
    raw = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(raw.tobytes())


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def _check_kernel(kern: np.ndarray) -> np.ndarray:
    kern = np.asarray(kern, dtype=np.float64)
    if kern.ndim != 2 or kern.shape[0] != kern.shape[1]:
        raise ValueError(f"kernel must be square, got {kern.shape}")
    if kern.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kern.shape[0]}")
    return kern


def _correlate(img: np.ndarray, kern: np.ndarray, pad_mode: str) -> np.ndarray:
    r = kern.shape[0] // 2
    padded = np.pad(img, r, mode=pad_mode)
    windows = sliding_window_view(padded, kern.shape)
    return np.einsum("ijkl,kl->ij", windows, kern)


def convolve2d(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Same-size filtering with zero padding.

    ``out[y, x] = sum_ij img[y + i - r, x + j - r] * kern[i, j]`` (the kernel
    is not flipped).
    """
    kern = _check_kernel(kern)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("convolve2d expects a single-channel image")
    return _correlate(img, kern, "constant")


def _filter(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    # Feature filters replicate the border so the frame itself is not an edge.
    return _correlate(img, kern, "edge")


def _gradients(gray: np.ndarray, kx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _filter(gray, kx), _filter(gray, kx.T)


def _scaled_magnitude(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros_like(mag)
    return mag / peak


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _non_max_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    p = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    c = p[1:-1, 1:-1]

    def shifted(dy: int, dx: int) -> np.ndarray:
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    horiz = (angle < 22.5) | (angle >= 157.5)
    diag = (angle >= 22.5) & (angle < 67.5)
    vert = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)
    keep = np.zeros_like(mag, dtype=bool)
    keep |= horiz & (c >= shifted(0, -1)) & (c >= shifted(0, 1))
    keep |= diag & (c >= shifted(-1, -1)) & (c >= shifted(1, 1))
    keep |= vert & (c >= shifted(-1, 0)) & (c >= shifted(1, 0))
    keep |= anti & (c >= shifted(-1, 1)) & (c >= shifted(1, -1))
    return np.where(keep, mag, 0.0)


def canny(gray: np.ndarray, low: float = CANNY_LOW, high: float = CANNY_HIGH,
          sigma: float = CANNY_SIGMA) -> np.ndarray:
    """Binary Canny edge map; thresholds are fractions of the peak gradient."""
    if not 0.0 <= low <= high:
        raise ValueError("canny thresholds must satisfy 0 <= low <= high")
    smooth = _filter(gray, gaussian_kernel(sigma))
    gx, gy = _gradients(smooth, SOBEL_X)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros_like(gray)
    thin = _non_max_suppress(mag, gx, gy)
    strong = thin >= high * peak
    weak = thin >= low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(gray)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels].astype(np.float64)


def edge_detect(img: np.ndarray, method: str, canny_low: float = CANNY_LOW,
                canny_high: float = CANNY_HIGH) -> np.ndarray:
    gray = to_grayscale(img)
    if method == "sobel":
        return _scaled_magnitude(*_gradients(gray, SOBEL_X))
    if method == "prewitt":
        return _scaled_magnitude(*_gradients(gray, PREWITT_X))
    if method == "canny":
        return canny(gray, canny_low, canny_high)
    raise ValueError(f"unknown edge method {method!r}; expected one of {EDGE_METHODS}")


def gaussian_scale(img: np.ndarray, t: float) -> np.ndarray:
    """Blur with a normalized Gaussian of variance ``t``."""
    if not t > 0:
        raise ValueError(f"scale t must be positive, got {t}")
    kern = gaussian_kernel(math.sqrt(t))
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return _filter(img, kern)
    return np.stack([_filter(img[..., c], kern) for c in range(img.shape[2])], axis=-1)


# ---------------------------------------------------------------------------
# Optical flow
# ---------------------------------------------------------------------------

_HS_AVG = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


def optical_flow(prev: np.ndarray, nxt: np.ndarray, alpha2: float = HS_ALPHA2,
                 iters: int = HS_ITERS) -> FlowField:
    """Horn-Schunck dense flow with Jacobi iterations."""
    prev = to_grayscale(prev)
    nxt = to_grayscale(nxt)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if alpha2 <= 0 or iters < 1:
        raise ValueError("alpha2 must be positive and iters >= 1")
    # derivatives averaged over the 2x2x2 cube spanning both frames
    kx = np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, -1.0, 1.0]]) * 0.25
    ky = kx.T
    kt = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]) * 0.25
    ix = _filter(prev, kx) + _filter(nxt, kx)
    iy = _filter(prev, ky) + _filter(nxt, ky)
    it = _filter(nxt, kt) - _filter(prev, kt)
    denom = alpha2 + ix * ix + iy * iy
    u = np.zeros_like(prev)
    v = np.zeros_like(prev)
    for _ in range(iters):
        u_bar = _filter(u, _HS_AVG)
        v_bar = _filter(v, _HS_AVG)
        common = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * common
        v = v_bar - iy * common
    return FlowField(u, v)


def shifted_frame(img: np.ndarray, dy: int = 1, dx: int = 1) -> np.ndarray:
    """Synthetic next frame: content moved by (dy, dx) with replicated border."""
    img = to_grayscale(img)
    h, w = img.shape
    padded = np.pad(img, ((max(dy, 0), max(-dy, 0)), (max(dx, 0), max(-dx, 0))), mode="edge")
    y0 = max(-dy, 0)
    x0 = max(-dx, 0)
    return padded[y0:y0 + h, x0:x0 + w].copy()


def flow_orientation(flow: FlowField) -> np.ndarray:
    """Per-pixel direction of motion on [0, 1); angle 0 maps to 0.5."""
    u = np.asarray(flow.u, dtype=np.float64)
    v = np.asarray(flow.v, dtype=np.float64)
    theta = np.arctan2(v, u)
    out = np.mod((theta + np.pi) / (2.0 * np.pi), 1.0)
    out[(u == 0.0) & (v == 0.0)] = 0.0
    return out


# ---------------------------------------------------------------------------
# Modality stacks
# ---------------------------------------------------------------------------

MODALITIES = ("I", "Ec", "Es", "Ep", "O", "G3", "G5")


def extract_modality(name: str, gray: np.ndarray, next_frame: np.ndarray | None = None,
                     **opts) -> np.ndarray:
    """Compute one named modality of a grayscale frame."""
    if name == "I":
        return gray
    if name == "Ec":
        return edge_detect(gray, "canny", opts.get("canny_low", CANNY_LOW),
                           opts.get("canny_high", CANNY_HIGH))
    if name == "Es":
        return edge_detect(gray, "sobel")
    if name == "Ep":
        return edge_detect(gray, "prewitt")
    if name == "G3":
        return gaussian_scale(gray, 3.0)
    if name == "G5":
        return gaussian_scale(gray, 5.0)
    if name == "O":
        if next_frame is None:
            next_frame = shifted_frame(gray)
        flow = optical_flow(gray, next_frame, opts.get("hs_alpha2", HS_ALPHA2),
                            opts.get("hs_iters", HS_ITERS))
        return flow_orientation(flow)
    raise ValueError(f"unknown modality {name!r}")
