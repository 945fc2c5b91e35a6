"""Synthetic shape scenes standing in for traffic imagery.

Discs proxy pedestrians, wide rectangles proxy cars and triangles proxy road
signs. Each shape is drawn in color on a noisy background, converted to gray
and written as a PGM together with a ground-truth manifest.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging

SHAPES = {"person": "disc", "car": "rect", "sign": "triangle"}
DEFAULT_CLASSES = ("person", "car", "sign")


@dataclass
class PlacedObject:
    label: str
    box: tuple[int, int, int, int]


def _span(lo: int, hi: int, scale: float) -> tuple[int, int]:
    a = max(3, int(round(lo * scale)))
    return a, max(a + 1, int(round(hi * scale)))


def _shape_mask(kind: str, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Shape sizes are tuned for 64-pixel scenes and scaled for other sizes."""
    if kind == "disc":
        r = rng.uniform(7.0, 14.0) * scale
        n = int(np.ceil(2 * r)) + 1
        yy, xx = np.mgrid[0:n, 0:n] - (n - 1) / 2.0
        return xx * xx + yy * yy <= r * r
    if kind == "rect":
        w = int(rng.integers(*_span(20, 37, scale)))
        h = int(rng.integers(*_span(10, 17, scale)))
        return np.ones((h, w), dtype=bool)
    if kind == "triangle":
        b = int(rng.integers(*_span(16, 31, scale)))
        h = int(round(b * 0.9))
        yy, xx = np.mgrid[0:h, 0:b] + 0.5
        half = (yy / h) * (b / 2.0)
        return np.abs(xx - b / 2.0) <= half
    raise ValueError(f"unknown shape {kind!r}")


def _color(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    """Random RGB whose luminance falls in [lo, hi]."""
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        y = float(c @ imaging.LUMA)
        if lo <= y <= hi:
            return c


def render_scene(labels: list[str], size: int, rng: np.random.Generator) -> tuple[np.ndarray, list[PlacedObject]]:
    """Draw non-overlapping shapes; returns the gray image and tight boxes."""
    bg = _color(rng, 0.1, 0.35)
    rgb = np.broadcast_to(bg, (size, size, 3)).copy()
    rgb += rng.normal(0.0, 0.02, size=(size, size, 1))
    occupied = np.zeros((size, size), dtype=bool)
    placed = []
    for label in labels:
        mask = _shape_mask(SHAPES[label], rng, min(1.0, size / 64.0))
        mh, mw = mask.shape
        for _ in range(100):
            y0 = int(rng.integers(0, size - mh + 1))
            x0 = int(rng.integers(0, size - mw + 1))
            if not occupied[y0:y0 + mh, x0:x0 + mw].any():
                break
        else:
            continue
        rgb[y0:y0 + mh, x0:x0 + mw][mask] = _color(rng, 0.6, 0.95)
        occupied[y0:y0 + mh, x0:x0 + mw] = True
        ys, xs = np.nonzero(mask)
        placed.append(PlacedObject(label, (x0 + int(xs.min()), y0 + int(ys.min()),
                                           x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)))
    gray = np.clip(imaging.to_grayscale(np.clip(rgb, 0.0, 1.0)), 0.0, 1.0)
    return gray, placed


def synthesize(out_dir: str | os.PathLike, n_images: int, classes=DEFAULT_CLASSES, seed: int = 0,
               size: int = 64, max_objects: int = 1) -> Path:
    """Write ``n_images`` scenes plus ``manifest.txt``; returns the manifest path.

    Class of the first object cycles through ``classes`` so every class gets
    an equal share.
    """
    classes = tuple(classes)
    unknown = [c for c in classes if c not in SHAPES]
    if unknown:
        raise ValueError(f"no shape defined for classes {unknown}")
    if size < 16:
        raise ValueError("image size must be at least 16 pixels")
    if n_images < 3 * len(classes):
        raise ValueError("need at least 3 images per class")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_images):
        labels = [classes[i % len(classes)]]
        extra = int(rng.integers(0, max_objects)) if max_objects > 1 else 0
        labels += [classes[int(rng.integers(len(classes)))] for _ in range(extra)]
        gray, placed = render_scene(labels, size, rng)
        name = f"img_{i:04d}.pgm"
        imaging.save_image(out / name, gray)
        for obj in placed:
            lines.append(f"{name} {obj.label} {' '.join(str(v) for v in obj.box)}\n")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest
