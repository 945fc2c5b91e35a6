"""Anchors, overlap, anchor labeling, proposal selection and ROI pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_SCALES = (16.0, 32.0, 64.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
POSITIVE_IOU = 0.7
NEGATIVE_IOU = 0.3


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2 and self.area > 0):
            raise ValueError(f"box must have positive area: {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [float(v) for v in (self.x1, self.y1, self.x2, self.y2)]


@dataclass(frozen=True)
class Anchor:
    box: BBox
    cell: tuple[int, int]  # (row, col) on the feature grid
    scale_index: int
    ratio_index: int
    outside: bool = False


@dataclass(frozen=True)
class ROI:
    box: BBox
    score: float
    anchor_index: int = -1


def generate_anchors(map_h: int, map_w: int, stride: float,
                     scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS,
                     image_size: tuple[int, int] | None = None) -> list[Anchor]:
    """Anchors for every feature cell, ordered by (row, col, scale, ratio).

    ``image_size`` is ``(height, width)``; when given, anchors crossing the
    image border are flagged ``outside`` (and kept).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    anchors = []
    for cy in range(map_h):
        for cx in range(map_w):
            xc, yc = (cx + 0.5) * stride, (cy + 0.5) * stride
            for si, s in enumerate(scales):
                for ri, r in enumerate(ratios):
                    w, h = s * math.sqrt(r), s / math.sqrt(r)
                    box = BBox(xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2)
                    outside = False
                    if image_size is not None:
                        ih, iw = image_size
                        outside = box.x1 < 0 or box.y1 < 0 or box.x2 > iw or box.y2 > ih
                    anchors.append(Anchor(box, (cy, cx), si, ri, outside))
    return anchors


def boxes_array(items) -> np.ndarray:
    """Stack BBox / Anchor / ROI objects (or a raw array) into an ``N x 4`` array."""
    if isinstance(items, np.ndarray):
        return items.reshape(-1, 4).astype(np.float64)
    rows = [getattr(it, "box", it).as_array() for it in items]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``N x 4`` and ``M x 4`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def label_from_overlap(m: float) -> int:
    if m > POSITIVE_IOU:
        return 1
    if m < NEGATIVE_IOU:
        return -1
    return 0


def label_anchor(anchor: Anchor | BBox, gt_boxes: Sequence[BBox]) -> int:
    """1 / -1 / 0 from the best overlap of ``anchor`` with any ground-truth box."""
    box = getattr(anchor, "box", anchor)
    m = max((iou(box, g) for g in gt_boxes), default=0.0)
    return label_from_overlap(m)


def label_anchors(anchor_boxes: np.ndarray, gt_boxes: np.ndarray, gt_fallback: bool = True) -> np.ndarray:
    """Vectorized anchor labels.

    With ``gt_fallback`` the best-overlapping anchor of every ground-truth box
    is promoted to 1 even when its IoU does not exceed the positive threshold.
    """
    anchor_boxes = boxes_array(anchor_boxes)
    gt_boxes = boxes_array(gt_boxes)
    n = len(anchor_boxes)
    if len(gt_boxes) == 0:
        return -np.ones(n, dtype=np.int64)
    ov = iou_matrix(anchor_boxes, gt_boxes)
    best = ov.max(axis=1)
    labels = np.zeros(n, dtype=np.int64)
    labels[best > POSITIVE_IOU] = 1
    labels[best < NEGATIVE_IOU] = -1
    if gt_fallback:
        for j in range(ov.shape[1]):
            i = int(np.argmax(ov[:, j]))
            if ov[i, j] > 0:
                labels[i] = 1
    return labels


def containment_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection area over the smaller box's area, pairwise."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / np.minimum(area_a[:, None], area_b[None, :])


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float, max_keep: int | None = None,
        contain: float | None = None) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Stops once ``max_keep`` boxes are kept. With ``contain`` a box is also
    suppressed when that fraction of it (or of the kept box) lies inside a
    higher-scoring kept box.
    """
    boxes = boxes_array(boxes)
    order = np.argsort(-np.asarray(scores), kind="stable")
    ov = iou_matrix(boxes, boxes) > thresh
    if contain is not None:
        ov |= containment_matrix(boxes, boxes) > contain
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= ov[i]
    return keep


def anchor_scores(objectness: np.ndarray) -> np.ndarray:
    """Object probability per anchor from a ``2A x H x W`` softmax map.

    Channel ``2a + 1`` is the object probability of anchor type ``a``; the
    result follows :func:`generate_anchors` ordering.
    """
    obj = np.asarray(objectness)[1::2]
    return obj.transpose(1, 2, 0).reshape(-1)


def propose_rois(objectness: np.ndarray, anchors: Sequence[Anchor] | np.ndarray, top_k: int = 32,
                 nms_iou: float = 0.7, image_size: tuple[int, int] | None = None) -> list[ROI]:
    """Score-sorted, non-max-suppressed anchors clipped to the image."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = anchor_scores(objectness)
    if len(scores) != len(anchors):
        raise ValueError(f"{len(scores)} scores for {len(anchors)} anchors")
    boxes = boxes_array(anchors)
    if image_size is not None:
        ih, iw = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, iw)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, ih)
    valid = np.flatnonzero((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))
    kept = nms(boxes[valid], scores[valid], nms_iou, max_keep=top_k)
    return [ROI(BBox(*boxes[valid[k]]), float(scores[valid[k]]), int(valid[k])) for k in kept]


def _bin_edges(start: int, n: int, out: int) -> list[tuple[int, int]]:
    return [(start + (i * n) // out, start + -((-(i + 1) * n) // out)) for i in range(out)]


def roi_pool_indexed(fmap: np.ndarray, roi, out_h: int, out_w: int, stride: float):
    """ROI max-pool returning ``(pooled, argmax)``.

    ``argmax`` holds the flat ``H*W`` index of each winning cell, or -1 for an
    empty bin.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    c, h, w = fmap.shape
    box = getattr(roi, "box", roi)
    x0 = max(int(math.floor(box.x1 / stride)), 0)
    y0 = max(int(math.floor(box.y1 / stride)), 0)
    x1 = min(int(math.ceil(box.x2 / stride)), w)
    y1 = min(int(math.ceil(box.y2 / stride)), h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"roi {box} lies outside the {h}x{w} feature map")
    out = np.zeros((c, out_h, out_w))
    arg = -np.ones((c, out_h, out_w), dtype=np.int64)
    for i, (ys, ye) in enumerate(_bin_edges(y0, y1 - y0, out_h)):
        for j, (xs, xe) in enumerate(_bin_edges(x0, x1 - x0, out_w)):
            if ye <= ys or xe <= xs:
                continue
            vals = fmap[:, ys:ye, xs:xe].reshape(c, -1)
            k = vals.argmax(axis=1)
            out[:, i, j] = vals[np.arange(c), k]
            bw = xe - xs
            arg[:, i, j] = (ys + k // bw) * w + xs + k % bw
    return out, arg


def roi_pool(fmap: np.ndarray, roi, out_h: int, out_w: int, stride: float) -> np.ndarray:
    return roi_pool_indexed(fmap, roi, out_h, out_w, stride)[0]


def roi_pool_backward(upstream: np.ndarray, argmax: np.ndarray, fmap_shape) -> np.ndarray:
    c, h, w = fmap_shape
    grad = np.zeros((c, h * w))
    ch = np.broadcast_to(np.arange(c)[:, None, None], argmax.shape)
    ok = argmax >= 0
    np.add.at(grad, (ch[ok], argmax[ok]), np.asarray(upstream)[ok])
    return grad.reshape(c, h, w)
