"""The composed detector: modality columns, fusion, RPN and classification head."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import backbone, fusion, imaging, rpn
from .backbone import LayerSpec, NetworkParams
from .heads import HeadParams, cross_entropy, init_head, softmax

BACKGROUND = 0


@dataclass(frozen=True)
class DetectorConfig:
    fusion: str = "scale"
    head: str = "CNN_1C"
    classes: tuple[str, ...] = ("car", "person", "sign")
    widths: tuple[int, ...] = (8, 16, 32)
    scales: tuple[float, ...] = rpn.DEFAULT_SCALES
    ratios: tuple[float, ...] = rpn.DEFAULT_RATIOS
    pool_size: tuple[int, int] = (4, 4)
    hidden: tuple[int, int] = (128, 64)
    top_k: int = 32
    nms_iou: float = 0.7
    score_threshold: float = 0.5
    final_nms_iou: float = 0.3
    final_containment: float = 0.7
    canny_low: float = imaging.CANNY_LOW
    canny_high: float = imaging.CANNY_HIGH
    hs_alpha2: float = imaging.HS_ALPHA2
    hs_iters: int = imaging.HS_ITERS

    @property
    def modalities(self) -> tuple[str, ...]:
        return fusion.FUSION_MODALITIES[self.fusion]

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def n_anchor_types(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def pooled_shape(self) -> tuple[int, int, int]:
        return (self.widths[-1], *self.pool_size)

    @property
    def tag(self) -> str:
        return fusion.FUSION_TAGS[self.fusion]

    def modality_options(self) -> dict:
        return dict(canny_low=self.canny_low, canny_high=self.canny_high,
                    hs_alpha2=self.hs_alpha2, hs_iters=self.hs_iters)


@dataclass
class Detector:
    config: DetectorConfig
    columns: dict[str, NetworkParams]
    rpn: NetworkParams
    head: HeadParams

    def components(self) -> list[tuple[str, NetworkParams]]:
        items = [(f"col.{m}", self.columns[m]) for m in self.config.modalities]
        items.append(("rpn", self.rpn))
        items.append(("head", self.head.net))
        return items

    def with_components(self, nets: Sequence[NetworkParams]) -> "Detector":
        mods = self.config.modalities
        cols = dict(zip(mods, nets[:len(mods)]))
        head = replace(self.head, net=nets[len(mods) + 1])
        return Detector(self.config, cols, nets[len(mods)], head)

    def copy(self) -> "Detector":
        return self.with_components([n.copy() for _, n in self.components()])


def rpn_arch(channels: int, n_anchor_types: int) -> tuple[LayerSpec, ...]:
    return (LayerSpec("rpn.cls", "conv", channels, 2 * n_anchor_types, 3, relu=False, pool=False),)


def init_detector(config: DetectorConfig, seed: int) -> Detector:
    cols = {}
    for i, m in enumerate(config.modalities):
        cols[m] = backbone.init_params(backbone.desk_backbone(1, config.widths), seed * 1009 + i)
    rpn_net = backbone.init_params(rpn_arch(config.widths[-1], config.n_anchor_types), seed * 1009 + 101)
    head = init_head(config.head, config.pooled_shape, len(config.classes), seed * 1009 + 202,
                     config.hidden)
    return Detector(config, cols, rpn_net, head)


def average_detectors(dets: Sequence[Detector]) -> Detector:
    per_component = zip(*[[n for _, n in d.components()] for d in dets])
    return dets[0].with_components([backbone.average_params(list(c)) for c in per_component])


def prepare_inputs(config: DetectorConfig, gray: np.ndarray,
                   next_frame: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Modality images required by ``config.fusion`` for one grayscale frame."""
    opts = config.modality_options()
    return {m: standardize(imaging.extract_modality(m, gray, next_frame, **opts))
            for m in config.modalities}


def standardize(img: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy of one modality image (constant images map to 0)."""
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    if sd < 1e-12:
        return np.zeros_like(img)
    return (img - img.mean()) / sd


@lru_cache(maxsize=32)
def _anchors(h: int, w: int, stride: int, scales: tuple, ratios: tuple):
    fh, fw = h // stride, w // stride
    anchors = rpn.generate_anchors(fh, fw, stride, scales, ratios, image_size=(h, w))
    return anchors, rpn.boxes_array(anchors)


def anchors_for(config: DetectorConfig, image_hw: tuple[int, int]):
    return _anchors(image_hw[0], image_hw[1], config.stride, config.scales, config.ratios)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _stack(inputs: Sequence[dict[str, np.ndarray]], name: str) -> np.ndarray:
    return np.stack([np.asarray(d[name], dtype=np.float64) for d in inputs])[:, None]


def forward_features(det: Detector, inputs: Sequence[dict[str, np.ndarray]]):
    """Fused conv maps for a batch of modality dicts; returns ``(fused, column_maps, caches)``."""
    maps, caches = {}, {}
    for m in det.config.modalities:
        maps[m], caches[m] = backbone.forward(det.columns[m], _stack(inputs, m))
    fused = fusion.fuse(det.config.fusion, maps).data
    return fused, maps, caches


def rpn_pairs(logits: np.ndarray) -> np.ndarray:
    """``N x 2A x h x w`` logits to ``N x (h*w*A) x 2`` in anchor order."""
    n, c2, h, w = logits.shape
    a = c2 // 2
    return logits.reshape(n, a, 2, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, 2)


def rpn_unpairs(pairs: np.ndarray, shape) -> np.ndarray:
    n, c2, h, w = shape
    a = c2 // 2
    return pairs.reshape(n, h, w, a, 2).transpose(0, 3, 4, 1, 2).reshape(shape)


def objectness(logits: np.ndarray) -> np.ndarray:
    """Per-image ``2A x h x w`` softmax map from ``2A x h x w`` logits."""
    a2, h, w = logits.shape
    p = softmax(logits.reshape(a2 // 2, 2, h, w).transpose(0, 2, 3, 1))
    return p.transpose(0, 3, 1, 2).reshape(a2, h, w)


def rpn_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Class-balanced objectness cross-entropy; anchors labeled 0 are ignored.

    Positives and negatives each contribute the mean loss of their group.
    """
    pairs = rpn_pairs(logits).reshape(-1, 2)
    lab = np.asarray(labels).reshape(-1)
    grad = np.zeros_like(pairs)
    total = 0.0
    for value, target in ((1, 1), (-1, 0)):
        idx = np.flatnonzero(lab == value)
        if idx.size == 0:
            continue
        loss, g = cross_entropy(pairs[idx], np.full(idx.size, target))
        total += loss
        grad[idx] = g
    return total, rpn_unpairs(grad.reshape(logits.shape[0], -1, 2), logits.shape)


@dataclass
class RoiBatch:
    """ROIs for a batch: owning image index, box and class target."""
    image_index: np.ndarray
    boxes: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.targets)


def pool_rois(det: Detector, fused: np.ndarray, image_index, boxes):
    ph, pw = det.config.pool_size
    pooled = np.zeros((len(boxes), fused.shape[1], ph, pw))
    args = []
    for r, (n, box) in enumerate(zip(image_index, boxes)):
        pooled[r], a = rpn.roi_pool_indexed(fused[n], rpn.BBox(*box), ph, pw, det.config.stride)
        args.append(a)
    return pooled, args


def label_rois(boxes: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """Head targets for proposal boxes: object class at IoU >= 0.5, background
    below 0.3, and -1 (skip) in between."""
    if len(gt_boxes) == 0:
        return np.zeros(len(boxes), dtype=np.int64)
    ov = rpn.iou_matrix(boxes, gt_boxes)
    best = ov.argmax(axis=1)
    m = ov.max(axis=1)
    out = np.full(len(boxes), -1, dtype=np.int64)
    out[m >= 0.5] = np.asarray(gt_labels)[best[m >= 0.5]]
    out[m < 0.3] = BACKGROUND
    return out


@dataclass
class Sample:
    name: str
    inputs: dict[str, np.ndarray]
    gt_boxes: np.ndarray   # M x 4
    gt_labels: np.ndarray  # M, 0 = background, 1..C objects
    anchor_labels: np.ndarray | None = None

    @property
    def image_hw(self) -> tuple[int, int]:
        return next(iter(self.inputs.values())).shape


def sample_rois(det: Detector, samples: Sequence[Sample], logits: np.ndarray,
                per_image: int) -> RoiBatch:
    """Ground-truth boxes plus up to ``per_image`` labeled proposals per image.

    Object-labeled proposals are taken first; at most one background proposal
    is added per image so background does not swamp the object classes.
    """
    idx, boxes, targets = [], [], []
    for n, s in enumerate(samples):
        for b, lab in zip(s.gt_boxes, s.gt_labels):
            idx.append(n)
            boxes.append(b)
            targets.append(int(lab))
        if per_image <= 0:
            continue
        _, anchor_boxes = anchors_for(det.config, s.image_hw)
        rois = rpn.propose_rois(objectness(logits[n]), anchor_boxes, det.config.top_k,
                                det.config.nms_iou, s.image_hw)
        if not rois:
            continue
        pb = rpn.boxes_array(rois)
        lab = label_rois(pb, s.gt_boxes, s.gt_labels)
        pos = np.flatnonzero(lab > BACKGROUND)[:max(per_image - 1, 0)]
        neg = np.flatnonzero(lab == BACKGROUND)[:1]
        for k in np.concatenate([pos, neg]):
            idx.append(n)
            boxes.append(pb[k])
            targets.append(int(lab[k]))
    return RoiBatch(np.array(idx, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4),
                    np.array(targets, dtype=np.int64))


@dataclass
class LossResult:
    loss: float
    rpn_loss: float
    head_loss: float
    grads: list[NetworkParams] = field(default_factory=list)
    head_logits: np.ndarray | None = None
    rois: RoiBatch | None = None
    pattern: str = ""


def _pattern_digest(det: Detector, maps, caches, h_cache, roi_args) -> str:
    """Hash of every discrete routing decision (ReLU masks, pool/fusion/ROI argmax)."""
    h = hashlib.sha1()
    for cache in [*caches.values(), h_cache]:
        for step in cache.steps:
            for key in ("relu_mask", "pool_idx"):
                if key in step:
                    h.update(np.ascontiguousarray(step[key]).tobytes())
    mode = det.config.fusion
    if mode == "scale":
        h.update(np.argmax(np.stack([maps[m] for m in det.config.modalities]), axis=0).tobytes())
    elif mode == "edges":
        h.update(np.argmax(np.stack([maps["I"] + maps[m] for m in ("Ec", "Es", "Ep")]), axis=0).tobytes())
    for a in roi_args:
        h.update(a.tobytes())
    return h.hexdigest()


def loss_and_grads(det: Detector, samples: Sequence[Sample], rois: RoiBatch | None = None,
                   rois_per_image: int = 4, with_grads: bool = True,
                   pattern: bool = False) -> LossResult:
    """Summed RPN + head loss of a batch and its exact parameter gradients.

    ``rois`` fixes the head's regions; otherwise ground-truth boxes and
    current proposals are used (treated as constants).
    """
    inputs = [s.inputs for s in samples]
    fused, maps, caches = forward_features(det, inputs)
    logits, rpn_cache = backbone.forward(det.rpn, fused)
    labels = np.stack([s.anchor_labels for s in samples])
    l_rpn, d_logits = rpn_loss(logits, labels)

    if rois is None:
        rois = sample_rois(det, samples, logits, rois_per_image)
    pooled, args = pool_rois(det, fused, rois.image_index, rois.boxes)
    h_logits, h_cache = backbone.forward(det.head.net, pooled)
    l_head, d_head = cross_entropy(h_logits, rois.targets)
    result = LossResult(l_rpn + l_head, l_rpn, l_head, head_logits=h_logits, rois=rois)
    if pattern:
        result.pattern = _pattern_digest(det, maps, caches, h_cache, args)
    if not with_grads:
        return result

    g_head, d_pooled = backbone.backward(det.head.net, h_cache, d_head)
    d_pooled = d_pooled.reshape(pooled.shape)
    g_rpn, d_fused = backbone.backward(det.rpn, rpn_cache, d_logits)
    shape = fused.shape[1:]
    for r, n in enumerate(rois.image_index):
        d_fused[n] += rpn.roi_pool_backward(d_pooled[r], args[r], shape)
    d_cols = fusion.fuse_backward(det.config.fusion, maps, d_fused)
    grads = [backbone.backward(det.columns[m], caches[m], d_cols[m])[0] for m in det.config.modalities]
    result.grads = grads + [g_rpn, g_head]
    return result


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class RawDetection:
    class_index: int
    score: float
    box: rpn.BBox


def classify_boxes(det: Detector, inputs: dict[str, np.ndarray], boxes: np.ndarray) -> np.ndarray:
    """Head probabilities for fixed boxes in one image (``R x C+1``)."""
    fused, _, _ = forward_features(det, [inputs])
    boxes = rpn.boxes_array(boxes)
    if len(boxes) == 0:
        return np.zeros((0, len(det.config.classes) + 1))
    pooled, _ = pool_rois(det, fused, np.zeros(len(boxes), dtype=np.int64), boxes)
    logits, _ = backbone.forward(det.head.net, pooled)
    return softmax(logits)


def detect(det: Detector, inputs: dict[str, np.ndarray]) -> list[RawDetection]:
    """Proposals classified by the head; background and weak scores dropped."""
    cfg = det.config
    hw = next(iter(inputs.values())).shape
    if min(hw) < cfg.stride:
        return []  # no feature cell, so no anchors and no proposals
    fused, _, _ = forward_features(det, [inputs])
    logits, _ = backbone.forward(det.rpn, fused)
    _, anchor_boxes = anchors_for(cfg, hw)
    rois = rpn.propose_rois(objectness(logits[0]), anchor_boxes, cfg.top_k, cfg.nms_iou, hw)
    if not rois:
        return []
    boxes = rpn.boxes_array(rois)
    pooled, _ = pool_rois(det, fused, np.zeros(len(boxes), dtype=np.int64), boxes)
    probs = softmax(backbone.forward(det.head.net, pooled)[0])
    cls = probs.argmax(axis=1)
    score = probs[np.arange(len(cls)), cls]
    keep = np.flatnonzero((cls != BACKGROUND) & (score >= cfg.score_threshold))
    if keep.size == 0:
        return []
    final = rpn.nms(boxes[keep], score[keep], cfg.final_nms_iou, contain=cfg.final_containment)
    return [RawDetection(int(cls[keep[k]]), float(score[keep[k]]), rpn.BBox(*boxes[keep[k]]))
            for k in final]
