"""Manifest handling, three-way split training, feature extraction and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import backbone, imaging, model, rpn
from .backbone import EpochGradients
from .heads import TrainConfig, learning_rate

log = logging.getLogger(__name__)

BACKGROUND_LABEL = "background"


@dataclass
class ManifestEntry:
    image: str
    label: str
    box: tuple[float, float, float, float]


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Parse ``image_path label x1 y1 x2 y2`` lines; paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            box = tuple(float(v) for v in parts[2:])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric box") from exc
        rpn.BBox(*box)
        img = parts[0] if os.path.isabs(parts[0]) else str(base / parts[0])
        entries.append(ManifestEntry(img, parts[1], box))
    return entries


def class_list(entries: Sequence[ManifestEntry]) -> tuple[str, ...]:
    return tuple(sorted({e.label for e in entries} - {BACKGROUND_LABEL}))


def group_by_image(entries: Sequence[ManifestEntry]) -> "OrderedDict[str, list[ManifestEntry]]":
    groups: OrderedDict[str, list[ManifestEntry]] = OrderedDict()
    for e in entries:
        groups.setdefault(e.image, []).append(e)
    return groups


def label_index(classes: Sequence[str], label: str) -> int:
    if label == BACKGROUND_LABEL:
        return model.BACKGROUND
    try:
        return 1 + list(classes).index(label)
    except ValueError:
        raise ValueError(f"class label {label!r} not in {tuple(classes)}") from None


def build_samples(entries: Sequence[ManifestEntry], config: model.DetectorConfig,
                  gt_fallback: bool = True) -> list[model.Sample]:
    samples = []
    for image, group in group_by_image(entries).items():
        gray = imaging.to_grayscale(imaging.load_image(image))
        boxes = np.array([e.box for e in group], dtype=np.float64).reshape(-1, 4)
        labels = np.array([label_index(config.classes, e.label) for e in group], dtype=np.int64)
        _, anchor_boxes = model.anchors_for(config, gray.shape)
        objects = boxes[labels != model.BACKGROUND]
        samples.append(model.Sample(image, model.prepare_inputs(config, gray), boxes, labels,
                                    rpn.label_anchors(anchor_boxes, objects, gt_fallback)))
    return samples


def split_three(items: Sequence) -> list[list]:
    """Three consecutive equal parts; the remainder goes to the last part."""
    if len(items) < 3:
        raise ValueError(f"need at least 3 samples to split, got {len(items)}")
    k = len(items) // 3
    return [list(items[:k]), list(items[k:2 * k]), list(items[2 * k:])]


# ---------------------------------------------------------------------------
# Evaluation on ground-truth ROIs
# ---------------------------------------------------------------------------

def predict_rois(det: model.Detector, samples: Sequence[model.Sample], batch: int = 16):
    """Predicted and true class index for every manifest box."""
    preds, truth = [], []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        fused, _, _ = model.forward_features(det, [s.inputs for s in chunk])
        idx = np.concatenate([np.full(len(s.gt_boxes), n) for n, s in enumerate(chunk)]).astype(np.int64)
        boxes = np.concatenate([s.gt_boxes for s in chunk]).reshape(-1, 4)
        if len(boxes) == 0:
            continue
        pooled, _ = model.pool_rois(det, fused, idx, boxes)
        logits, _ = backbone.forward(det.head.net, pooled)
        preds.append(logits.argmax(axis=1))
        truth.append(np.concatenate([s.gt_labels for s in chunk]))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(preds), np.concatenate(truth)


def roi_accuracy(det: model.Detector, samples: Sequence[model.Sample]) -> float:
    pred, truth = predict_rois(det, samples)
    return float((pred == truth).mean()) if len(truth) else float("nan")


def evaluate(det: model.Detector, samples: Sequence[model.Sample]) -> dict:
    """ROI classification accuracy, overall and per class."""
    pred, truth = predict_rois(det, samples)
    names = ("background",) + tuple(det.config.classes)
    per_class = {}
    for k, name in enumerate(names):
        sel = truth == k
        if sel.any():
            per_class[name] = {"n": int(sel.sum()), "accuracy": float((pred[sel] == k).mean())}
    n_pos = int((truth != model.BACKGROUND).sum())
    return {
        "metric": "roi_classification_accuracy",
        "n_rois": int(len(truth)),
        "n_positive_rois": n_pos,
        "accuracy": float((pred == truth).mean()) if len(truth) else None,
        "per_class": per_class,
        "flags": [] if n_pos else ["no positive ROIs"],
        "chance": 1.0 / (len(det.config.classes) + 1),
    }


def extract_features(det: model.Detector, samples: Sequence[model.Sample]):
    """Flattened ROI-pooled fused features for every manifest box, with labels."""
    feats, labels = [], []
    for s in samples:
        fused, _, _ = model.forward_features(det, [s.inputs])
        if len(s.gt_boxes) == 0:
            continue
        pooled, _ = model.pool_rois(det, fused, np.zeros(len(s.gt_boxes), dtype=np.int64), s.gt_boxes)
        feats.append(pooled.reshape(len(s.gt_boxes), -1))
        labels.append(s.gt_labels)
    dim = int(np.prod(det.config.pooled_shape))
    if not feats:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    return np.concatenate(feats), np.concatenate(labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class CopyResult:
    detector: model.Detector
    epochs: list[EpochRecord]
    grad_rows: list[tuple[int, str, float, float]]


@dataclass
class TrainResult:
    detector: model.Detector
    copies: list[CopyResult]
    metrics: list[EpochRecord] = field(default_factory=list)
    grad_rows: list[tuple[int, str, float, float]] = field(default_factory=list)


def _layer_names(det: model.Detector) -> list[tuple[str, backbone.NetworkParams]]:
    return det.components()


def train_copy(det: model.Detector, samples: Sequence[model.Sample], config: TrainConfig,
               prefix: str = "", progress: Callable[[str], None] | None = None) -> CopyResult:
    """Mini-batch SGD on one part; ``det`` is updated in place."""
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    step = 0
    records, grad_rows = [], []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        seen: dict[str, list[np.ndarray]] = {}
        losses = []
        lr = config.lr_start
        for b in range(steps_per_epoch):
            batch = [samples[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            res = model.loss_and_grads(det, batch, rois_per_image=config.rois_per_image)
            lr = learning_rate(config, step, total)
            for (cname, net), grads in zip(det.components(), res.grads):
                for blk, g in zip(net.blocks, grads.blocks):
                    seen.setdefault(f"{prefix}{cname}.{blk.spec.name}", []).append(g.weight)
                    blk.weight -= lr * g.weight
                    blk.bias -= lr * g.bias
            losses.append(res.loss)
            step += 1
        weights = {f"{prefix}{cname}.{blk.spec.name}": blk.weight
                   for cname, net in det.components() for blk in net.blocks}
        grad_rows += backbone.grad_stats([EpochGradients(epoch, seen, weights)])
        rec = EpochRecord(epoch, float(np.mean(losses)), roi_accuracy(det, samples), lr)
        records.append(rec)
        if progress:
            progress(f"{prefix}epoch {epoch}: loss {rec.loss:.4f} acc {rec.accuracy:.3f} lr {lr:g}")
    return CopyResult(det, records, grad_rows)


def train_three_way(samples: Sequence[model.Sample], config: TrainConfig,
                    det_config: model.DetectorConfig,
                    progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train one pipeline copy per third of the data from a shared initialization
    and average the three copies' weights and biases."""
    if not samples:
        raise ValueError("empty dataset")
    n_cls = len(det_config.classes)
    for s in samples:
        if np.any((s.gt_labels < 0) | (s.gt_labels > n_cls)):
            raise ValueError(f"{s.name}: class label out of range")
    parts = split_three(list(samples))
    init = model.init_detector(det_config, config.seed)
    copies = []
    for j, part in enumerate(parts, start=1):
        copies.append(train_copy(init.copy(), part, config, prefix=f"part{j}/", progress=progress))
    final = model.average_detectors([c.detector for c in copies])
    sizes = np.array([len(p) for p in parts], dtype=np.float64)
    metrics = []
    for e in range(config.epochs):
        recs = [c.epochs[e] for c in copies]
        metrics.append(EpochRecord(
            e, float(np.dot(sizes, [r.loss for r in recs]) / sizes.sum()),
            float(np.dot(sizes, [r.accuracy for r in recs]) / sizes.sum()), recs[-1].lr))
    grad_rows = [row for c in copies for row in c.grad_rows]
    return TrainResult(final, copies, metrics, grad_rows)


def write_metrics_csv(path: str | os.PathLike, records: Sequence[EpochRecord]) -> None:
    """One row per epoch: ``epoch,loss,accuracy,lr``; floats written with ``repr``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy", "lr"])
        for r in records:
            w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), repr(r.lr)])


def write_grad_stats_csv(path: str | os.PathLike, rows: Sequence[tuple[int, str, float, float]]) -> None:
    """Rows of ``epoch,layer,mean_norm,std_norm`` as produced by ``backbone.grad_stats``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "layer", "mean_norm", "std_norm"])
        for epoch, layer, m, s in rows:
            w.writerow([epoch, layer, repr(m), repr(s)])
