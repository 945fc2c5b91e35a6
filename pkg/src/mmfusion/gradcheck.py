"""Central finite-difference verification of analytic gradients.

Coordinates whose ``+eps`` / ``-eps`` perturbations change a discrete routing
decision (a ReLU mask, a pooling or fusion argmax) are non-differentiable
within the probe and are resampled rather than compared.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import backbone, model, rpn
from .backbone import NetworkParams

EPS = 1e-4
REL_TOL = 1e-4
# below this magnitude gradients are compared on absolute scale
GRAD_FLOOR = 1e-6


@dataclass
class Probe:
    component: str
    layer: str
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), GRAD_FLOOR)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), GRAD_FLOOR)


def _probe_coordinates(nets: Sequence[tuple[str, NetworkParams]], grads: Sequence[NetworkParams],
                       evaluate: Callable[[], tuple[float, str]], n_coords: int, eps: float,
                       rng: np.random.Generator, max_tries: int) -> tuple[list[Probe], int]:
    # sample proportionally to parameter count so every layer is reachable
    slots = []
    for ci, (cname, net) in enumerate(nets):
        for bi, blk in enumerate(net.blocks):
            slots.append((ci, bi, "weight", blk.weight.size))
            slots.append((ci, bi, "bias", blk.bias.size))
    sizes = np.array([s[3] for s in slots], dtype=np.float64)
    probs = np.sqrt(sizes) / np.sqrt(sizes).sum()
    _, base_pattern = evaluate()
    probes: list[Probe] = []
    skipped = 0
    tries = 0
    while len(probes) < n_coords and tries < max_tries:
        tries += 1
        ci, bi, pname, _ = slots[rng.choice(len(slots), p=probs)]
        arr = getattr(nets[ci][1].blocks[bi], pname)
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp, pat_p = evaluate()
        arr[idx] = orig - eps
        lm, pat_m = evaluate()
        arr[idx] = orig
        if pat_p != base_pattern or pat_m != base_pattern:
            skipped += 1
            continue
        g = getattr(grads[ci].blocks[bi], pname)[idx]
        probes.append(Probe(nets[ci][0], nets[ci][1].blocks[bi].spec.name, pname, idx,
                            float(g), (lp - lm) / (2 * eps)))
    return probes, skipped


def check_network(params: NetworkParams, x: np.ndarray, n_coords: int = 100, eps: float = EPS,
                  seed: int = 0) -> tuple[list[Probe], int]:
    """Check ``backward`` of a single network on ``L = sum(forward(x) * R)``."""
    rng = np.random.default_rng(seed)
    out, cache = backbone.forward(params, x)
    weights = rng.normal(size=out.shape)
    grads, _ = backbone.backward(params, cache, weights)

    def evaluate():
        o, c = backbone.forward(params, x)
        pat = b"".join(np.ascontiguousarray(s[k]).tobytes()
                       for s in c.steps for k in ("relu_mask", "pool_idx") if k in s)
        return float((o * weights).sum()), pat

    return _probe_coordinates([("net", params)], [grads], evaluate, n_coords, eps, rng, 50 * n_coords)


def random_problem(config: model.DetectorConfig, seed: int = 0, size: int = 24, n_images: int = 2):
    """Random-texture inputs for every column, one object per image and a fixed ROI set."""
    rng = np.random.default_rng(seed)
    samples = []
    n_cls = len(config.classes)
    _, anchor_boxes = model.anchors_for(config, (size, size))
    for k in range(n_images):
        inputs = {m: rng.random((size, size)) for m in config.modalities}
        x1, y1 = rng.integers(0, size // 3, size=2)
        x2, y2 = rng.integers(2 * size // 3, size + 1, size=2)
        gt = np.array([[x1, y1, x2, y2]], dtype=np.float64)
        labels = np.array([1 + k % n_cls])
        samples.append(model.Sample(f"random{k}", inputs, gt, labels,
                                    rpn.label_anchors(anchor_boxes, gt)))
    idx, boxes, targets = [], [], []
    for n, s in enumerate(samples):
        idx += [n, n]
        boxes += [s.gt_boxes[0], [0.0, 0.0, size, size / 2]]
        targets += [int(s.gt_labels[0]), 0]
    rois = model.RoiBatch(np.array(idx), np.array(boxes, dtype=np.float64), np.array(targets))
    return samples, rois


def check_detector(det: model.Detector, samples, rois, n_coords: int = 100, eps: float = EPS,
                   seed: int = 0) -> tuple[list[Probe], int]:
    """Probe the composed columns + fusion + RPN + head loss."""
    rng = np.random.default_rng(seed)
    res = model.loss_and_grads(det, samples, rois)

    def evaluate():
        r = model.loss_and_grads(det, samples, rois, with_grads=False, pattern=True)
        return r.loss, r.pattern

    return _probe_coordinates(det.components(), res.grads, evaluate, n_coords, eps, rng, 50 * n_coords)
