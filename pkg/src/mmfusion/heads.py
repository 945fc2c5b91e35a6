"""Classification heads, the learning-rate schedule and the linear SVM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import backbone
from .backbone import LayerSpec, NetworkParams
from .errors import ShapeMismatchError

HEAD_VARIANTS = ("CNN_0C", "CNN_1C")
DEFAULT_HIDDEN = (128, 64)


def normalize_variant(name: str) -> str:
    key = name.upper().replace("-", "_")
    if key in ("CNN0C", "CNN_0C"):
        return "CNN_0C"
    if key in ("CNN1C", "CNN_1C"):
        return "CNN_1C"
    raise ValueError(f"unknown head variant {name!r}")


def head_arch(variant: str, pooled_shape: tuple[int, int, int], n_classes: int,
              hidden: Sequence[int] = DEFAULT_HIDDEN) -> tuple[LayerSpec, ...]:
    """Layer stack for a head; output has ``n_classes + 1`` logits (index 0 = background).

    CNN_0C is three fully connected layers; CNN_1C puts one 3x3 conv (same
    width, no pooling) in front of the identical FC stack.
    """
    variant = normalize_variant(variant)
    if len(hidden) != 2:
        raise ValueError("heads use exactly two hidden FC widths")
    c, ph, pw = pooled_shape
    specs: list[LayerSpec] = []
    if variant == "CNN_1C":
        specs.append(LayerSpec("head.conv", "conv", c, c, 3, relu=True, pool=False))
    widths = [c * ph * pw, *hidden, n_classes + 1]
    for i in range(3):
        specs.append(LayerSpec(f"head.fc{i + 1}", "fc", widths[i], widths[i + 1], relu=i < 2))
    return tuple(specs)


@dataclass
class HeadParams:
    variant: str
    net: NetworkParams
    n_classes: int
    pooled_shape: tuple[int, int, int]

    def __post_init__(self):
        kinds = [s.kind for s in self.net.arch]
        expected = (["conv"] if self.variant == "CNN_1C" else []) + ["fc"] * 3
        if kinds != expected:
            raise ShapeMismatchError(f"{self.variant} expects blocks {expected}, got {kinds}")


def init_head(variant: str, pooled_shape: tuple[int, int, int], n_classes: int, seed: int,
              hidden: Sequence[int] = DEFAULT_HIDDEN) -> HeadParams:
    variant = normalize_variant(variant)
    arch = head_arch(variant, pooled_shape, n_classes, hidden)
    return HeadParams(variant, backbone.init_params(arch, seed), n_classes, tuple(pooled_shape))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_logits(params: HeadParams, pooled: np.ndarray):
    pooled = np.asarray(pooled, dtype=np.float64)
    expect = tuple(params.pooled_shape)
    if pooled.shape[-3:] != expect:
        raise ShapeMismatchError(f"pooled map {pooled.shape} does not match {expect}")
    if pooled.ndim == 3:
        logits, cache = backbone.forward(params.net, pooled[None])
        return logits[0], cache
    return backbone.forward(params.net, pooled)


def head_forward(params: HeadParams, pooled: np.ndarray) -> np.ndarray:
    """Class probabilities (background first) for one pooled map or a batch."""
    logits, _ = head_logits(params, pooled)
    return softmax(logits)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient w.r.t. ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 25
    lr_start: float = 0.01
    lr_end: float = 0.005
    schedule: str = "step"  # "step" halves at the midpoint; "linear" interpolates
    seed: int = 0
    batch_size: int = 2
    gt_fallback: bool = True
    rois_per_image: int = 4

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("step", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """Rate at optimizer step ``step`` (0-based) of ``total_steps``.

    With two or more steps the first uses ``lr_start`` and the last ``lr_end``.
    """
    if total_steps <= 1:
        return config.lr_start
    if config.schedule == "linear":
        frac = step / (total_steps - 1)
        return config.lr_start + (config.lr_end - config.lr_start) * frac
    return config.lr_start if step < total_steps / 2 else config.lr_end


# ---------------------------------------------------------------------------
# Linear one-vs-rest SVM
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    classes: np.ndarray
    weights: np.ndarray  # K x D
    bias: np.ndarray     # K

    def margins(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias


def svm_train(samples: np.ndarray, labels: Sequence, epochs: int = 300, lr: float = 0.1,
              reg: float = 1e-3) -> SvmModel:
    """One-vs-rest linear SVM by full-batch hinge-loss subgradient descent."""
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("svm_train needs at least two classes")
    n, d = x.shape
    target = np.where(y[None, :] == classes[:, None], 1.0, -1.0)  # K x N
    w = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    for t in range(epochs):
        step = lr / np.sqrt(t + 1.0)
        margin = target * (w @ x.T + b[:, None])
        active = (margin < 1.0) * target
        gw = reg * w - active @ x / n
        gb = -active.sum(axis=1) / n
        w -= step * gw
        b -= step * gb
    return SvmModel(classes, w, b)


def svm_predict(model: SvmModel, sample: np.ndarray):
    """Class with the largest margin; ties go to the lowest class index."""
    m = model.margins(sample)
    return model.classes[np.argmax(m, axis=-1)]
