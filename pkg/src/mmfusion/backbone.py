"""Trainable conv/fc stacks with exact backprop.

A network is a :class:`NetworkParams`: an ordered list of blocks, each a
convolution (3x3 same-padding, stride 1, optional ReLU and 2x2 max-pool) or a
fully connected layer (optional ReLU). The same machinery realizes the
modality backbones, the RPN objectness conv and the classification heads.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "fc"
    n_in: int
    n_out: int
    k: int = 3
    relu: bool = True
    pool: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.k % 2 == 0:
            raise ValueError(f"{self.name}: kernel size must be odd")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.n_out, self.n_in, self.k, self.k)
        return (self.n_out, self.n_in)

    @property
    def fans(self) -> tuple[int, int]:
        if self.kind == "conv":
            return self.n_in * self.k * self.k, self.n_out * self.k * self.k
        return self.n_in, self.n_out


def desk_backbone(in_channels: int = 1, widths: Sequence[int] = (8, 16, 32)) -> tuple[LayerSpec, ...]:
    """Three conv-ReLU-pool blocks standing in for a deep conv5 extractor."""
    specs = []
    c = in_channels
    for i, w in enumerate(widths, start=1):
        specs.append(LayerSpec(f"conv{i}", "conv", c, w, 3, relu=True, pool=True))
        c = w
    return tuple(specs)


@dataclass
class Block:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray


class NetworkParams:
    """Ordered parameter blocks supporting elementwise arithmetic."""

    def __init__(self, blocks: Iterable[Block]):
        self.blocks = list(blocks)

    @property
    def arch(self) -> tuple[LayerSpec, ...]:
        return tuple(b.spec for b in self.blocks)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            out.extend((b.weight, b.bias))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(Block(b.spec, b.weight.copy(), b.bias.copy()) for b in self.blocks)

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(Block(b.spec, np.zeros_like(b.weight), np.zeros_like(b.bias))
                             for b in self.blocks)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def _check(self, other: "NetworkParams") -> None:
        if self.arch != other.arch:
            raise ShapeMismatchError("architecture descriptors differ")

    def _zip(self, other, op) -> "NetworkParams":
        self._check(other)
        return NetworkParams(Block(a.spec, op(a.weight, b.weight), op(a.bias, b.bias))
                             for a, b in zip(self.blocks, other.blocks))

    def _map(self, op) -> "NetworkParams":
        return NetworkParams(Block(b.spec, op(b.weight), op(b.bias)) for b in self.blocks)

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __mul__(self, scalar: float):
        return self._map(lambda a: a * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        return self._map(lambda a: a / scalar)

    def __neg__(self):
        return self._map(np.negative)

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact equality of architecture and every parameter."""
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self.arch)
        return f"NetworkParams([{names}], {self.num_params()} params)"


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(arch: Sequence[LayerSpec], seed: int) -> NetworkParams:
    """Uniform Glorot weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    blocks = []
    for spec in arch:
        a = glorot_bound(*spec.fans)
        w = rng.uniform(-a, a, size=spec.weight_shape)
        blocks.append(Block(spec, w, np.zeros(spec.n_out)))
    return NetworkParams(blocks)


# ---------------------------------------------------------------------------
# Layer primitives, batched over the leading axis
# ---------------------------------------------------------------------------

def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n c h w k k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(o, -1).T + b
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    r = k // 2
    do = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (do.T @ cols).reshape(w.shape)
    db = do.sum(axis=0)
    dcols = (do @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * r, wd + 2 * r))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, r:r + h, r:r + wd], dw, db


def maxpool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatchError(f"cannot 2x2-pool a {h}x{w} map")
    xc = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    win = xc.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, x_shape):
    n, c, h, w = x_shape
    ho, wo = idx.shape[2:]
    dwin = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * ho, :2 * wo] = (dwin.reshape(n, c, ho, wo, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo))
    return dx


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Cache:
    arch: tuple[LayerSpec, ...]
    in_shape: tuple[int, ...]
    batched: bool
    steps: list = dataclasses.field(default_factory=list)


def _as_batch(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    first = params.arch[0]
    if first.kind == "conv":
        if x.ndim == 2:
            return x[None, None], False
        if x.ndim == 3:
            return x[None], False
        if x.ndim == 4:
            return x, True
    else:
        if x.ndim == 1:
            return x[None], False
        return x.reshape(x.shape[0], -1), True
    raise ShapeMismatchError(f"unsupported input rank {x.ndim}")


def forward(params: NetworkParams, x: np.ndarray):
    """Run the network; returns ``(output, cache)``.

    Unbatched input (``H x W`` image or ``C x H x W`` map) gives unbatched
    output; a leading batch axis is preserved otherwise.
    """
    h, batched = _as_batch(params, x)
    cache = Cache(params.arch, h.shape, batched)
    for blk in params.blocks:
        spec = blk.spec
        step: dict = {}
        if spec.kind == "conv":
            if h.ndim != 4 or h.shape[1] != spec.n_in:
                raise ShapeMismatchError(
                    f"{spec.name}: expected {spec.n_in} input channels, got shape {h.shape}")
            step["x_shape"] = h.shape
            h, step["cols"] = conv_forward(h, blk.weight, blk.bias)
        else:
            if h.ndim != 2:
                step["flat_from"] = h.shape
                h = h.reshape(h.shape[0], -1)
            if h.shape[1] != spec.n_in:
                raise ShapeMismatchError(
                    f"{spec.name}: expected {spec.n_in} inputs, got {h.shape[1]}")
            step["x"] = h
            h = h @ blk.weight.T + blk.bias
        if spec.relu:
            step["relu_mask"] = h > 0
            h = np.where(step["relu_mask"], h, 0.0)
        if spec.pool:
            step["pool_shape"] = h.shape
            h, step["pool_idx"] = maxpool_forward(h)
        cache.steps.append(step)
    return (h if batched else h[0]), cache


def backward(params: NetworkParams, cache: Cache, upstream: np.ndarray):
    """Exact gradients of ``sum(output * upstream)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` shaped like
    ``params`` and ``input_grad`` shaped like the forward input.
    """
    if cache.arch != params.arch:
        raise ShapeMismatchError("cache was produced by a different architecture")
    g = np.asarray(upstream, dtype=np.float64)
    if not cache.batched:
        g = g[None]
    grads = []
    for blk, step in zip(reversed(params.blocks), reversed(cache.steps)):
        spec = blk.spec
        if spec.pool:
            g = maxpool_backward(g, step["pool_idx"], step["pool_shape"])
        if spec.relu:
            g = np.where(step["relu_mask"], g, 0.0)
        if spec.kind == "conv":
            g, dw, db = conv_backward(g, step["cols"], step["x_shape"], blk.weight)
        else:
            dw = g.T @ step["x"]
            db = g.sum(axis=0)
            g = g @ blk.weight
            if "flat_from" in step:
                g = g.reshape(step["flat_from"])
        grads.append(Block(spec, dw, db))
    grads.reverse()
    g = g.reshape(cache.in_shape)
    if not cache.batched:
        g = g[0]
    return NetworkParams(grads), g


def conv_output_shape(arch: Sequence[LayerSpec], height: int, width: int) -> tuple[int, int, int]:
    """``C x H x W`` produced by a conv-only stack on an ``height x width`` input."""
    c, h, w = arch[0].n_in, height, width
    for spec in arch:
        if spec.kind != "conv":
            raise ValueError("conv_output_shape only handles conv stacks")
        c = spec.n_out
        if spec.pool:
            h, w = h // 2, w // 2
    return c, h, w


# ---------------------------------------------------------------------------
# Averaging and gradient diagnostics
# ---------------------------------------------------------------------------

def average_params(nets: Sequence[NetworkParams]) -> NetworkParams:
    """Elementwise arithmetic mean of identically shaped networks.

    Values are sorted per coordinate and accumulated as offsets from the
    smallest one, so the result does not depend on argument order and a list
    of identical networks averages back to the network bit-for-bit.
    """
    nets = list(nets)
    if not nets:
        raise ValueError("need at least one network to average")
    ref = nets[0]
    for other in nets[1:]:
        ref._check(other)
    n = len(nets)

    def mean(arrays):
        s = np.sort(np.stack(arrays), axis=0)
        return s[0] + (s - s[0]).sum(axis=0) / n

    blocks = []
    for i, blk in enumerate(ref.blocks):
        blocks.append(Block(blk.spec, mean([m.blocks[i].weight for m in nets]),
                            mean([m.blocks[i].bias for m in nets])))
    return NetworkParams(blocks)


@dataclass
class EpochGradients:
    """Weight gradients seen during one epoch, per layer, plus end-of-epoch weights."""
    epoch: int
    grads: dict[str, list[np.ndarray]]
    weights: dict[str, np.ndarray]


def grad_stats(history: Sequence[EpochGradients]) -> list[tuple[int, str, float, float]]:
    """Per epoch and layer: ||mean grad||_2 / ||w||_2 and ||std grad||_2 / ||w||_2.

    Mean and (population) standard deviation are taken elementwise across the
    update steps of the epoch.
    """
    if not history:
        raise ValueError("empty gradient history")
    rows = []
    for rec in history:
        for name, steps in rec.grads.items():
            if not steps:
                raise ValueError(f"epoch {rec.epoch}: no gradients for layer {name}")
            wnorm = float(np.linalg.norm(rec.weights[name]))
            if wnorm == 0.0:
                raise ZeroDivisionError(f"epoch {rec.epoch}: layer {name} has zero weight norm")
            g = np.stack(steps)
            rows.append((rec.epoch, name,
                         float(np.linalg.norm(g.mean(axis=0))) / wnorm,
                         float(np.linalg.norm(g.std(axis=0))) / wnorm))
    return rows
