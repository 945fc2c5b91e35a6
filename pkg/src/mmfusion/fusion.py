"""Size-preserving fusion of per-modality conv feature maps.

Three fusions are supported, each keyed by the modalities it consumes:

* ``edges``: ``F_E = max(I + Ec, I + Es, I + Ep)``
* ``flow``:  ``F_O = I + O``
* ``scale``: ``F_G = max(I, G3, G5)``

``none`` passes the intensity column through unchanged. Max routes its
gradient to the lowest-index input among ties.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeMismatchError

FUSION_MODALITIES = {
    "none": ("I",),
    "edges": ("I", "Ec", "Es", "Ep"),
    "flow": ("I", "O"),
    "scale": ("I", "G3", "G5"),
}
FUSION_TAGS = {"none": "F_I", "edges": "F_E", "flow": "F_O", "scale": "F_G"}


@dataclass
class FusedMap:
    data: np.ndarray
    tag: str

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def _same_shape(maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    for a in arrs[1:]:
        if a.shape != arrs[0].shape:
            raise ShapeMismatchError(f"feature maps differ in shape: {arrs[0].shape} vs {a.shape}")
    return arrs


def fuse_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _same_shape([a, b])
    return a + b


def fuse_max(maps: Sequence[np.ndarray]) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("fuse_max needs at least one map")
    return np.max(np.stack(_same_shape(maps)), axis=0)


def fuse_edges(f_i, f_ec, f_es, f_ep) -> FusedMap:
    f_i, f_ec, f_es, f_ep = _same_shape([f_i, f_ec, f_es, f_ep])
    return FusedMap(fuse_max([f_i + f_ec, f_i + f_es, f_i + f_ep]), "F_E")


def fuse_flow(f_i, f_o) -> FusedMap:
    return FusedMap(fuse_sum(f_i, f_o), "F_O")


def fuse_scale(f_i, f_g3, f_g5) -> FusedMap:
    return FusedMap(fuse_max([f_i, f_g3, f_g5]), "F_G")


def max_backward(maps: Sequence[np.ndarray], upstream: np.ndarray) -> list[np.ndarray]:
    """Route ``upstream`` to the first argmax of ``maps`` at every element."""
    stack = np.stack(maps)
    winner = np.argmax(stack, axis=0)
    return [np.where(winner == k, upstream, 0.0) for k in range(len(maps))]


def fuse(mode: str, columns: dict[str, np.ndarray]) -> FusedMap:
    """Apply fusion ``mode`` to per-modality maps keyed by modality name."""
    if mode not in FUSION_MODALITIES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    m = [columns[k] for k in FUSION_MODALITIES[mode]]
    if mode == "edges":
        return fuse_edges(*m)
    if mode == "flow":
        return fuse_flow(*m)
    if mode == "scale":
        return fuse_scale(*m)
    return FusedMap(np.asarray(m[0], dtype=np.float64), "F_I")


def fuse_backward(mode: str, columns: dict[str, np.ndarray], upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Subgradient of :func:`fuse` with respect to each column map."""
    g = np.asarray(upstream, dtype=np.float64)
    if mode == "none":
        return {"I": g}
    if mode == "flow":
        return {"I": g, "O": g}
    if mode == "scale":
        names = FUSION_MODALITIES["scale"]
        return dict(zip(names, max_backward([columns[k] for k in names], g)))
    if mode == "edges":
        f_i = columns["I"]
        edge_names = ("Ec", "Es", "Ep")
        parts = max_backward([f_i + columns[k] for k in edge_names], g)
        out = {"I": parts[0] + parts[1] + parts[2]}
        out.update(zip(edge_names, parts))
        return out
    raise ValueError(f"unknown fusion mode {mode!r}")
