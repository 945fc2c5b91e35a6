"""Model files: a versioned binary container and an equivalent JSON form.

Binary layout (all integers little-endian)::

    offset  size  content
    0       4     magic b"MMFD"
    4       2     format version (uint16, currently 1)
    6       4     header length N in bytes (uint32)
    10      N     UTF-8 JSON header
    10+N    ...   parameter payload: float64 little-endian, no padding

The header holds ``config`` (every DetectorConfig field), ``tags``
(fusion tag and head variant), ``classes`` and ``components``: an ordered list
of ``{"name", "layers": [LayerSpec fields...]}``. The payload is every
component's blocks in that order, each block as its weight array (C order)
followed by its bias. The JSON form stores the same header plus ``params``,
a list of ``[weight, bias]`` nested lists in the same order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import model
from .backbone import Block, LayerSpec, NetworkParams
from .errors import ModelFormatError

MAGIC = b"MMFD"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _spec_dict(s: LayerSpec) -> dict:
    return {"name": s.name, "kind": s.kind, "n_in": s.n_in, "n_out": s.n_out, "k": s.k,
            "relu": s.relu, "pool": s.pool}


def header_for(det: model.Detector, extra: dict | None = None) -> dict:
    cfg = asdict(det.config)
    return {
        "format": "mmfusion-detector",
        "version": VERSION,
        "config": cfg,
        "tags": {"fusion": det.config.tag, "head": det.head.variant},
        "classes": list(det.config.classes),
        "components": [{"name": name, "layers": [_spec_dict(b.spec) for b in net.blocks]}
                       for name, net in det.components()],
        "meta": extra or {},
    }


def _config_from(d: dict) -> model.DetectorConfig:
    known = {f.name for f in fields(model.DetectorConfig)}
    unknown = set(d) - known
    if unknown:
        raise ModelFormatError(f"unknown config fields {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return model.DetectorConfig(**kw)


def _rebuild(header: dict, arrays) -> model.Detector:
    """Assemble a detector from a header and an iterator of (shape -> array) reads."""
    try:
        config = _config_from(header["config"])
        comps = header["components"]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from None
    template = model.init_detector(config, 0)
    expected = [name for name, _ in template.components()]
    if [c["name"] for c in comps] != expected:
        raise ModelFormatError(f"components {[c['name'] for c in comps]} != {expected}")
    nets = []
    for comp in comps:
        blocks = []
        for layer in comp["layers"]:
            spec = LayerSpec(**layer)
            w = arrays(spec.weight_shape)
            b = arrays((spec.n_out,))
            blocks.append(Block(spec, w, b))
        nets.append(NetworkParams(blocks))
    for (name, tnet), net in zip(template.components(), nets):
        if tnet.arch != net.arch:
            raise ModelFormatError(f"component {name} architecture does not match its config")
    return template.with_components(nets)


def save_binary(path: str | os.PathLike, det: model.Detector, extra: dict | None = None) -> None:
    head = json.dumps(header_for(det, extra), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for _, net in det.components():
            for arr in net.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_binary(path: str | os.PathLike) -> tuple[model.Detector, dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ModelFormatError(f"{path}: file too short for a model header")
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (magic {magic!r})")
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header: {exc}") from None
    payload = memoryview(data)[start + n:]
    pos = 0

    def read(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(payload):
            raise ModelFormatError(f"{path}: parameter payload truncated")
        arr = np.frombuffer(payload[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
        return arr

    det = _rebuild(header, read)
    if pos != len(payload):
        raise ModelFormatError(f"{path}: {len(payload) - pos} trailing bytes after parameters")
    return det, header


def save_json(path: str | os.PathLike, det: model.Detector, extra: dict | None = None) -> None:
    doc = header_for(det, extra)
    doc["params"] = [[arr.tolist() for arr in (b.weight, b.bias)]
                     for _, net in det.components() for b in net.blocks]
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_json(path: str | os.PathLike) -> tuple[model.Detector, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        params = iter(a for pair in doc.pop("params") for a in pair)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: not a JSON model file: {exc}") from None

    def read(shape):
        try:
            arr = np.asarray(next(params), dtype=np.float64)
        except StopIteration:
            raise ModelFormatError(f"{path}: too few parameter arrays") from None
        if arr.shape != tuple(shape):
            raise ModelFormatError(f"{path}: array shape {arr.shape} != {tuple(shape)}")
        return arr

    det = _rebuild(doc, read)
    if next(params, None) is not None:
        raise ModelFormatError(f"{path}: extra parameter arrays")
    return det, doc


def save_model(path: str | os.PathLike, det: model.Detector, extra: dict | None = None) -> None:
    """Binary unless the path ends in ``.json``."""
    if str(path).endswith(".json"):
        save_json(path, det, extra)
    else:
        save_binary(path, det, extra)


def load_model(path: str | os.PathLike) -> tuple[model.Detector, dict]:
    with open(path, "rb") as fh:
        start = fh.read(4)
    if start == MAGIC:
        return load_binary(path)
    return load_json(path)


def detectors_equal(a: model.Detector, b: model.Detector) -> bool:
    """Bit-exact equality of configuration and every parameter."""
    if a.config != b.config or a.head.variant != b.head.variant:
        return False
    ca, cb = a.components(), b.components()
    return len(ca) == len(cb) and all(na == nb and pa.equals(pb) for (na, pa), (nb, pb) in zip(ca, cb))


__all__ = ["MAGIC", "VERSION", "ModelFormatError", "save_model", "load_model",
           "save_binary", "load_binary", "save_json", "load_json", "detectors_equal", "header_for"]
