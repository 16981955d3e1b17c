"""Versioned ``.npz`` checkpoints that round-trip float64 state bit-exactly.

Arrays go into the archive as-is; everything else (layer layout, step
counters, RNG state, config) is a JSON document stored under ``meta``.
"""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import FormatError
from .nn import Layer, ModelParams

__all__ = ["FORMAT_VERSION", "save_arrays", "load_arrays", "params_layout", "params_from_layout"]

FORMAT_VERSION = 1


def params_layout(params: ModelParams) -> list[dict]:
    return [
        {
            "kind": layer.kind,
            "activation": layer.activation,
            "in_shape": list(layer.in_shape) if layer.in_shape else None,
            "stride": layer.stride,
        }
        for layer in params.layers
    ]


def params_from_layout(layout, arrays, version=0) -> ModelParams:
    if len(arrays) != 2 * len(layout) + 1:
        raise FormatError("array count does not match the layer layout")
    layers = []
    for i, spec in enumerate(layout):
        layers.append(Layer(
            spec["kind"],
            np.array(arrays[2 * i], dtype=np.float64),
            np.array(arrays[2 * i + 1], dtype=np.float64),
            spec["activation"],
            tuple(spec["in_shape"]) if spec["in_shape"] else None,
            spec["stride"],
        ))
    return ModelParams(layers, np.array(arrays[-1], dtype=np.float64), version)


def save_arrays(path, arrays: dict, meta: dict):
    """Atomically write ``arrays`` plus JSON ``meta`` (temp file, then rename)."""
    meta = dict(meta, format_version=FORMAT_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["meta"] = np.array(json.dumps(meta, sort_keys=True))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path):
    """Return ``(arrays, meta)`` from a file written by :func:`save_arrays`."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if "meta" not in arrays:
        raise FormatError(f"{path}: missing metadata")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return arrays, meta
