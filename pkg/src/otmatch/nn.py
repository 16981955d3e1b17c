"""Small dense network substrate with hand-written backpropagation.

Everything runs in float64. A network is a stack of extractor layers
(dense or conv, each followed by ReLU or identity) producing a feature
vector, then a bias-free linear head ``W`` of shape ``(feature_dim, K)``
whose column ``k`` is the class vector ``w_k``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ParameterError, StateError

__all__ = [
    "Layer",
    "ModelParams",
    "TeacherParams",
    "OptimizerState",
    "ForwardCache",
    "softmax",
    "init_mlp",
    "init_conv_net",
    "forward",
    "forward_batch",
    "backward",
    "sgd_step",
    "cosine_lr",
    "ema_update",
    "init_optimizer",
]

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    """One extractor layer.

    Dense layers hold ``weight`` of shape ``(d_in, d_out)``. Conv layers hold
    ``weight`` of shape ``(filters, channels, kh, kw)`` and consume inputs of
    shape ``in_shape = (channels, H, W)``; their output is flattened for the
    next dense layer.
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    in_shape: tuple[int, int, int] | None = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
                raise DimensionError("dense layer needs weight (d_in, d_out) and bias (d_out,)")
        else:
            if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
                raise DimensionError("conv layer needs weight (F, C, kh, kw) and bias (F,)")
            if self.in_shape is None or self.in_shape[0] != self.weight.shape[1]:
                raise DimensionError("conv layer in_shape must start with the channel count")

    @property
    def out_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.weight.shape[1],)
        f, _, kh, kw = self.weight.shape
        _, h, w = self.in_shape
        return (f, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    @property
    def in_size(self) -> int:
        if self.kind == "dense":
            return self.weight.shape[0]
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass
class ModelParams:
    layers: list[Layer]
    head: np.ndarray
    version: int = 0

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_size != nxt.in_size:
                raise DimensionError(
                    f"layer output {prev.out_size} does not feed layer input {nxt.in_size}"
                )
        if self.head.ndim != 2:
            raise DimensionError("head must be a (feature_dim, K) matrix")
        if self.layers and self.layers[-1].out_size != self.head.shape[0]:
            raise DimensionError("last extractor layer does not match the head")

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.head.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (layer weights/biases, then head)."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        out.append(self.head)
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "ModelParams":
        return self.rebuild([np.zeros_like(a) for a in self.arrays()])

    def rebuild(self, arrays) -> "ModelParams":
        """Same layout as ``self``, holding ``arrays`` (no copies, version 0)."""
        layers = [
            Layer(l.kind, arrays[2 * i], arrays[2 * i + 1], l.activation, l.in_shape, l.stride)
            for i, l in enumerate(self.layers)
        ]
        return ModelParams(layers, arrays[-1])

    def with_arrays(self, arrays) -> "ModelParams":
        """Structural copy of ``self`` holding ``arrays`` (same order as :meth:`arrays`)."""
        twin = self.copy()
        targets = twin.arrays()
        if len(arrays) != len(targets):
            raise DimensionError("array count does not match the parameter layout")
        for dst, src in zip(targets, arrays):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise DimensionError(f"shape {src.shape} != {dst.shape}")
            dst[...] = src
        return twin

    def check_finite(self):
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite parameter value")


@dataclass
class TeacherParams:
    """EMA copy of the student; never touched by gradients."""

    params: ModelParams
    ema_decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ParameterError("ema_decay must lie in [0, 1]")

    @classmethod
    def from_student(cls, student: ModelParams, ema_decay: float = 0.999) -> "TeacherParams":
        return cls(student.copy(), ema_decay)


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    base_lr: float
    total_steps: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    t: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ParameterError("base_lr must be positive")
        if self.total_steps <= 0:
            raise ParameterError("total_steps must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be nonnegative")


def init_optimizer(params: ModelParams, base_lr=0.03, total_steps=20_000,
                   momentum=0.9, weight_decay=5e-4) -> OptimizerState:
    return OptimizerState(
        velocity=[np.zeros_like(a) for a in params.arrays()],
        base_lr=base_lr,
        total_steps=total_steps,
        momentum=momentum,
        weight_decay=weight_decay,
    )


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_mlp(in_dim: int, num_classes: int, hidden=(64, 64), rng=None,
             head_scale: float = 0.1) -> ModelParams:
    """ReLU MLP extractor with ``len(hidden)`` layers plus a linear head."""
    rng = np.random.default_rng(rng)
    layers = []
    d = in_dim
    for width in hidden:
        layers.append(Layer("dense", _he(rng, (d, width), d), np.zeros(width), "relu"))
        d = width
    head = rng.normal(0.0, head_scale / math.sqrt(d), size=(d, num_classes))
    return ModelParams(layers, head)


def init_conv_net(in_shape, num_classes: int, filters=8, kernel=5, stride=2,
                  hidden=64, rng=None, head_scale: float = 0.1) -> ModelParams:
    """One conv+ReLU layer, one dense+ReLU layer, linear head."""
    rng = np.random.default_rng(rng)
    c, _, _ = in_shape
    conv = Layer(
        "conv",
        _he(rng, (filters, c, kernel, kernel), c * kernel * kernel),
        np.zeros(filters),
        "relu",
        in_shape=tuple(in_shape),
        stride=stride,
    )
    d = conv.out_size
    dense = Layer("dense", _he(rng, (d, hidden), d), np.zeros(hidden), "relu")
    head = rng.normal(0.0, head_scale / math.sqrt(hidden), size=(hidden, num_classes))
    return ModelParams([conv, dense], head)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature``."""
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    temperature: float
    version: int
    extra: dict = field(default_factory=dict)


def _conv_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    # x: (n, C, H, W) -> (n, F, Ho, Wo)
    _, _, kh, kw = layer.weight.shape
    s = layer.stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    return np.einsum("nchwij,fcij->nfhw", win, layer.weight, optimize=True) + layer.bias[None, :, None, None]


def _conv_backward(layer: Layer, x: np.ndarray, g: np.ndarray):
    _, _, kh, kw = layer.weight.shape
    s = layer.stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    dw = np.einsum("nchwij,nfhw->fcij", win, g, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                "nfhw,fc->nchw", g, layer.weight[:, :, i, j], optimize=True
            )
    return dw, db, dx


def forward_batch(params: ModelParams, X, temperature: float = 1.0) -> ForwardCache:
    """Forward a batch, keeping the activations needed by :func:`backward`."""
    if temperature <= 0:
        raise ParameterError("temperature must be positive")
    h = np.asarray(X, dtype=np.float64)
    n = h.shape[0]
    inputs, preacts = [], []
    for layer in params.layers:
        if layer.kind == "conv":
            if h.size != n * layer.in_size:
                raise DimensionError("input does not match the conv layer's in_shape")
            h = h.reshape((n,) + layer.in_shape)
            inputs.append(h)
            z = _conv_forward(layer, h)
        else:
            h = h.reshape(n, -1)
            if h.shape[1] != layer.weight.shape[0]:
                raise DimensionError(
                    f"input dimension {h.shape[1]} does not match layer ({layer.weight.shape[0]})"
                )
            inputs.append(h)
            z = h @ layer.weight + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    features = h.reshape(n, -1)
    if features.shape[1] != params.head.shape[0]:
        raise DimensionError(
            f"feature dimension {features.shape[1]} does not match head ({params.head.shape[0]})"
        )
    logits = features @ params.head
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in forward pass")
    probs = softmax(logits, temperature)
    return ForwardCache(inputs, preacts, features, logits, probs, temperature, params.version)


def forward(params: ModelParams, x, temperature: float = 1.0):
    """Forward one example (or a batch); returns ``(features, logits, probs)``."""
    x = np.asarray(x, dtype=np.float64)
    first = params.layers[0] if params.layers else None
    if first is not None and first.kind == "conv":
        single = x.size == first.in_size
    else:
        single = x.ndim == 1
    cache = forward_batch(params, x[None] if single else x, temperature)
    if single:
        return cache.features[0], cache.logits[0], cache.probs[0]
    return cache.features, cache.logits, cache.probs


def backward(params: ModelParams, cache: ForwardCache, dlogits):
    """Backpropagate ``dL/dlogits`` (raw, untempered logits) through the network.

    Returns ``(grads, dfeatures)`` where ``grads`` is a :class:`ModelParams`
    with the same layout as ``params``.
    """
    if cache.version != params.version:
        raise StateError("forward cache was built for a different parameter version")
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != cache.logits.shape:
        raise DimensionError(f"dlogits shape {g.shape} != logits shape {cache.logits.shape}")
    out = [None] * (2 * len(params.layers)) + [cache.features.T @ g]
    dfeat = g @ params.head.T
    h_grad = dfeat
    n = g.shape[0]
    for idx in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[idx]
        z = cache.preacts[idx]
        h_grad = h_grad.reshape(z.shape)
        if layer.activation == "relu":
            h_grad = h_grad * (z > 0)
        x = cache.inputs[idx]
        if layer.kind == "dense":
            out[2 * idx] = x.T @ h_grad
            out[2 * idx + 1] = h_grad.sum(axis=0)
            if idx > 0:
                h_grad = h_grad @ layer.weight.T
        else:
            dw, db, dx = _conv_backward(layer, x, h_grad)
            out[2 * idx] = dw
            out[2 * idx + 1] = db
            h_grad = dx
        if idx > 0:
            h_grad = h_grad.reshape(n, -1) if params.layers[idx - 1].kind == "dense" else h_grad
    return params.rebuild(out), dfeat


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` at ``t=0`` to 0 at ``t=total``."""
    if total <= 0:
        raise ParameterError("total must be positive")
    if t < 0 or t > total:
        raise ParameterError(f"step {t} outside [0, {total}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params: ModelParams, opt: OptimizerState, grads: ModelParams):
    """One SGD-with-momentum step, in place.

    ``v <- momentum*v + (g + wd*p)``; ``p <- p - lr(t)*v``.
    """
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(gs) or len(ps) != len(opt.velocity):
        raise DimensionError("gradient layout does not match parameters")
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    lr = cosine_lr(opt.t, opt.total_steps, opt.base_lr)
    for p, g, v in zip(ps, gs, opt.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= opt.momentum
        v += g + opt.weight_decay * p
        p -= lr * v
    opt.t += 1
    params.version += 1
    return params, opt


def ema_update(teacher: TeacherParams, student: ModelParams) -> TeacherParams:
    """``teacher <- decay*teacher + (1-decay)*student``, in place."""
    d = teacher.ema_decay
    ts, ss = teacher.params.arrays(), student.arrays()
    if len(ts) != len(ss):
        raise DimensionError("teacher and student layouts differ")
    for t, s in zip(ts, ss):
        if t.shape != s.shape:
            raise DimensionError(f"teacher shape {t.shape} != student shape {s.shape}")
    for t, s in zip(ts, ss):
        t *= d
        t += (1.0 - d) * s
    teacher.params.version += 1
    return teacher
