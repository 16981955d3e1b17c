"""Training losses and their gradients with respect to student logits.

Every ``*_grad`` function returns ``dL/dz`` for the logits ``z`` that were
fed through the softmax to produce the student probabilities. Teacher
quantities (probabilities, pseudo-labels, masks, threshold state, cost
matrix) are constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

__all__ = [
    "LOG_FLOOR",
    "HIST_SMOOTHING",
    "LossWeights",
    "BatchPredictions",
    "cross_entropy",
    "loss_sup",
    "loss_sup_grad",
    "loss_un1",
    "loss_un1_grad",
    "fairness_stats",
    "loss_un2",
    "loss_un2_grad",
    "loss_un3",
    "loss_un3_per_sample",
    "loss_un3_grad",
    "loss_un3_with_grad",
    "loss_total",
    "softmax_vjp",
]

LOG_FLOOR = 1e-12
HIST_SMOOTHING = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 0.001
    lam: float = 0.5

    def __post_init__(self):
        if min(self.w1, self.w2, self.lam) < 0:
            raise ParameterError("loss weights must be nonnegative")


@dataclass
class BatchPredictions:
    """Teacher probabilities on weak views and student probabilities on strong views."""

    q: np.ndarray
    Q: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.q.shape != self.Q.shape or self.q.ndim != 2:
            raise DimensionError("teacher and student probabilities must share an (n, K) shape")
        if self.mask is None:
            self.mask = np.ones(self.q.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.q.shape[0],):
            raise DimensionError("one mask bit per sample required")
        self._labels = self.q.argmax(axis=1)

    @property
    def pseudo_labels(self) -> np.ndarray:
        return self._labels

    @property
    def size(self) -> int:
        return self.q.shape[0]


def softmax_vjp(probs, upstream):
    """Pull ``dL/dprobs`` back through the softmax: ``p * (u - <u, p>)``."""
    return probs * (upstream - np.sum(upstream * probs, axis=1, keepdims=True))


def cross_entropy(labels, probs) -> np.ndarray:
    """Per-sample ``-log max(p[y], 1e-12)``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (probs.shape[0],):
        raise DimensionError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ParameterError("label outside the class range")
    py = probs[np.arange(labels.size), labels]
    return -np.log(np.maximum(py, LOG_FLOOR))


def _ce_grad(labels, probs, weights):
    # d/dz of -log max(p_y, floor): p - e_y where p_y > floor, else 0
    g = probs.copy()
    rows = np.arange(labels.size)
    g[rows, labels] -= 1.0
    live = probs[rows, labels] > LOG_FLOOR
    return g * (weights * live)[:, None]


def loss_sup(labels, probs) -> float:
    return float(cross_entropy(labels, probs).mean())


def loss_sup_grad(labels, probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = probs.shape[0]
    return _ce_grad(labels, probs, np.full(n, 1.0 / n))


def loss_un1(batch: BatchPredictions) -> float:
    """Masked CE between hard pseudo-labels and student probabilities, mean over the batch."""
    ce = cross_entropy(batch.pseudo_labels, batch.Q)
    return float(np.sum(ce * batch.mask) / batch.size)


def loss_un1_grad(batch: BatchPredictions) -> np.ndarray:
    return _ce_grad(batch.pseudo_labels, batch.Q, batch.mask / batch.size)


def fairness_stats(batch: BatchPredictions):
    """``(p_bar, h_bar)``: masked student-probability sum and hard-label histogram, both over the batch size."""
    n, K = batch.Q.shape
    p_bar = (batch.Q * batch.mask[:, None]).sum(axis=0) / n
    h_bar = np.bincount(batch.Q.argmax(axis=1)[batch.mask], minlength=K) / n
    return p_bar, h_bar


def _sum_norm(x):
    return x / x.sum()


def _fairness_parts(p_bar, h_bar, state):
    a = _sum_norm(state.p_tilde / (state.h_tilde + HIST_SMOOTHING))
    r = p_bar / (h_bar + HIST_SMOOTHING)
    return a, r


def loss_un2(p_bar, h_bar, state) -> float:
    """``-H(SumNorm(p~/h~), SumNorm(p_bar/h_bar)) = sum a log b``.

    Zero when no sample passed the mask.
    """
    p_bar = np.asarray(p_bar, dtype=np.float64)
    h_bar = np.asarray(h_bar, dtype=np.float64)
    if not p_bar.sum() > 0:
        return 0.0
    a, r = _fairness_parts(p_bar, h_bar, state)
    b = _sum_norm(r)
    return float(np.sum(a * np.log(np.maximum(b, LOG_FLOOR))))


def loss_un2_grad(batch: BatchPredictions, state) -> np.ndarray:
    n = batch.size
    p_bar, h_bar = fairness_stats(batch)
    if not p_bar.sum() > 0:
        return np.zeros_like(batch.Q)
    a, r = _fairness_parts(p_bar, h_bar, state)
    S = r.sum()
    b = r / S
    dL_db = np.where(b > LOG_FLOOR, a / np.maximum(b, LOG_FLOOR), 0.0)
    dL_dr = (dL_db - np.dot(dL_db, b)) / S
    dL_dp = dL_dr / (h_bar + HIST_SMOOTHING)
    upstream = np.broadcast_to(dL_dp, batch.Q.shape) * (batch.mask / n)[:, None]
    return softmax_vjp(batch.Q, upstream)


def _cost_array(C):
    return C.C if hasattr(C, "C") else np.asarray(C, dtype=np.float64)


def loss_un3_per_sample(batch: BatchPredictions, C) -> np.ndarray:
    """Unmasked per-sample transport cost from the pseudo-label Dirac to ``Q``.

    ``sum_k C[q_hat, k] * Q[k]``, the O(K) closed form for a Dirac source.
    """
    C = _cost_array(C)
    if C.shape != (batch.Q.shape[1],) * 2:
        raise DimensionError("cost matrix does not match the class count")
    return np.sum(C[batch.pseudo_labels] * batch.Q, axis=1)


def loss_un3(batch: BatchPredictions, C, masks=None) -> float:
    m = batch.mask if masks is None else np.asarray(masks, dtype=bool)
    return float(np.sum(loss_un3_per_sample(batch, C) * m) / batch.size)


def loss_un3_grad(batch: BatchPredictions, C, masks=None) -> np.ndarray:
    m = batch.mask if masks is None else np.asarray(masks, dtype=bool)
    rows = _cost_array(C)[batch.pseudo_labels]
    return softmax_vjp(batch.Q, rows * (m / batch.size)[:, None])


def loss_un3_with_grad(batch: BatchPredictions, C, masks=None):
    """``(loss_un3, loss_un3_grad)`` sharing the gathered cost rows."""
    m = batch.mask if masks is None else np.asarray(masks, dtype=bool)
    C = _cost_array(C)
    if C.shape != (batch.Q.shape[1],) * 2:
        raise DimensionError("cost matrix does not match the class count")
    rows = C[batch.pseudo_labels]
    weights = m / batch.size
    value = float(np.sum(rows * batch.Q, axis=1) @ weights)
    return value, softmax_vjp(batch.Q, rows * weights[:, None])


def loss_total(components, weights: LossWeights) -> float:
    """``L_sup + w1 L_un1 + w2 L_un2 + lam L_un3``.

    ``components`` maps ``sup``, ``un1``, ``un2``, ``un3`` to values (or to
    gradient arrays; the combination is linear either way). Missing
    components count as zero.
    """
    total = components.get("sup", 0.0)
    total = total + weights.w1 * components.get("un1", 0.0)
    total = total + weights.w2 * components.get("un2", 0.0)
    if weights.lam:
        total = total + weights.lam * components.get("un3", 0.0)
    return total
