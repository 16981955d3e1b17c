"""Self-adaptive confidence thresholds.

The state tracks three EMAs over teacher predictions on weak views: the mean
max-confidence (global threshold), the mean class-probability vector, and
the histogram of hard pseudo-labels. Per-class thresholds rescale the global
one by the max-normalised class-probability EMA.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimensionError, ParameterError

__all__ = ["ThresholdState", "init_state", "update_state", "local_thresholds", "mask"]


@dataclass
class ThresholdState:
    tau: float
    p_tilde: np.ndarray
    h_tilde: np.ndarray
    momentum: float = 0.999

    def __post_init__(self):
        self.p_tilde = np.asarray(self.p_tilde, dtype=np.float64)
        self.h_tilde = np.asarray(self.h_tilde, dtype=np.float64)
        if self.p_tilde.shape != self.h_tilde.shape or self.p_tilde.ndim != 1:
            raise DimensionError("p_tilde and h_tilde must be equal-length vectors")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return self.p_tilde.size


def init_state(K: int, momentum: float = 0.999) -> ThresholdState:
    """Zero-information start: ``tau = 1/K`` and uniform class vectors."""
    if K < 2:
        raise ParameterError("need at least two classes")
    u = np.full(K, 1.0 / K)
    return ThresholdState(1.0 / K, u, u.copy(), momentum)


def update_state(state: ThresholdState, teacher_probs) -> ThresholdState:
    q = np.asarray(teacher_probs, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0:
        raise ParameterError("teacher_probs must be a nonempty (n, K) batch")
    if q.shape[1] != state.num_classes:
        raise DimensionError("class count does not match the threshold state")
    m = state.momentum
    n = q.shape[0]
    tau = m * state.tau + (1.0 - m) * q.max(axis=1).mean()
    p = m * state.p_tilde + (1.0 - m) * q.mean(axis=0)
    hist = np.bincount(q.argmax(axis=1), minlength=state.num_classes) / n
    h = m * state.h_tilde + (1.0 - m) * hist
    return ThresholdState(float(tau), p, h, m)


def local_thresholds(state: ThresholdState) -> np.ndarray:
    top = state.p_tilde.max()
    if not top > 0:
        raise DegenerateError("class-probability EMA is all zero")
    out = state.p_tilde / top * state.tau
    out[state.p_tilde == top] = state.tau
    return out


def mask(q, tau_vec) -> np.ndarray:
    """True where the max confidence strictly exceeds its argmax class's threshold."""
    q = np.asarray(q, dtype=np.float64)
    tau_vec = np.asarray(tau_vec, dtype=np.float64)
    idx = q.argmax(axis=-1)
    return q.max(axis=-1) > tau_vec[idx]
