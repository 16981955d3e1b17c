"""Inter-class cost matrix bootstrapped from the classification head.

The cost starts as the discrete metric ``1 - I`` and is smoothed towards
``1 - <v_i, v_j>`` with ``v_k = w_k / ||w_k||``, the normalised head columns.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, DimensionError, ParameterError
from .nn import softmax

__all__ = [
    "CostMatrix",
    "MetricReport",
    "Dendrogram",
    "init_discrete",
    "head_directions",
    "ema_update_cost",
    "covariance_update_cost",
    "gradient_score_U",
    "expected_cost_C",
    "validate_metric",
    "hierarchical_cluster",
    "export_cost_csv",
    "load_cost_csv",
]


@dataclass
class CostMatrix:
    C: np.ndarray
    momentum: float = 0.999
    metric_valid: bool = True

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2 or self.C.shape[0] != self.C.shape[1]:
            raise DimensionError("cost matrix must be square")
        if not 0.0 <= self.momentum <= 1.0:
            raise ParameterError("momentum must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.C.shape[0]


def init_discrete(K: int, momentum: float = 0.999) -> CostMatrix:
    if K < 2:
        raise ParameterError("need at least two classes")
    return CostMatrix(1.0 - np.eye(K), momentum, True)


def head_directions(head) -> np.ndarray:
    """Unit-normalised head columns, shape ``(feature_dim, K)``."""
    W = np.asarray(head, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateError("head has a zero-norm or non-finite column")
    return W / norms


def _blend(cost: CostMatrix, target: np.ndarray) -> CostMatrix:
    m = cost.momentum
    new = m * cost.C + (1.0 - m) * target
    # symmetrising the blend also symmetrises the target, since C already is
    new = 0.5 * (new + new.T)
    np.minimum(np.maximum(new, 0.0, out=new), 2.0, out=new)
    new.flat[::new.shape[0] + 1] = 0.0
    return CostMatrix(new, m, cost.metric_valid)


def ema_update_cost(cost: CostMatrix, head) -> CostMatrix:
    """``C <- m*C + (1-m)*(1 - V^T V)`` for unit head directions ``V``."""
    W = np.asarray(head, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != cost.num_classes:
        raise DimensionError("head class count does not match the cost matrix")
    sq = np.einsum("ij,ij->j", W, W)
    if not (sq.min() > 0.0 and sq.max() < np.inf):
        raise DegenerateError("head has a zero-norm or non-finite column")
    inv = 1.0 / np.sqrt(sq)
    return _blend(cost, 1.0 - (W.T @ W) * np.outer(inv, inv))


def covariance_update_cost(cost: CostMatrix, probs) -> CostMatrix:
    """Ablation: smooth towards ``1 - corr`` of the batch's predicted probabilities.

    Classes whose probabilities never vary in the batch keep a target of 1
    against every other class.
    """
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != cost.num_classes:
        raise DimensionError("probabilities must be (n, K)")
    centered = P - P.mean(axis=0)
    cov = centered.T @ centered / max(P.shape[0] - 1, 1)
    sd = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(sd, sd)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    return _blend(cost, 1.0 - np.clip(corr, -1.0, 1.0))


def gradient_score_U(x, head, k: int, eps: float = 1.0) -> float:
    """Progress of feature ``x`` along ``w_k`` under one gradient step of CE(k).

    Computed as ``<-dCE/dx, w_k>`` from the analytic feature gradient
    ``W (p - e_k)``.
    """
    W = np.asarray(head, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (W.shape[0],):
        raise DimensionError("feature does not match head")
    p = softmax(x @ W, eps)
    delta = p.copy()
    delta[k] -= 1.0
    grad_x = W @ delta
    return float(-grad_x @ W[:, k])


def expected_cost_C(x, head, cost, k: int, eps: float = 1.0) -> float:
    """``sum_k' C[k, k'] p_k'(x)``."""
    C = cost.C if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    W = np.asarray(head, dtype=np.float64)
    p = softmax(np.asarray(x, dtype=np.float64) @ W, eps)
    return float(C[k] @ p)


@dataclass
class MetricReport:
    valid: bool
    diagonal: list = field(default_factory=list)
    asymmetric: list = field(default_factory=list)
    negative: list = field(default_factory=list)
    triangle: list = field(default_factory=list)

    def summary(self) -> str:
        if self.valid:
            return "metric"
        parts = []
        for name in ("diagonal", "asymmetric", "negative", "triangle"):
            items = getattr(self, name)
            if items:
                parts.append(f"{len(items)} {name}")
        return "violations: " + ", ".join(parts)


def validate_metric(cost, tol: float = 1e-9) -> MetricReport:
    """Check zero diagonal, symmetry, nonnegativity and every triangle inequality.

    Triangle violations are reported as ``(i, j, k, excess)`` meaning
    ``C[i,k] > C[i,j] + C[j,k] + tol``. Sets ``metric_valid`` on a
    :class:`CostMatrix` argument.
    """
    C = cost.C if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    diag = [(int(i), float(C[i, i])) for i in np.flatnonzero(np.abs(np.diag(C)) > tol)]
    asym = [(int(i), int(j), float(C[i, j] - C[j, i]))
            for i, j in np.argwhere(np.abs(C - C.T) > tol) if i < j]
    neg = [(int(i), int(j), float(C[i, j])) for i, j in np.argwhere(C < -tol)]
    # excess[i, j, k] = C[i,k] - C[i,j] - C[j,k]
    excess = C[:, None, :] - C[:, :, None] - C[None, :, :]
    tri = []
    for i, j, k in np.argwhere(excess > tol):
        if len({int(i), int(j), int(k)}) == 3:
            tri.append((int(i), int(j), int(k), float(excess[i, j, k])))
    report = MetricReport(not (diag or asym or neg or tri), diag, asym, neg, tri)
    if isinstance(cost, CostMatrix):
        cost.metric_valid = report.valid
    return report


@dataclass
class Dendrogram:
    """Agglomerative merge history.

    ``merges`` rows are ``(left_id, right_id, height, size)`` in the same
    convention as a scipy linkage matrix: leaves are ``0..K-1`` and the
    cluster formed by merge ``r`` gets id ``K + r``.
    """

    merges: list[tuple[int, int, float, int]]
    num_leaves: int
    labels: list[str] | None = None

    @property
    def heights(self) -> np.ndarray:
        return np.array([h for _, _, h, _ in self.merges])

    def is_monotone(self) -> bool:
        h = self.heights
        return bool(np.all(np.diff(h) >= 0))

    def linkage_matrix(self) -> np.ndarray:
        return np.array(self.merges, dtype=np.float64)

    def members(self, node: int) -> list[int]:
        if node < self.num_leaves:
            return [node]
        left, right, _, _ = self.merges[node - self.num_leaves]
        return sorted(self.members(left) + self.members(right))

    def to_tree(self) -> dict:
        """Nested ``{left, right, height, members}`` dict rooted at the last merge."""

        def build(node):
            if node < self.num_leaves:
                leaf = {"id": node, "members": [node], "height": 0.0}
                if self.labels:
                    leaf["label"] = self.labels[node]
                return leaf
            left, right, height, _ = self.merges[node - self.num_leaves]
            return {
                "id": node,
                "left": build(left),
                "right": build(right),
                "height": height,
                "members": self.members(node),
            }

        if not self.merges:
            return build(0)
        return build(self.num_leaves + len(self.merges) - 1)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_tree(), **kwargs)


def hierarchical_cluster(cost, labels=None) -> Dendrogram:
    """Average-linkage clustering of the classes using the cost as dissimilarity.

    Ties go to the pair of cluster ids ``(a, b)``, ``a < b``, that is smallest
    lexicographically.
    """
    C = cost.C if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    K = C.shape[0]
    if C.shape != (K, K):
        raise DimensionError("cost must be square")
    if labels is not None and len(labels) != K:
        raise DimensionError("one label per class required")
    active = {i: [i] for i in range(K)}
    merges = []
    next_id = K
    while len(active) > 1:
        ids = sorted(active)
        best = None
        for ai, a in enumerate(ids):
            for b in ids[ai + 1:]:
                d = C[np.ix_(active[a], active[b])].mean()
                if best is None or d < best[0]:
                    best = (d, a, b)
        d, a, b = best
        members = active.pop(a) + active.pop(b)
        active[next_id] = members
        merges.append((a, b, float(d), len(members)))
        next_id += 1
    return Dendrogram(merges, K, list(labels) if labels is not None else None)


def export_cost_csv(cost, path, labels=None):
    C = cost.C if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    labels = list(labels) if labels is not None else [f"class_{i}" for i in range(C.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + labels)
        for name, row in zip(labels, C):
            w.writerow([name] + [repr(float(v)) for v in row])


def load_cost_csv(path):
    """Inverse of :func:`export_cost_csv`; returns ``(C, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    C = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return C, labels
