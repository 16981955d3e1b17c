"""Discrete optimal transport.

Conventions: ``C[i, j]`` is the cost of moving one unit of mass from source
atom ``i`` to target atom ``j``; a plan ``T`` has ``T.sum(1) == mu`` and,
when a target marginal is given, ``T.sum(0) == nu``.

The entropy of a plan is ``H(T) = sum((1 - log T) * T)`` with ``0 log 0 = 0``,
so the entropic objective is ``<C, T> - eps * H(T)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import (
    ConvergenceError,
    DimensionError,
    MarginalError,
    ParameterError,
    PreconditionError,
    ScaleError,
    SupportError,
)

__all__ = [
    "OTConfig",
    "TransportPlan",
    "exact_ot",
    "sinkhorn",
    "closed_form_row_plan",
    "fast_dirac_ot",
    "generalized_kl",
    "wasserstein_to_dirac_argmin",
    "dirac_sq_objective",
    "plan_entropy",
    "entropic_objective",
]

ORACLE_MAX_SIZE = 16


@dataclass(frozen=True)
class OTConfig:
    epsilon: float = 0.01
    max_iterations: int = 200_000
    marginal_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.max_iterations <= 0:
            raise ParameterError("max_iterations must be positive")
        if not self.marginal_tolerance > 0:
            raise ParameterError("marginal_tolerance must be positive")


@dataclass
class TransportPlan:
    matrix: np.ndarray
    mu: np.ndarray
    nu: np.ndarray | None = None

    def row_residual(self) -> float:
        return float(np.abs(self.matrix.sum(axis=1) - self.mu).max())

    def col_residual(self) -> float:
        if self.nu is None:
            return 0.0
        return float(np.abs(self.matrix.sum(axis=0) - self.nu).max())

    def marginal_residual(self) -> float:
        return max(self.row_residual(), self.col_residual())

    def cost(self, C) -> float:
        return float(np.sum(np.asarray(C, dtype=np.float64) * self.matrix))


def _as_measure(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DimensionError(f"{name} must be a nonempty vector")
    if not np.all(np.isfinite(x)):
        raise ParameterError(f"{name} has non-finite entries")
    if np.any(x < 0):
        raise MarginalError(f"{name} has negative entries")
    return x


def _check_problem(mu, nu, C):
    mu = _as_measure(mu, "mu")
    nu = _as_measure(nu, "nu")
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (mu.size, nu.size):
        raise DimensionError(f"cost shape {C.shape} != ({mu.size}, {nu.size})")
    if not np.all(np.isfinite(C)):
        raise ParameterError("cost has non-finite entries")
    if abs(mu.sum() - nu.sum()) > 1e-9:
        raise MarginalError(f"marginal masses differ: {mu.sum()!r} vs {nu.sum()!r}")
    return mu, nu, C


def _polish_vertex(T, mu, nu):
    """Re-solve the marginal equations on the LP solution's support.

    An optimal basic solution is determined by its support, so solving the
    equality system restricted to it removes the solver's ~1e-9 slack.
    """
    m, n = T.shape
    support = np.argwhere(T > 1e-12)
    A = np.zeros((m + n, len(support)))
    for col, (i, j) in enumerate(support):
        A[i, col] = 1.0
        A[m + j, col] = 1.0
    b = np.concatenate([mu, nu])
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.any(x < -1e-12) or np.abs(A @ x - b).max() > 1e-12:
        return T
    polished = np.zeros_like(T)
    polished[support[:, 0], support[:, 1]] = np.maximum(x, 0.0)
    return polished


def exact_ot(mu, nu, C):
    """Exact Kantorovich transport by linear programming (small instances only).

    Returns ``(distance, plan)``.
    """
    mu, nu, C = _check_problem(mu, nu, C)
    m, n = C.shape
    if m > ORACLE_MAX_SIZE or n > ORACLE_MAX_SIZE:
        raise ScaleError(f"exact_ot handles at most {ORACLE_MAX_SIZE} atoms per side")
    if np.any(C < 0):
        raise PreconditionError("cost must be nonnegative")
    A_eq = np.zeros((m + n, m * n))
    for i in range(m):
        A_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([mu, nu])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise MarginalError(f"transport LP failed: {res.message}")
    T = _polish_vertex(np.maximum(res.x.reshape(m, n), 0.0), mu, nu)
    plan = TransportPlan(T, mu, nu)
    return plan.cost(C), plan


def _lse(a, axis):
    amax = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - amax).sum(axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def sinkhorn(mu, nu, C, cfg: OTConfig | None = None):
    """Entropic OT by log-domain Sinkhorn iterations.

    Zero-mass atoms are dropped before iterating and come back as zero rows
    or columns of the plan. Passing ``nu=None`` keeps only the row constraint,
    which is solved exactly in one half-step.

    Returns ``(distance, plan)`` with ``distance = <C, T>``.
    """
    cfg = cfg or OTConfig()
    eps = cfg.epsilon
    if nu is None:
        mu = _as_measure(mu, "mu")
        C = np.asarray(C, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != mu.size:
            raise DimensionError("cost rows must match mu")
        # f-update with g = 0; the row constraint is then met exactly.
        logT = -C / eps
        logT = logT - _lse(logT, axis=1)[:, None]
        with np.errstate(divide="ignore"):
            logT = logT + np.log(mu)[:, None]
        T = np.exp(logT)
        plan = TransportPlan(T, mu, None)
        return plan.cost(C), plan

    mu, nu, C = _check_problem(mu, nu, C)
    rows = np.flatnonzero(mu > 0)
    cols = np.flatnonzero(nu > 0)
    a, b = mu[rows], nu[cols]
    M = C[np.ix_(rows, cols)] / eps
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(rows.size)
    g = np.zeros(cols.size)
    residual = np.inf
    for it in range(cfg.max_iterations):
        f = log_a - _lse(g[None, :] - M, axis=1)
        g = log_b - _lse(f[:, None] - M, axis=0)
        if it % 10 == 0 or it == cfg.max_iterations - 1:
            T = np.exp(f[:, None] + g[None, :] - M)
            residual = max(np.abs(T.sum(axis=1) - a).max(), np.abs(T.sum(axis=0) - b).max())
            if residual < cfg.marginal_tolerance:
                break
    else:
        raise ConvergenceError(
            f"sinkhorn did not reach tolerance {cfg.marginal_tolerance} "
            f"in {cfg.max_iterations} iterations (residual {residual:.3e})",
            residual,
        )
    full = np.zeros_like(C)
    full[np.ix_(rows, cols)] = T
    plan = TransportPlan(full, mu, nu)
    return plan.cost(C), plan


def closed_form_row_plan(C, eps: float) -> TransportPlan:
    """Minimiser of ``<C,T> - eps*H(T)`` over plans whose rows each sum to ``1/m``.

    Row ``i`` is ``softmax(-C[i] / eps) / m``.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise DimensionError("cost must be a matrix")
    m = C.shape[0]
    z = -C / eps
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    T = e / e.sum(axis=1, keepdims=True) / m
    return TransportPlan(T, np.full(m, 1.0 / m), None)


def fast_dirac_ot(k: int, nu, C) -> float:
    """Transport cost from the Dirac mass at class ``k`` to ``nu`` in O(K).

    ``C`` is a square cost matrix or any object with ``C`` and
    ``metric_valid`` attributes (a :class:`~otmatch.cost.CostMatrix`).
    """
    if hasattr(C, "metric_valid"):
        if not C.metric_valid:
            raise PreconditionError("cost matrix is flagged as non-metric")
        C = C.C
    C = np.asarray(C, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    K = nu.shape[0]
    if C.shape != (K, K):
        raise DimensionError(f"cost shape {C.shape} does not match K={K}")
    if not 0 <= k < K:
        raise DimensionError(f"class index {k} outside [0, {K})")
    if C[k, k] != 0.0:
        raise PreconditionError("cost diagonal must be zero")
    col = C[:, k]
    total = 0.0
    for i in range(K):
        if i != k:
            total += col[i] * nu[i]
    return float(total)


def generalized_kl(P, Q) -> float:
    """KL divergence between positive measures: ``sum P log(P/Q) - sum P + sum Q``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise DimensionError(f"shapes differ: {P.shape} vs {Q.shape}")
    if np.any(P < 0) or np.any(Q < 0):
        raise ParameterError("measures must be nonnegative")
    if np.any((P > 0) & (Q == 0)):
        raise SupportError("P has mass outside the support of Q")
    pos = P > 0
    return float(np.sum(P[pos] * np.log(P[pos] / Q[pos])) - P.sum() + Q.sum())


def dirac_sq_objective(x: float, samples) -> float:
    """Squared-distance transport cost from ``delta_x`` to the empirical measure."""
    s = np.asarray(samples, dtype=np.float64)
    return float(np.mean((x - s) ** 2))


def wasserstein_to_dirac_argmin(samples) -> float:
    """Location of the Dirac mass closest (squared-l2 transport) to the samples.

    Every sample must ship all its mass to the single atom, so the objective is
    ``mean((x - s_i)^2)``; its unique minimiser is the sample mean.
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ParameterError("need at least one sample")
    return float(s.mean())


def plan_entropy(T) -> float:
    T = np.asarray(T, dtype=np.float64)
    pos = T > 0
    return float(np.sum(T[pos] * (1.0 - np.log(T[pos]))))


def entropic_objective(C, T, eps: float) -> float:
    """``<C, T> - eps * H(T)``."""
    return float(np.sum(np.asarray(C) * np.asarray(T))) - eps * plan_entropy(T)
