"""Balanced entropic optimal-transport assignment over a batch.

Given a class-by-sample similarity matrix S (K x B), solve

    max_Q  tr(Q^T S) + eps * H(Q)

over nonnegative matrices whose rows each sum to 1/K and whose columns each
sum to 1/B. The optimum has the form Q* = Diag(u) exp(S / eps) Diag(v) and is
found by Sinkhorn-Knopp scaling. The equal row masses are the point: every
class receives the same total assignment, so the resulting soft codes act as
balanced pseudo-labels and cannot collapse onto a single class.

The iteration starts from v = 1 and ends on the row (u) update, so row
marginals of the returned plan are exact up to float rounding while column
marginals converge with the iteration count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NonFiniteKernel, ShapeMismatch

STAB_PLAIN = "plain"
STAB_SHIFTED = "shifted"
STAB_LOG = "log_domain"
STABILIZATIONS = (STAB_PLAIN, STAB_SHIFTED, STAB_LOG)

NAN_ERROR = "error"
NAN_FALLBACK = "fallback_log_domain"
NAN_POLICIES = (NAN_ERROR, NAN_FALLBACK)

# exp overflows float64 above this exponent
_MAX_EXP = float(np.log(np.finfo(np.float64).max))
# Kernel ratios beyond 1/machine-eps cannot be renormalized reliably by the
# scaling form. Plain mode is validated against the worst-case cosine kernel
# (entries in [-1, 1] give a log-range of 2/eps) rather than per-batch values,
# so whether a configuration is accepted does not depend on the data that
# happens to arrive.
_SAFE_LOG_RANGE = float(-np.log(np.finfo(np.float64).eps))


def _as_float_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SimilarityMatrix:
    """K x B matrix of cosine similarities, classes along rows."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.values, "similarity matrix")
        if arr.shape[0] < 2:
            raise ShapeMismatch("need at least 2 classes (rows)")
        if arr.shape[1] < 1:
            raise ShapeMismatch("need at least 1 sample (column)")
        if not np.isfinite(arr).all():
            raise ShapeMismatch("similarity entries must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def batch_size(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative K x B plan; rows target mass 1/K, columns 1/B."""

    q: np.ndarray

    def __post_init__(self):
        arr = _as_float_matrix(self.q, "transport plan")
        if not np.isfinite(arr).all():
            raise ShapeMismatch("plan entries must be finite")
        if (arr < 0).any():
            raise ShapeMismatch("plan entries must be nonnegative")
        object.__setattr__(self, "q", arr)


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    epsilon: entropy weight, > 0. Smaller values sharpen the plan toward a
        hard assignment and stress the arithmetic.
    iterations: number of row renormalizations, >= 1. Column renormalizations
        are interleaved between them, so iterations=1 performs the single row
        update and iterations=T performs T row and T-1 column updates.
    stabilization: "plain" exponentiates the kernel as-is and refuses
        configurations whose worst-case kernel range exp(2*max(1,|S|max)/eps)
        exceeds float64 renormalization capacity; "shifted" (default)
        subtracts the column-wise maximum of S/eps before exponentiating;
        "log_domain" runs entirely on log potentials and is the recommended
        mode below eps ~ 0.2.
    nan_policy: "error" raises NonFiniteKernel when the kernel or plan leaves
        float64 range; "fallback_log_domain" retries in the log domain.
    """

    epsilon: float
    iterations: int
    stabilization: str = STAB_SHIFTED
    nan_policy: str = NAN_ERROR

    def __post_init__(self):
        if not (isinstance(self.epsilon, (int, float)) and math.isfinite(self.epsilon)):
            raise InvalidConfig(f"epsilon must be finite, got {self.epsilon!r}")
        if self.epsilon <= 0:
            raise InvalidConfig(f"epsilon must be > 0, got {self.epsilon}")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise InvalidConfig(f"iterations must be an int >= 1, got {self.iterations!r}")
        if self.stabilization not in STABILIZATIONS:
            raise InvalidConfig(
                f"stabilization must be one of {STABILIZATIONS}, got {self.stabilization!r}"
            )
        if self.nan_policy not in NAN_POLICIES:
            raise InvalidConfig(f"nan_policy must be one of {NAN_POLICIES}, got {self.nan_policy!r}")


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    out = hi + np.log(np.sum(np.exp(a - hi), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _scaling_iterate(kernel: np.ndarray, iterations: int) -> np.ndarray:
    """Run u/v scaling on an explicit kernel; ends on the row (u) update."""
    n_rows, n_cols = kernel.shape
    row_target = 1.0 / n_rows
    col_target = 1.0 / n_cols
    v = np.ones(n_cols)
    u = row_target / (kernel @ v)
    for _ in range(iterations - 1):
        v = col_target / (u @ kernel)
        u = row_target / (kernel @ v)
    return (u[:, None] * kernel) * v[None, :]


def _log_iterate(log_kernel: np.ndarray, iterations: int) -> np.ndarray:
    """Same schedule as _scaling_iterate but on log potentials."""
    n_rows, n_cols = log_kernel.shape
    log_row = -math.log(n_rows)
    log_col = -math.log(n_cols)
    g = np.zeros(n_cols)
    f = log_row - _logsumexp(log_kernel + g[None, :], axis=1)
    for _ in range(iterations - 1):
        g = log_col - _logsumexp(log_kernel + f[:, None], axis=0)
        f = log_row - _logsumexp(log_kernel + g[None, :], axis=1)
    return np.exp(log_kernel + f[:, None] + g[None, :])


def sinkhorn(sim: SimilarityMatrix, cfg: SinkhornConfig) -> TransportPlan:
    """Solve the balanced entropic assignment for one batch.

    Returns the scaled-kernel plan after cfg.iterations row updates. Row sums
    equal 1/K to rounding error by construction; column sums approach 1/B as
    the iteration count grows.

    Raises NonFiniteKernel when the requested stabilization cannot represent
    the kernel in float64 and nan_policy is "error". With
    nan_policy="fallback_log_domain" such configurations are retried on log
    potentials, which never overflow for finite similarities.
    """
    if not isinstance(sim, SimilarityMatrix):
        sim = SimilarityMatrix(np.asarray(sim))
    log_kernel = sim.values / cfg.epsilon

    if cfg.stabilization == STAB_LOG:
        plan = _log_iterate(log_kernel, cfg.iterations)
        if not np.isfinite(plan).all():
            raise NonFiniteKernel(
                f"log-domain plan left float64 range at epsilon={cfg.epsilon}"
            )
        return TransportPlan(plan)

    if cfg.stabilization == STAB_PLAIN:
        # Worst-case cosine kernel range; |S| above 1 widens it further.
        peak = max(1.0, float(np.max(np.abs(sim.values))))
        worst_range = 2.0 * peak / cfg.epsilon
        if worst_range > _SAFE_LOG_RANGE or float(np.max(log_kernel)) > _MAX_EXP:
            if cfg.nan_policy == NAN_FALLBACK:
                return TransportPlan(_log_iterate(log_kernel, cfg.iterations))
            raise NonFiniteKernel(
                "plain stabilization cannot renormalize a kernel with log-range "
                f"{worst_range:.1f} (limit {_SAFE_LOG_RANGE:.1f}); use shifted or "
                "log_domain stabilization, or raise epsilon"
            )
        kernel = np.exp(log_kernel)
    else:
        # Scalar shift: rescales the whole kernel by one constant, which the
        # first row update absorbs exactly, so truncated plans match the
        # unshifted schedule while every entry stays bounded by 1.
        kernel = np.exp(log_kernel - log_kernel.max())

    plan = _scaling_iterate(kernel, cfg.iterations)
    if not np.isfinite(plan).all():
        if cfg.nan_policy == NAN_FALLBACK:
            return TransportPlan(_log_iterate(log_kernel, cfg.iterations))
        raise NonFiniteKernel(
            f"scaling-form Sinkhorn produced non-finite entries at epsilon={cfg.epsilon} "
            f"with {cfg.stabilization} stabilization"
        )
    return TransportPlan(plan)


def objective(sim: SimilarityMatrix, plan: TransportPlan, epsilon: float) -> float:
    """Entropic objective tr(Q^T S) + eps * H(Q), with 0 log 0 = 0."""
    if not isinstance(sim, SimilarityMatrix):
        sim = SimilarityMatrix(np.asarray(sim))
    if not isinstance(plan, TransportPlan):
        plan = TransportPlan(np.asarray(plan))
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise InvalidConfig(f"epsilon must be finite and > 0, got {epsilon}")
    if sim.values.shape != plan.q.shape:
        raise ShapeMismatch(
            f"similarity {sim.values.shape} and plan {plan.q.shape} differ in shape"
        )
    q = plan.q
    transport = float(np.sum(q * sim.values))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogq = np.where(q > 0.0, q * np.log(q), 0.0)
    entropy = -float(np.sum(plogq))
    return transport + epsilon * entropy


def marginal_residuals(plan: TransportPlan) -> tuple[float, float]:
    """Max absolute deviation of (row, column) sums from their targets."""
    if not isinstance(plan, TransportPlan):
        plan = TransportPlan(np.asarray(plan))
    n_rows, n_cols = plan.q.shape
    row_err = float(np.max(np.abs(plan.q.sum(axis=1) - 1.0 / n_rows)))
    col_err = float(np.max(np.abs(plan.q.sum(axis=0) - 1.0 / n_cols)))
    return row_err, col_err


def hard_assignment(plan: TransportPlan) -> np.ndarray:
    """Per-column argmax class index; ties resolve to the lowest index."""
    if not isinstance(plan, TransportPlan):
        plan = TransportPlan(np.asarray(plan))
    return np.argmax(plan.q, axis=0)
