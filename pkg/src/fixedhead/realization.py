"""Constructing key/query projections that produce a prescribed context.

Given a full-column-rank ``X`` (``d x n``, ``d >= n``) and a positive
column-stochastic ``P``, :func:`realize_context` builds ``d x d`` matrices
``W_k, W_q`` with ``softmax((W_k X)^T (W_q X) / sqrt(d)) == P``:

1. ``X+`` is a left inverse of ``X``; with ``W = W~ X+`` the input drops out
   of the logits, leaving ``W~_k^T W~_q``.
2. Target logits ``W~_kq = sqrt(d) * log(P diag(d0))``. Because ``P``'s columns
   sum to one, the softmax column normalizers come out as exactly ``d0``, so
   the softmax returns ``P`` for every positive ``d0``.
3. ``W~_kq`` is split as ``[I_n; 0]^T [W~_kq; 0]``.

When ``d < n`` no construction exists in general. :func:`scalar_bottleneck_witness`
checks the smallest such instance by brute force, and
:func:`low_rank_residual_search` gives numerical evidence for larger cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DimensionTooSmall, NotStochastic
from .linalg import (as_matrix, condition_number, elementwise_log, left_inverse, matrix_to_csv,
                     max_abs, softmax_columns)

POSITIVITY_FLOOR = 1e-12
COLUMN_SUM_TOL = 1e-12
CONDITION_WARN = 1e6


@dataclass(frozen=True)
class ContextMatrix:
    """An ``n x n`` matrix with strictly positive entries and unit column sums."""

    p: np.ndarray

    def __post_init__(self):
        p = as_matrix(self.p, "context")
        if p.shape[0] != p.shape[1]:
            raise NotStochastic(f"context must be square, got {p.shape}")
        if p.min() < POSITIVITY_FLOOR:
            raise NotStochastic(f"context has an entry {p.min():.3g} below {POSITIVITY_FLOOR:g}")
        err = np.max(np.abs(p.sum(axis=0) - 1.0))
        if err > COLUMN_SUM_TOL:
            raise NotStochastic(f"context column sums deviate from 1 by {err:.3g}")
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.p.shape[0]


def as_context(p) -> ContextMatrix:
    return p if isinstance(p, ContextMatrix) else ContextMatrix(np.asarray(p, dtype=np.float64))


@dataclass
class RealizationResult:
    w_k: np.ndarray
    w_q: np.ndarray
    residual_max_abs: float
    d0_used: np.ndarray
    w_kq_tilde: np.ndarray
    scale: float
    condition_number: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "residual_max_abs": self.residual_max_abs,
            "d0": [float(v) for v in self.d0_used],
            "w_k_csv": matrix_to_csv(self.w_k),
            "w_q_csv": matrix_to_csv(self.w_q),
            "condition_number": self.condition_number,
            "warnings": list(self.warnings),
        }


def context_residual(x, w_k, w_q, p, scale: float) -> float:
    """Max-abs gap between the attention context of ``(W_k, W_q)`` on ``x`` and ``p``."""
    logits = (w_k @ x).T @ (w_q @ x) / scale
    return max_abs(softmax_columns(logits) - as_context(p).p)


def factor_logits(w_kq_tilde: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Split an ``n x n`` matrix as ``A^T B`` with ``A = [I_n; 0]`` and ``B = [M; 0]`` (both ``d x n``)."""
    n = w_kq_tilde.shape[0]
    a = np.zeros((d, n))
    a[:n] = np.eye(n)
    b = np.zeros((d, n))
    b[:n] = w_kq_tilde
    return a, b


def realize_context(x, p, d0=None) -> RealizationResult:
    x = as_matrix(x, "x")
    ctx = as_context(p)
    d, n = x.shape
    if ctx.n != n:
        raise DimensionMismatch(f"x has {n} columns but the context is {ctx.n}x{ctx.n}")
    if d < n:
        raise DimensionTooSmall(
            f"d={d} < n={n}: exact realization is not guaranteed; "
            "see scalar_bottleneck_witness / low_rank_residual_search")
    d0 = np.ones(n) if d0 is None else np.asarray(d0, dtype=np.float64)
    if d0.shape != (n,) or np.any(d0 <= 0):
        raise ValueError("d0 must be a length-n vector of positive reals")

    x_pinv = left_inverse(x)
    scale = math.sqrt(d)
    w_kq_tilde = scale * elementwise_log(ctx.p * d0[None, :])
    a, b = factor_logits(w_kq_tilde, d)
    w_k = a @ x_pinv
    w_q = b @ x_pinv

    cond = condition_number(x)
    warnings = []
    if cond > CONDITION_WARN:
        warnings.append(f"condition number {cond:.3g} exceeds {CONDITION_WARN:g}; residual may degrade")
    return RealizationResult(
        w_k=w_k, w_q=w_q,
        residual_max_abs=context_residual(x, w_k, w_q, ctx, scale),
        d0_used=d0, w_kq_tilde=w_kq_tilde, scale=scale,
        condition_number=cond, warnings=warnings,
    )


def verify_fixed_point(w_kq_tilde, p, scale: float) -> float:
    """Max-abs of ``exp(W/scale) - P D`` where ``D`` holds the column sums of ``exp(W/scale)``."""
    e = np.exp(as_matrix(w_kq_tilde) / scale)
    p = np.asarray(p.p if isinstance(p, ContextMatrix) else p, dtype=np.float64)
    if e.shape != p.shape:
        raise DimensionMismatch(f"logit matrix {e.shape} vs context {p.shape}")
    return max_abs(e - p * e.sum(axis=0)[None, :])


# --- d < n --------------------------------------------------------------------

SCALAR_X = np.array([[1.0, 0.0]])
SCALAR_P = np.array([[0.5, 0.75], [0.5, 0.25]])


def scalar_bottleneck_witness(p=None, step: float = 1e-3, bound: float = 50.0) -> tuple[float, float]:
    """Brute-force the best scalar ``w = W_k W_q`` for ``X = [1, 0]``.

    The logits are ``[[w, 0], [0, 0]]``, so the second softmax column is
    always ``(1/2, 1/2)``. Returns ``(min max-abs residual, argmin w)``; ties
    in the max-abs residual are broken by the Frobenius residual.
    """
    target = SCALAR_P if p is None else as_matrix(p)
    steps = int(round(bound / step))
    w = np.arange(-steps, steps + 1) * step
    s = 1.0 / (1.0 + np.exp(-w))
    col1 = np.stack([s, 1.0 - s], axis=1) - target[:, 0]
    col2 = np.array([0.5, 0.5]) - target[:, 1]
    worst = np.maximum(np.abs(col1).max(axis=1), np.abs(col2).max())
    fro = (col1 ** 2).sum(axis=1) + (col2 ** 2).sum()
    best = np.lexsort((fro, worst))[0]
    return float(worst[best]), float(w[best])


def low_rank_residual_search(x, p, d_proj: int, restarts: int = 20, steps: int = 2000, seed: int = 0,
                             lr: float = 0.05) -> float:
    """Best max-abs context residual found with ``d_proj x d`` projections.

    Plain gradient descent on ``0.5 * ||softmax(L) - P||_F^2`` with
    ``L = (W_k X)^T (W_q X) / sqrt(d_proj)``, from ``restarts`` independent
    initializations. The value returned is an upper bound on the true minimum.
    """
    x = as_matrix(x, "x")
    target = as_context(p).p
    d, n = x.shape
    if target.shape[0] != n:
        raise DimensionMismatch(f"x has {n} columns but the context is {target.shape}")
    if d_proj < 1:
        raise ValueError("d_proj must be positive")
    scale = math.sqrt(d_proj)
    best = math.inf
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.Generator(np.random.PCG64(child))
        s = 1.0 / math.sqrt(d)
        w_k = rng.uniform(-s, s, size=(d_proj, d))
        w_q = rng.uniform(-s, s, size=(d_proj, d))
        for _ in range(steps + 1):
            k, q = w_k @ x, w_q @ x
            ctx = softmax_columns(k.T @ q / scale)
            diff = ctx - target
            best = min(best, float(np.abs(diff).max()))
            d_logits = ctx * (diff - np.sum(ctx * diff, axis=0, keepdims=True)) / scale
            g_k = (q @ d_logits.T) @ x.T
            g_q = (k @ d_logits) @ x.T
            w_k -= lr * g_k
            w_q -= lr * g_q
    return best
