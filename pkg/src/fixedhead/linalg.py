"""Dense double-precision numerics used throughout the package.

Matrices are plain 2-D ``numpy.float64`` arrays. The helpers here add the shape
and finiteness checks the rest of the package relies on, plus a small CSV
format for exchanging matrices with the command line.
"""

from __future__ import annotations

import io

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, RankDeficient

RANK_TOL = 1e-10


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream (O'Neill's 128-bit LCG + XSL-RR output)."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_columns(m: np.ndarray) -> np.ndarray:
    """Softmax down each column (axis -2); leading axes are treated as batch."""
    m = np.asarray(m, dtype=np.float64)
    z = np.exp(m - m.max(axis=-2, keepdims=True))
    return z / z.sum(axis=-2, keepdims=True)


def elementwise_log(m, floor: float = 1e-300) -> np.ndarray:
    if floor <= 0:
        raise ValueError("floor must be positive")
    return np.log(np.maximum(np.asarray(m, dtype=np.float64), floor))


def numerical_rank(m, tol: float = RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def condition_number(m) -> float:
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def left_inverse(x, tol: float = RANK_TOL) -> np.ndarray:
    """Left inverse of a tall full-column-rank matrix via pivoted QR.

    With ``X Π = Q R`` the left inverse is ``Π R^{-1} Q^T``; this never forms
    ``X^T X``, so the conditioning of the result tracks cond(X), not cond(X)^2.
    """
    x = as_matrix(x, "x")
    rows, cols = x.shape
    if rows < cols:
        raise DimensionMismatch(f"left inverse needs rows >= cols, got {x.shape}")
    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < cols:
        raise RankDeficient(f"numerical rank {rank} < {cols} columns")
    r_inv_qt = scipy.linalg.solve_triangular(r, q.T)
    out = np.empty_like(r_inv_qt)
    out[piv] = r_inv_qt
    return out


def norms(m) -> tuple[float, float]:
    """(Frobenius norm, max absolute entry)."""
    a = np.asarray(m, dtype=np.float64)
    if a.size == 0:
        return 0.0, 0.0
    return float(np.sqrt(np.sum(a * a))), float(np.max(np.abs(a)))


def max_abs(m) -> float:
    return norms(m)[1]


# --- CSV exchange format: "rows,cols" header, then one line per row ---------

def matrix_to_csv(m) -> str:
    a = as_matrix(m)
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in a]
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    f = io.StringIO(text.strip())
    header = f.readline().strip().split(",")
    if len(header) != 2:
        raise ValueError("matrix CSV header must be 'rows,cols'")
    rows, cols = int(header[0]), int(header[1])
    values = [[float(v) for v in line.split(",")] for line in f if line.strip()]
    a = np.array(values, dtype=np.float64).reshape(len(values), -1) if values else np.zeros((0, cols))
    if a.shape != (rows, cols):
        raise DimensionMismatch(f"CSV header says {rows}x{cols} but body is {a.shape[0]}x{a.shape[1]}")
    return as_matrix(a)


def read_matrix(path) -> np.ndarray:
    with open(path) as f:
        return matrix_from_csv(f.read())
