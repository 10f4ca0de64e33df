"""Small dense linear-algebra layer used by every other module.

All functions accept anything array-like, validate it into a finite
float64 2D array, and stay pure. Storage precision (float32) only
matters at the file boundary; see tensorfile.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ValidationError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` into a non-empty, finite float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValidationError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit inner-dimension validation."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(
            f"inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def row_softmax(a) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    a = as_matrix(a, "softmax input")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mean_pool_rows(x) -> np.ndarray:
    """Average consecutive row pairs (kernel 2, stride 2).

    An odd trailing row passes through unchanged, so the output always
    has ceil(n/2) rows.
    """
    x = as_matrix(x, "pooling input")
    n = x.shape[0]
    pairs = n // 2
    pooled = 0.5 * (x[0 : 2 * pairs : 2] + x[1 : 2 * pairs : 2])
    if n % 2:
        pooled = np.vstack([pooled, x[-1:]])
    return pooled


def relative_error(o, o_ref) -> float:
    """Frobenius-norm relative error ||o - o_ref||_F / ||o_ref||_F."""
    o = as_matrix(o, "candidate")
    o_ref = as_matrix(o_ref, "reference")
    if o.shape != o_ref.shape:
        raise ValidationError(f"shape mismatch: {o.shape} vs {o_ref.shape}")
    denom = float(np.linalg.norm(o_ref))
    if denom == 0.0:
        raise NumericError("reference matrix has zero Frobenius norm")
    return float(np.linalg.norm(o - o_ref)) / denom
