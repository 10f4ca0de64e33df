"""Block-pair importance estimation and the adjacent-key diagnostic.

Both estimators produce an (n_q, n_k) array of non-negative scores whose
only downstream use is ranking KV blocks within each query-block row, so
each query row is normalized over the union of its candidate keys rather
than per block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .blocks import BlockLayout
from .errors import ValidationError
from .linalg import as_matrix, row_softmax


@dataclass(frozen=True)
class SamplerConfig:
    """Token sampling sizes and seed for the sampled estimator."""

    s_q: int
    s_k: int
    seed: int

    def validate(self, layout: BlockLayout) -> None:
        if not 1 <= self.s_q <= layout.q_block:
            raise ValidationError(
                f"s_q={self.s_q} outside 1..{layout.q_block}"
            )
        if not 1 <= self.s_k <= layout.k_block:
            raise ValidationError(
                f"s_k={self.s_k} outside 1..{layout.k_block}"
            )


def _check_qk(q, k, layout: BlockLayout):
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    expected = (layout.seq_len, layout.head_dim)
    if q.shape != expected or k.shape != expected:
        raise ValidationError(
            f"Q/K shapes {q.shape}/{k.shape} do not match layout {expected}"
        )
    return q, k


def importance_sampled(q, k, layout: BlockLayout, cfg: SamplerConfig,
                       reducer: str = "max") -> np.ndarray:
    """Sampled-token importance scores, shape (n_q, n_k).

    Per query block, s_q rows are drawn without replacement; per KV block,
    s_k rows. Sampling is driven by one seeded generator in a fixed order
    (all query blocks ascending, then all KV blocks ascending), so results
    are bit-reproducible for a given seed. The scaled scores of the sampled
    queries against the union of all sampled keys are softmaxed per row,
    then reduced (max or mean) over each block's s_q x s_k probabilities.
    """
    if reducer not in ("max", "mean"):
        raise ValidationError(f"reducer must be 'max' or 'mean', got {reducer!r}")
    q, k = _check_qk(q, k, layout)
    cfg.validate(layout)

    rng = np.random.default_rng(cfg.seed)
    q_rows = [
        i * layout.q_block + rng.permutation(layout.q_block)[: cfg.s_q]
        for i in range(layout.n_q)
    ]
    k_rows = [
        j * layout.k_block + rng.permutation(layout.k_block)[: cfg.s_k]
        for j in range(layout.n_k)
    ]

    q_s = q[np.concatenate(q_rows)]              # (n_q*s_q, d)
    k_s = k[np.concatenate(k_rows)]              # (n_k*s_k, d)
    probs = row_softmax(q_s @ k_s.T / math.sqrt(layout.head_dim))

    blocks = probs.reshape(layout.n_q, cfg.s_q, layout.n_k, cfg.s_k)
    if reducer == "max":
        return blocks.max(axis=(1, 3))
    return blocks.mean(axis=(1, 3))


def antidiagonal_selection(b_q: int, b_k: int, stride: int) -> np.ndarray:
    """Boolean (b_q, b_k) mask of the strided antidiagonal positions."""
    if stride < 1 or b_k % stride:
        raise ValidationError(f"stride {stride} must divide k_block {b_k}")
    p = np.arange(b_q)[:, None]
    qq = np.arange(b_k)[None, :]
    return (p + qq) % stride == 0


def importance_antidiagonal(q, k, layout: BlockLayout,
                            stride: int) -> np.ndarray:
    """Antidiagonal-probe importance scores, shape (n_q, n_k).

    Inside every (q_block, k_block) score tile only positions with
    (p + q) % stride == 0 are evaluated. Each query row is softmaxed over
    its selected positions across all KV blocks, and a block's score is
    the mean (over the block's query rows) of the probability mass landing
    in it; with stride 1 every row of the result sums to 1.
    """
    q, k = _check_qk(q, k, layout)
    if stride < 1 or layout.k_block % stride:
        raise ValidationError(
            f"stride {stride} must divide k_block {layout.k_block}"
        )
    per_block = layout.k_block // stride
    scale = 1.0 / math.sqrt(layout.head_dim)

    # Row p of a block selects columns q with (p + q) % stride == 0,
    # i.e. q = (-p) mod stride, stepping by stride; same in every block.
    col_idx = np.empty((layout.q_block, per_block), dtype=np.int64)
    for p in range(layout.q_block):
        col_idx[p] = np.arange((-p) % stride, layout.k_block, stride)
    all_cols = (
        col_idx[:, None, :]
        + np.arange(layout.n_k)[None, :, None] * layout.k_block
    ).reshape(layout.q_block, -1)

    scores = np.empty((layout.n_q, layout.n_k))
    for i in range(layout.n_q):
        qi = q[i * layout.q_block : (i + 1) * layout.q_block]
        logits = qi @ k.T * scale                # (b_q, N)
        picked = np.take_along_axis(logits, all_cols, axis=1)
        probs = row_softmax(picked).reshape(layout.q_block, layout.n_k, per_block)
        scores[i] = probs.sum(axis=2).mean(axis=0)
    return scores


class AdjacentSimilarity(NamedTuple):
    """Mean cosine similarity of rows ``stride`` apart, with pair counts."""

    value: float
    used_pairs: int
    skipped_pairs: int


def adjacent_key_similarity(k, stride: int = 1) -> AdjacentSimilarity:
    """Mean cosine similarity between K[t] and K[t + stride].

    Pairs containing a zero-norm row are skipped and counted instead of
    raising; the mean is taken over the remaining pairs.
    """
    k = as_matrix(k, "K")
    if stride < 1:
        raise ValidationError(f"stride must be positive, got {stride}")
    n = k.shape[0]
    if n <= stride:
        raise ValidationError(f"need more than {stride} rows, got {n}")
    a = k[:-stride]
    b = k[stride:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    skipped = int((~ok).sum())
    if not ok.any():
        return AdjacentSimilarity(0.0, 0, skipped)
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    cos = np.clip(cos, -1.0, 1.0)
    return AdjacentSimilarity(float(cos.mean()), int(ok.sum()), skipped)
