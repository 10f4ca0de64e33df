"""Attention executors: dense oracle, materialized reference, streaming pass.

The reference executor materializes each query block's selected pooled
keys and softmaxes once; the streaming executor keeps a running max,
normalizer, and rescaled accumulator per row and must agree with the
reference to 1e-5 relative. A pooled key standing in for 2^(h-1) tokens
gets the additive logit bias (h-1)*ln(2), which restores exactly the
probability mass the pooled duplicates would have contributed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import BlockLayout, PyramidKV
from .errors import ValidationError
from .linalg import as_matrix, matmul, row_softmax

LN2 = math.log(2.0)


@dataclass
class AttentionOutput:
    """Attention result with per-row log-normalizer diagnostics.

    ``row_log_normalizers[i]`` is log(sum_j exp(score_ij)) for row i, or
    -inf for rows whose mask selected nothing; such rows are zero in
    ``out`` and counted in ``skipped_rows``.
    """

    out: np.ndarray
    row_log_normalizers: np.ndarray
    skipped_rows: int = 0


def level_bias(level: int, max_level: int | None = None) -> float:
    """Additive logit bias (h-1)*ln(2) for pooling level h."""
    if level < 1 or (max_level is not None and level > max_level):
        hi = max_level if max_level is not None else "inf"
        raise ValidationError(f"level {level} outside 1..{hi}")
    return (level - 1) * LN2


def full_attention(q, k, v) -> AttentionOutput:
    """Dense softmax(Q K^T / sqrt(d)) V, the oracle everything is checked against."""
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ValidationError(
            f"incompatible shapes Q{q.shape} K{k.shape} V{v.shape}"
        )
    scores = matmul(q, k.T) / math.sqrt(q.shape[1])
    m = scores.max(axis=1)
    lse = m + np.log(np.exp(scores - m[:, None]).sum(axis=1))
    return AttentionOutput(
        out=matmul(row_softmax(scores), v),
        row_log_normalizers=lse,
        skipped_rows=0,
    )


def _check_mask(mask, layout: BlockLayout) -> np.ndarray:
    m = np.asarray(mask, dtype=np.int64)
    if m.shape != (layout.n_q, layout.n_k):
        raise ValidationError(
            f"mask shape {m.shape} does not match layout "
            f"{(layout.n_q, layout.n_k)}"
        )
    if (m < 0).any() or (m > layout.levels).any():
        raise ValidationError(f"mask levels outside 0..{layout.levels}")
    return m


def _check_query(q, layout: BlockLayout) -> np.ndarray:
    q = as_matrix(q, "Q")
    if q.shape != (layout.seq_len, layout.head_dim):
        raise ValidationError(
            f"Q shape {q.shape} does not match layout "
            f"{(layout.seq_len, layout.head_dim)}"
        )
    return q


def _causal_key_mask(layout: BlockLayout, i: int, j: int,
                     level: int) -> np.ndarray | None:
    """Boolean (b_q, rows) visibility mask for a straddling block pair.

    Only level-1 pairs can straddle the causal boundary (the pre-mask
    forces that), so pooled rows map 1:1 to token positions.
    """
    q_lo = i * layout.q_block
    q_hi = (i + 1) * layout.q_block - 1
    k_lo = j * layout.k_block
    k_hi = (j + 1) * layout.k_block - 1
    if k_hi <= q_lo:
        return None  # fully visible
    if level != 1:
        raise ValidationError(
            f"causal mode requires level 1 on straddling pair ({i}, {j}); "
            f"run the mask through the causal pre-pass first"
        )
    q_pos = np.arange(q_lo, q_hi + 1)[:, None]
    k_pos = np.arange(k_lo, k_hi + 1)[None, :]
    return k_pos <= q_pos


def _gather_block(pyramid: PyramidKV, i: int, j: int, level: int,
                  causal: bool):
    """Pooled K/V plus bias and optional visibility mask for one pair."""
    k_blk = pyramid.k(j, level)
    v_blk = pyramid.v(j, level)
    vis = _causal_key_mask(pyramid.layout, i, j, level) if causal else None
    return k_blk, v_blk, level_bias(level, pyramid.layout.levels), vis


def psa_reference(q, pyramid: PyramidKV, mask, causal: bool = False
                  ) -> AttentionOutput:
    """Materialized multi-level attention: ground truth for the streaming pass.

    Per query block, the selected pooled K/V blocks are concatenated with
    their level biases, softmaxed in one shot, and applied to the pooled
    values. Rows left without any key come out zero and are counted.
    """
    layout = pyramid.layout
    q = _check_query(q, layout)
    m = _check_mask(mask, layout)
    scale = 1.0 / math.sqrt(layout.head_dim)

    out = np.zeros((layout.seq_len, layout.head_dim))
    log_norm = np.full(layout.seq_len, -np.inf)
    skipped = 0
    for i in range(layout.n_q):
        rows = slice(i * layout.q_block, (i + 1) * layout.q_block)
        qi = q[rows]
        score_parts = []
        v_parts = []
        for j in range(layout.n_k):
            h = int(m[i, j])
            if h == 0:
                continue
            k_blk, v_blk, bias, vis = _gather_block(pyramid, i, j, h, causal)
            s = qi @ k_blk.T * scale + bias
            if vis is not None:
                s = np.where(vis, s, -np.inf)
            score_parts.append(s)
            v_parts.append(v_blk)
        if not score_parts:
            skipped += layout.q_block
            continue
        scores = np.concatenate(score_parts, axis=1)
        vals = np.concatenate(v_parts, axis=0)
        mx = scores.max(axis=1)
        alive = np.isfinite(mx)
        if not alive.all():
            skipped += int((~alive).sum())
        shift = np.where(alive, mx, 0.0)
        p = np.exp(scores - shift[:, None])
        p[~np.isfinite(scores)] = 0.0
        denom = p.sum(axis=1)
        safe = np.where(alive, denom, 1.0)
        out[rows] = np.where(alive[:, None], (p @ vals) / safe[:, None], 0.0)
        log_norm[rows] = np.where(alive, shift + np.log(safe), -np.inf)
    return AttentionOutput(out=out, row_log_normalizers=log_norm,
                           skipped_rows=skipped)


def psa_streaming(q, pyramid: PyramidKV, mask, causal: bool = False
                  ) -> AttentionOutput:
    """One-pass multi-level attention with online softmax state.

    KV blocks are visited in ascending order; each visit rescales the
    accumulator by exp(m_old - m_new) and folds in the biased block
    probabilities. Equals :func:`psa_reference` to 1e-5 relative.
    """
    layout = pyramid.layout
    q = _check_query(q, layout)
    m = _check_mask(mask, layout)
    scale = 1.0 / math.sqrt(layout.head_dim)

    out = np.zeros((layout.seq_len, layout.head_dim))
    log_norm = np.full(layout.seq_len, -np.inf)
    skipped = 0
    for i in range(layout.n_q):
        rows = slice(i * layout.q_block, (i + 1) * layout.q_block)
        qi = q[rows]
        m_run = np.full(layout.q_block, -np.inf)
        l_run = np.zeros(layout.q_block)
        acc = np.zeros((layout.q_block, layout.head_dim))
        for j in range(layout.n_k):
            h = int(m[i, j])
            if h == 0:
                continue
            k_blk, v_blk, bias, vis = _gather_block(pyramid, i, j, h, causal)
            s = qi @ k_blk.T * scale + bias
            if vis is not None:
                s = np.where(vis, s, -np.inf)
            m_new = np.maximum(s.max(axis=1), m_run)
            # Rows with no finite score yet keep zero state; avoid -inf - -inf.
            dead = np.isneginf(m_new)
            shift = np.where(dead, 0.0, m_new)
            p = np.exp(s - shift[:, None])
            p[np.isneginf(s)] = 0.0
            alpha = np.where(dead, 0.0, np.exp(m_run - shift))
            l_run = l_run * alpha + p.sum(axis=1)
            acc = acc * alpha[:, None] + p @ v_blk
            m_run = m_new
        alive = l_run > 0
        if not alive.all():
            skipped += int((~alive).sum())
        safe = np.where(alive, l_run, 1.0)
        out[rows] = np.where(alive[:, None], acc / safe[:, None], 0.0)
        log_norm[rows] = np.where(alive, m_run + np.log(safe), -np.inf)
    return AttentionOutput(out=out, row_log_normalizers=log_norm,
                           skipped_rows=skipped)


def causal_full_attention(q, k, v) -> AttentionOutput:
    """Dense attention with a token-level causal mask (oracle for causal mode)."""
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ValidationError(
            f"incompatible shapes Q{q.shape} K{k.shape} V{v.shape}"
        )
    n = q.shape[0]
    scores = q @ k.T / math.sqrt(q.shape[1])
    scores = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
    mx = scores.max(axis=1)
    p = np.exp(scores - mx[:, None])
    p[np.isneginf(scores)] = 0.0
    denom = p.sum(axis=1)
    return AttentionOutput(
        out=(p @ v) / denom[:, None],
        row_log_normalizers=mx + np.log(denom),
        skipped_rows=0,
    )
