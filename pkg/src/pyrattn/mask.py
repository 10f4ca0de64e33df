"""Multi-level mask generation, similarity caps, and budget accounting.

A mask entry h > 0 means "attend to KV block j at pooling level h"
(costing 2^(1-h) of a dense block); 0 means skip the block entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .blocks import BlockLayout, PyramidKV
from .errors import ValidationError
from .linalg import as_matrix


@dataclass(frozen=True)
class LevelThresholds:
    """Non-decreasing cumulative-score budgets, one per pooling level."""

    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus:
            raise ValidationError("need at least one threshold")
        if taus[0] < 0.0 or taus[-1] > 1.0 or any(
            a > b for a, b in zip(taus, taus[1:])
        ):
            raise ValidationError(
                f"thresholds must be non-decreasing within [0, 1], got {taus}"
            )
        object.__setattr__(self, "taus", taus)

    def __len__(self) -> int:
        return len(self.taus)


@dataclass(frozen=True)
class QuantileCutpoints:
    """Non-decreasing rank-fraction boundaries, one per pooling level.

    Fraction t covers sorted ranks up to points[t]; ranks past the last
    point are dropped. Zero leading fractions are allowed so that a
    preset may leave early levels empty.
    """

    points: tuple

    def __post_init__(self):
        points = tuple(float(p) for p in self.points)
        if not points:
            raise ValidationError("need at least one cutpoint")
        if points[0] < 0.0 or points[-1] > 1.0 or any(
            a > b for a, b in zip(points, points[1:])
        ):
            raise ValidationError(
                f"cutpoints must be non-decreasing within [0, 1], got {points}"
            )
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SimThresholds:
    """Minimum intra-block cosine similarity required per level 2..H.

    -1 admits every block (cosines exceed -1 for any non-antipodal pair),
    +1 admits none.
    """

    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if any(t < -1.0 or t > 1.0 for t in taus):
            raise ValidationError(f"similarity thresholds outside [-1, 1]: {taus}")
        object.__setattr__(self, "taus", taus)

    def __len__(self) -> int:
        return len(self.taus)


# Budget-matched level allocations (level-1/2/3 rank fractions plus drop),
# all costing 0.25x dense compute but with different KV coverage.
PRESET_CUTPOINTS = {
    "psa-1": QuantileCutpoints((0.25, 0.25, 0.25, 0.25)),
    "psa-2": QuantileCutpoints((0.0, 0.0, 1.0, 1.0)),
    "psa-3": QuantileCutpoints((0.15, 0.25, 0.45, 0.45)),
    "psa-4": QuantileCutpoints((0.10, 0.30, 0.50, 0.50)),
    "psa-5": QuantileCutpoints((0.10, 0.20, 0.60, 0.60)),
}


def _check_scores(scores) -> np.ndarray:
    s = as_matrix(scores, "importance scores")
    if (s < 0).any():
        raise ValidationError("importance scores must be non-negative")
    return s


def _descending_order(s: np.ndarray) -> np.ndarray:
    """Per-row argsort by descending score, ties by ascending block index."""
    return np.argsort(-s, axis=1, kind="stable")


def _compensated_cumsum(vec: np.ndarray) -> np.ndarray:
    """Neumaier running sums, so boundary comparisons behave like exact math."""
    out = np.empty_like(vec)
    total = 0.0
    comp = 0.0
    for i, x in enumerate(vec):
        t = total + x
        if abs(total) >= abs(x):
            comp += (total - t) + x
        else:
            comp += (x - t) + total
        total = t
        out[i] = total + comp
    return out


def assign_threshold(scores, thresholds: LevelThresholds) -> np.ndarray:
    """Assign levels by cumulative normalized importance.

    Each row is normalized to sum to 1 (an all-zero row becomes uniform),
    sorted descending, and cumulatively summed; a block whose cumulative
    value is <= tau_t (smallest such t) gets level t, anything past the
    last threshold is dropped.
    """
    s = _check_scores(scores)
    taus = np.asarray(thresholds.taus)
    n_q, n_k = s.shape

    order = _descending_order(s)
    levels = np.empty((n_q, n_k), dtype=np.int64)
    for i in range(n_q):
        row = s[i, order[i]]
        total = math.fsum(row)
        e = row / total if total > 0 else np.full(n_k, 1.0 / n_k)
        # Exact cumulative values never exceed 1; clip float dust so
        # tau = 1 reliably retains everything.
        cum = np.minimum(_compensated_cumsum(e), 1.0)
        idx = np.searchsorted(taus, cum, side="left")
        levels[i, order[i]] = np.where(idx < len(taus), idx + 1, 0)
    return levels


def binary_mask(scores, tau: float) -> np.ndarray:
    """Keep/drop mask: the degenerate single-threshold case (the 0/1 baseline)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    return assign_threshold(scores, LevelThresholds((tau,)))


def _fraction_counts(points, n_k: int) -> np.ndarray:
    """Cumulative block counts per level: half-up rounding, clamped monotone."""
    counts = [min(n_k, int(math.floor(p * n_k + 0.5))) for p in points]
    return np.maximum.accumulate(np.asarray(counts, dtype=np.int64))


def assign_quantile(scores, cutpoints: QuantileCutpoints) -> np.ndarray:
    """Assign levels by fixed per-row rank fractions."""
    s = _check_scores(scores)
    n_q, n_k = s.shape
    counts = _fraction_counts(cutpoints.points, n_k)

    order = _descending_order(s)
    ranks = np.arange(n_k)
    idx = np.searchsorted(counts, ranks, side="right")  # first level with rank < count
    levels_sorted = np.where(idx < len(counts), idx + 1, 0)
    levels = np.empty((n_q, n_k), dtype=np.int64)
    np.put_along_axis(levels, order, np.broadcast_to(levels_sorted, (n_q, n_k)), axis=1)
    return levels


def _strided_block_similarity(block: np.ndarray, stride: int) -> float | None:
    """Mean cosine of row pairs ``stride`` apart; None if no usable pair."""
    n = block.shape[0]
    if n <= stride:
        return None
    a = block[:-stride]
    b = block[stride:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return None
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(np.clip(cos, -1.0, 1.0).mean())


def level_cap_from_similarity(source, sim_thresholds: SimThresholds,
                              layout: BlockLayout | None = None) -> np.ndarray:
    """Per-KV-block maximum admissible level from intra-block similarity.

    ``source`` is either a PyramidKV or a raw (N, d) key matrix with an
    explicit layout. A block qualifies for level h when the mean cosine
    similarity of its raw rows at stride 2^(h-1) exceeds the level's
    threshold; caps start at 1 and take the max over qualifying levels.
    """
    if isinstance(source, PyramidKV):
        layout = source.layout
        raw_blocks = [source.k(j, 1) for j in range(layout.n_k)]
    else:
        if layout is None:
            raise ValidationError("raw key input requires an explicit layout")
        k = as_matrix(source, "K")
        if k.shape != (layout.seq_len, layout.head_dim):
            raise ValidationError(
                f"K shape {k.shape} does not match layout "
                f"{(layout.seq_len, layout.head_dim)}"
            )
        bk = layout.k_block
        raw_blocks = [k[j * bk : (j + 1) * bk] for j in range(layout.n_k)]

    if len(sim_thresholds) != layout.levels - 1:
        raise ValidationError(
            f"need {layout.levels - 1} similarity thresholds for "
            f"{layout.levels} levels, got {len(sim_thresholds)}"
        )

    caps = np.ones(layout.n_k, dtype=np.int64)
    for j, block in enumerate(raw_blocks):
        for h in range(2, layout.levels + 1):
            sim = _strided_block_similarity(block, 1 << (h - 1))
            if sim is not None and sim > sim_thresholds.taus[h - 2]:
                caps[j] = max(caps[j], h)
    return caps


def combine_mask(mask, caps) -> np.ndarray:
    """Clamp every mask entry to its block's cap; zeros stay zero."""
    m = np.asarray(mask, dtype=np.int64)
    caps = np.asarray(caps, dtype=np.int64)
    if m.ndim != 2 or caps.ndim != 1 or m.shape[1] != caps.shape[0]:
        raise ValidationError(
            f"mask columns {m.shape} must match cap length {caps.shape}"
        )
    if (caps < 1).any():
        raise ValidationError("level caps must be >= 1")
    return np.minimum(m, caps[None, :])


@dataclass(frozen=True)
class SparsityReport:
    """Compute-budget accounting for one mask.

    Float fields are exact rationals rounded once to float64; the integer
    ``level_counts``/``total`` carry the unrounded information so the
    identities (rho from histogram, sparsity + rho = 1, coverage from
    hist[0]) can be re-derived exactly.
    """

    level_counts: tuple
    total: int
    rho_bar: float
    sparsity: float
    kv_coverage: float
    level_histogram: tuple

    def as_dict(self) -> dict:
        return {
            "level_counts": list(self.level_counts),
            "total_entries": self.total,
            "rho_bar": self.rho_bar,
            "sparsity": self.sparsity,
            "kv_coverage": self.kv_coverage,
            "level_histogram": list(self.level_histogram),
        }


def report_from_counts(level_counts, total: int) -> SparsityReport:
    """Build a :class:`SparsityReport` from per-level entry counts.

    Exactness matters here: the preset budgets must come out as the exact
    rationals they are, so everything is computed in Fraction and rounded
    to float once per field.
    """
    counts = tuple(int(c) for c in level_counts)
    if total < 1 or any(c < 0 for c in counts) or sum(counts) != total:
        raise ValidationError("level counts must be non-negative and sum to total")
    rho = sum(
        Fraction(counts[h], total) * Fraction(1, 1 << (h - 1))
        for h in range(1, len(counts))
    )
    coverage = Fraction(total - counts[0], total)
    return SparsityReport(
        level_counts=counts,
        total=total,
        rho_bar=float(rho),
        sparsity=float(1 - rho),
        kv_coverage=float(coverage),
        level_histogram=tuple(float(Fraction(c, total)) for c in counts),
    )


def sparsity_report(mask, levels: int | None = None) -> SparsityReport:
    """Summarize a mask's effective budget, sparsity, and coverage.

    The effective budget is the mean per-entry cost factor 2^(1-h)
    (0 for skipped entries): the dense-equivalent fraction of compute.
    """
    m = np.asarray(mask, dtype=np.int64)
    if m.ndim != 2 or m.size == 0:
        raise ValidationError("mask must be a non-empty 2D integer array")
    if (m < 0).any():
        raise ValidationError("mask levels must be >= 0")
    top = int(m.max())
    levels = top if levels is None else int(levels)
    levels = max(levels, 1)
    if top > levels:
        raise ValidationError(f"mask contains level {top} > levels={levels}")

    counts = tuple(int((m == h).sum()) for h in range(levels + 1))
    return report_from_counts(counts, m.size)


def causal_premask(mask, layout: BlockLayout) -> np.ndarray:
    """Restrict a mask for causal execution.

    Block pairs whose keys are all in the future are dropped; pairs that
    straddle the boundary are forced to level 1 (pooling across a causal
    boundary is never allowed) and rely on the executor's intra-block
    logit mask; fully visible pairs keep their assigned level.
    """
    m = np.asarray(mask, dtype=np.int64)
    if m.shape != (layout.n_q, layout.n_k):
        raise ValidationError(
            f"mask shape {m.shape} does not match layout "
            f"{(layout.n_q, layout.n_k)}"
        )
    i = np.arange(layout.n_q)[:, None]
    j = np.arange(layout.n_k)[None, :]
    key_lo = j * layout.k_block
    key_hi = (j + 1) * layout.k_block - 1
    q_lo = i * layout.q_block
    q_hi = (i + 1) * layout.q_block - 1
    future = key_lo > q_hi          # every key after every query
    visible = key_hi <= q_lo        # every key visible to every query
    out = m.copy()
    out[future] = 0
    out[~future & ~visible] = 1
    return out
