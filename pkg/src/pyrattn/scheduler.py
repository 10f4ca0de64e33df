"""Tile scheduling: pack heterogeneous pooled KV segments into fixed tiles.

Pooling produces KV blocks of wildly different lengths; executing each
one as its own unit wastes most of a fixed-size execution tile. The
schedule built here splits and merges block rows into tiles of exactly
``tile_len`` pooled rows (last tile per query block may run short) while
preserving ascending block order, so tiled execution is numerically a
re-chunking of the streaming pass, never a reordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionOutput, _causal_key_mask, level_bias
from .blocks import BlockLayout, PyramidKV
from .errors import ValidationError
from .linalg import as_matrix


@dataclass(frozen=True)
class Segment:
    """A contiguous slice of one pooled KV block inside a tile."""

    kv_block: int
    level: int
    row_start: int
    row_stop: int

    @property
    def rows(self) -> int:
        return self.row_stop - self.row_start


@dataclass(frozen=True)
class ExecutionTile:
    query_block: int
    segments: tuple

    @property
    def filled(self) -> int:
        return sum(s.rows for s in self.segments)


@dataclass(frozen=True)
class TileSchedule:
    tile_len: int
    tiles: tuple
    layout: BlockLayout


@dataclass(frozen=True)
class UtilizationStats:
    tiles: int
    useful_rows: int
    capacity: int
    utilization: float

    def as_dict(self) -> dict:
        return {
            "tiles": self.tiles,
            "useful_rows": self.useful_rows,
            "capacity": self.capacity,
            "utilization": self.utilization,
        }


def build_schedule(mask, layout: BlockLayout, tile_len: int,
                   merge: bool = True) -> TileSchedule:
    """Greedy in-order packing of mask-selected pooled rows into tiles.

    With ``merge`` off, every KV block starts a fresh tile (the naive
    one-block-per-tile baseline); with it on, tiles are filled across
    block boundaries. Either way a block longer than ``tile_len`` is
    split and tiles never span query blocks.
    """
    if tile_len < 1:
        raise ValidationError(f"tile_len must be >= 1, got {tile_len}")
    m = np.asarray(mask, dtype=np.int64)
    if m.shape != (layout.n_q, layout.n_k):
        raise ValidationError(
            f"mask shape {m.shape} does not match layout "
            f"{(layout.n_q, layout.n_k)}"
        )
    if (m < 0).any() or (m > layout.levels).any():
        raise ValidationError(f"mask levels outside 0..{layout.levels}")

    tiles = []
    for i in range(layout.n_q):
        open_segments = []
        filled = 0

        def close():
            nonlocal open_segments, filled
            if open_segments:
                tiles.append(ExecutionTile(query_block=i,
                                           segments=tuple(open_segments)))
                open_segments = []
                filled = 0

        for j in range(layout.n_k):
            h = int(m[i, j])
            if h == 0:
                continue
            if not merge:
                close()
            offset = 0
            remaining = layout.pooled_len(h)
            while remaining:
                if filled == tile_len:
                    close()
                take = min(tile_len - filled, remaining)
                open_segments.append(
                    Segment(kv_block=j, level=h, row_start=offset,
                            row_stop=offset + take)
                )
                filled += take
                offset += take
                remaining -= take
            if not merge:
                close()
        close()
    return TileSchedule(tile_len=tile_len, tiles=tuple(tiles), layout=layout)


def _validate_schedule(schedule: TileSchedule, pyramid: PyramidKV) -> None:
    """Reject schedules that would silently change attention semantics.

    Within each query block, segments must cover whole selected blocks
    (row 0 through the pooled length, one level per block) in strictly
    ascending kv_block order, with no overlaps, gaps, or level mixing.
    """
    layout = pyramid.layout
    if schedule.layout != layout:
        raise ValidationError("schedule layout does not match pyramid layout")
    if schedule.tile_len < 1:
        raise ValidationError("tile_len must be >= 1")

    last_qb = -1
    open_block = None  # (kv_block, level, next_row) mid-block continuation
    last_done = -1

    def finish_open():
        nonlocal open_block, last_done
        if open_block is not None:
            j, h, nxt = open_block
            if nxt != layout.pooled_len(h):
                raise ValidationError(
                    f"block {j} covered only to row {nxt} of "
                    f"{layout.pooled_len(h)}"
                )
            last_done = j
            open_block = None

    for tile in schedule.tiles:
        if tile.query_block < last_qb or not 0 <= tile.query_block < layout.n_q:
            raise ValidationError("tiles out of query-block order")
        if tile.query_block != last_qb:
            finish_open()
            last_done = -1
            last_qb = tile.query_block
        if not tile.segments:
            raise ValidationError("empty tile")
        if tile.filled > schedule.tile_len:
            raise ValidationError("tile overfull")
        for seg in tile.segments:
            if not 0 <= seg.kv_block < layout.n_k:
                raise ValidationError(f"segment block {seg.kv_block} out of range")
            if not 1 <= seg.level <= layout.levels:
                raise ValidationError(f"segment level {seg.level} out of range")
            limit = layout.pooled_len(seg.level)
            if not 0 <= seg.row_start < seg.row_stop <= limit:
                raise ValidationError(
                    f"segment rows [{seg.row_start}, {seg.row_stop}) outside "
                    f"0..{limit}"
                )
            if open_block is not None and seg.kv_block == open_block[0]:
                j, h, nxt = open_block
                if seg.level != h:
                    raise ValidationError(f"block {j} mixes levels {h}/{seg.level}")
                if seg.row_start != nxt:
                    raise ValidationError(
                        f"block {j} rows jump from {nxt} to {seg.row_start}"
                    )
                open_block = (j, h, seg.row_stop)
                continue
            finish_open()
            if seg.kv_block <= last_done:
                raise ValidationError(
                    f"block {seg.kv_block} repeated or out of order"
                )
            if seg.row_start != 0:
                raise ValidationError(
                    f"block {seg.kv_block} does not start at row 0"
                )
            open_block = (seg.kv_block, seg.level, seg.row_stop)
    finish_open()


def execute_schedule(q, pyramid: PyramidKV, schedule: TileSchedule,
                     causal: bool = False) -> AttentionOutput:
    """Run the online-softmax recurrence tile by tile.

    Tiling changes only the chunking of the streaming pass, so the output
    must match :func:`psa_streaming` to 1e-6 relative.
    """
    layout = pyramid.layout
    q = as_matrix(q, "Q")
    if q.shape != (layout.seq_len, layout.head_dim):
        raise ValidationError(
            f"Q shape {q.shape} does not match layout "
            f"{(layout.seq_len, layout.head_dim)}"
        )
    _validate_schedule(schedule, pyramid)
    scale = 1.0 / math.sqrt(layout.head_dim)

    out = np.zeros((layout.seq_len, layout.head_dim))
    log_norm = np.full(layout.seq_len, -np.inf)
    m_run = np.full(layout.seq_len, -np.inf)
    l_run = np.zeros(layout.seq_len)

    for tile in schedule.tiles:
        i = tile.query_block
        rows = slice(i * layout.q_block, (i + 1) * layout.q_block)
        qi = q[rows]
        k_parts = []
        v_parts = []
        bias_parts = []
        vis_parts = []
        for seg in tile.segments:
            sl = slice(seg.row_start, seg.row_stop)
            k_parts.append(pyramid.k(seg.kv_block, seg.level)[sl])
            v_parts.append(pyramid.v(seg.kv_block, seg.level)[sl])
            bias_parts.append(
                np.full(seg.rows, level_bias(seg.level, layout.levels))
            )
            if causal:
                vis = _causal_key_mask(layout, i, seg.kv_block, seg.level)
                vis_parts.append(
                    np.ones((layout.q_block, seg.rows), dtype=bool)
                    if vis is None else vis[:, sl]
                )
        k_tile = np.concatenate(k_parts, axis=0)
        v_tile = np.concatenate(v_parts, axis=0)
        bias = np.concatenate(bias_parts)

        s = qi @ k_tile.T * scale + bias[None, :]
        if causal:
            s = np.where(np.concatenate(vis_parts, axis=1), s, -np.inf)
        m_new = np.maximum(s.max(axis=1), m_run[rows])
        dead = np.isneginf(m_new)
        shift = np.where(dead, 0.0, m_new)
        p = np.exp(s - shift[:, None])
        p[np.isneginf(s)] = 0.0
        alpha = np.where(dead, 0.0, np.exp(m_run[rows] - shift))
        l_run[rows] = l_run[rows] * alpha + p.sum(axis=1)
        out[rows] = out[rows] * alpha[:, None] + p @ v_tile
        m_run[rows] = m_new

    alive = l_run > 0
    skipped = int((~alive).sum())
    safe = np.where(alive, l_run, 1.0)
    out = np.where(alive[:, None], out / safe[:, None], 0.0)
    log_norm = np.where(alive, m_run + np.log(safe), -np.inf)
    return AttentionOutput(out=out, row_log_normalizers=log_norm,
                           skipped_rows=skipped)


def utilization(schedule: TileSchedule) -> UtilizationStats:
    """Fill statistics of a schedule; 1.0 means every tile is full."""
    n_tiles = len(schedule.tiles)
    useful = sum(t.filled for t in schedule.tiles)
    capacity = n_tiles * schedule.tile_len
    return UtilizationStats(
        tiles=n_tiles,
        useful_rows=useful,
        capacity=capacity,
        utilization=useful / capacity if capacity else 1.0,
    )
