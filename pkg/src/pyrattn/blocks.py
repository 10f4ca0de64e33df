"""Sequence block partitioning and the pooled KV pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix, mean_pool_rows


@dataclass(frozen=True)
class BlockLayout:
    """Partitioning of a length-N sequence into query and KV blocks.

    ``levels`` is the number of pooling levels kept per KV block:
    level 1 is the raw block, each later level halves the row count.
    """

    seq_len: int
    head_dim: int
    q_block: int
    k_block: int
    levels: int

    def __post_init__(self):
        if min(self.seq_len, self.head_dim, self.q_block, self.k_block) < 1:
            raise ValidationError("layout dimensions must be positive")
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.seq_len % self.q_block:
            raise ValidationError(
                f"seq_len {self.seq_len} not divisible by q_block {self.q_block}"
            )
        if self.seq_len % self.k_block:
            raise ValidationError(
                f"seq_len {self.seq_len} not divisible by k_block {self.k_block}"
            )
        if self.k_block % (1 << (self.levels - 1)):
            raise ValidationError(
                f"k_block {self.k_block} not divisible by 2^{self.levels - 1}; "
                f"the coarsest level would be empty"
            )

    @property
    def n_q(self) -> int:
        return self.seq_len // self.q_block

    @property
    def n_k(self) -> int:
        return self.seq_len // self.k_block

    def pooled_len(self, level: int) -> int:
        """Rows of a KV block after pooling to ``level``."""
        if not 1 <= level <= self.levels:
            raise ValidationError(f"level {level} outside 1..{self.levels}")
        return self.k_block >> (level - 1)


def make_layout(seq_len: int, head_dim: int, q_block: int, k_block: int,
                levels: int) -> BlockLayout:
    """Build a validated :class:`BlockLayout`."""
    return BlockLayout(seq_len, head_dim, q_block, k_block, levels)


@dataclass(frozen=True)
class PyramidKV:
    """Per-block pooled key/value stacks.

    ``keys[j][h-1]`` is KV block j pooled to level h, shape
    (k_block / 2^(h-1), head_dim). Level 1 equals the raw block.
    """

    layout: BlockLayout
    keys: tuple
    values: tuple

    def k(self, block: int, level: int) -> np.ndarray:
        return self.keys[block][level - 1]

    def v(self, block: int, level: int) -> np.ndarray:
        return self.values[block][level - 1]


def _pool_stack(block: np.ndarray, levels: int) -> tuple:
    stack = [block]
    for _ in range(levels - 1):
        stack.append(mean_pool_rows(stack[-1]))
    return tuple(stack)


def build_pyramid(k, v, layout: BlockLayout) -> PyramidKV:
    """Split K and V into blocks and pool each block ``layout.levels`` deep."""
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    expected = (layout.seq_len, layout.head_dim)
    if k.shape != expected or v.shape != expected:
        raise ValidationError(
            f"K/V shapes {k.shape}/{v.shape} do not match layout {expected}"
        )
    bk = layout.k_block
    keys = []
    values = []
    for j in range(layout.n_k):
        rows = slice(j * bk, (j + 1) * bk)
        keys.append(_pool_stack(k[rows], layout.levels))
        values.append(_pool_stack(v[rows], layout.levels))
    return PyramidKV(layout=layout, keys=tuple(keys), values=tuple(values))
