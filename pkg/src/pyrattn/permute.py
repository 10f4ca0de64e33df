"""Space-filling-curve token permutations.

Reordering tokens so that sequence neighbours are grid neighbours raises
the similarity of adjacent keys, which is what makes dyadic pooling of
KV blocks cheap to apply. 2D grids use the classic recursive Hilbert
construction (axis lengths must be powers of two); 3D grids stack 2D
curves slice by slice in serpentine order, which keeps unit steps but is
an approximation rather than a true 3D Hilbert curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix


@dataclass(frozen=True)
class Permutation:
    """A bijection on token indices with its precomputed inverse."""

    order: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        n = order.shape[0]
        if sorted(order.tolist()) != list(range(n)):
            raise ValidationError("order is not a bijection on 0..n-1")
        inverse = np.empty(n, dtype=np.int64)
        inverse[order] = np.arange(n, dtype=np.int64)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "inverse", inverse)

    def __len__(self) -> int:
        return len(self.order)


def _sgn(v: int) -> int:
    return (v > 0) - (v < 0)


def _curve2d(x, y, ax, ay, bx, by):
    """Generalized Hilbert walk over the rectangle spanned by (ax,ay),(bx,by)."""
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)

    if h == 1:
        for _ in range(w):
            yield (x, y)
            x, y = x + dax, y + day
        return
    if w == 1:
        for _ in range(h):
            yield (x, y)
            x, y = x + dbx, y + dby
        return

    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)

    if 2 * w > 3 * h:
        if (w2 % 2) and (w > 2):
            ax2, ay2 = ax2 + dax, ay2 + day
        yield from _curve2d(x, y, ax2, ay2, bx, by)
        yield from _curve2d(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by)
    else:
        if (h2 % 2) and (h > 2):
            bx2, by2 = bx2 + dbx, by2 + dby
        yield from _curve2d(x, y, bx2, by2, ax2, ay2)
        yield from _curve2d(x + bx2, y + by2, ax, ay, bx - bx2, by - by2)
        yield from _curve2d(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2, -by2, -(ax - ax2), -(ay - ay2),
        )


def _walk2d(n0: int, n1: int):
    if n0 >= n1:
        yield from _curve2d(0, 0, n0, 0, 0, n1)
    else:
        yield from ((x, y) for (y, x) in _curve2d(0, 0, n1, 0, 0, n0))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hilbert_order(grid) -> Permutation:
    """Curve order for a 2D or 3D grid, as a permutation of flat indices.

    Tokens are assumed to be laid out row-major over ``grid``. Entry i of
    the returned order is the flat index of the i-th grid cell along the
    curve. 2D axes must be powers of two; 3D accepts any lengths.
    """
    grid = [int(g) for g in grid]
    if len(grid) not in (2, 3):
        raise ValidationError(f"grid must have 2 or 3 axes, got {len(grid)}")
    if min(grid) < 1:
        raise ValidationError("grid axes must be positive")

    if len(grid) == 2:
        n0, n1 = grid
        if not (_is_pow2(n0) and _is_pow2(n1)):
            raise ValidationError(
                f"2D grid axes must be powers of two, got {n0}x{n1}"
            )
        flat = [x * n1 + y for (x, y) in _walk2d(n0, n1)]
    else:
        n0, n1, n2 = grid
        flat = []
        plane = None
        for s in range(n0):
            if plane is None:
                plane = list(_walk2d(n1, n2))
            else:
                plane = plane[::-1]  # serpentine: re-enter where we left off
            flat.extend(s * n1 * n2 + x * n2 + y for (x, y) in plane)
    return Permutation(order=np.asarray(flat, dtype=np.int64))


def apply_permutation(x, p: Permutation) -> np.ndarray:
    """Reorder rows of ``x`` so that output row i is input row order[i]."""
    x = as_matrix(x, "sequence")
    if x.shape[0] != len(p):
        raise ValidationError(
            f"permutation covers {len(p)} rows but sequence has {x.shape[0]}"
        )
    return x[p.order]


def invert_permutation(p: Permutation) -> Permutation:
    return Permutation(order=p.inverse.copy())
