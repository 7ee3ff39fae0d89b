"""Per-RoI grid selection and block-average feature pooling.

``dynamic_grid_size`` picks the integer grid whose row/column ratio best
matches the box's height/width ratio under an area budget; ``block_average_pool``
cuts the box into that many equal blocks and averages 2x2 bilinear samples
per block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import Array, VjpRecord, bilinear_sample_many_vjp

# fixed-size mode used by the fixed-vs-dynamic sampler ablation
FIXED_GRID = (8, 8)


@dataclass(frozen=True)
class RoIBox:
    """Continuous box in feature-map coordinates, corners (x0, y0), (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box: {self}")
        if not all(map(math.isfinite, (self.x0, self.y0, self.x1, self.y1))):
            raise ValueError(f"non-finite box: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0


class GridSize(NamedTuple):
    h: int
    w: int

    @property
    def area(self) -> int:
        return self.h * self.w


def dynamic_grid_size(box: RoIBox, budget: int) -> GridSize:
    """Grid (h, w) with h*w <= budget minimizing |h/w - box.height/box.width|.

    Ties go to the larger area, then the larger h.  For each row count h the
    unconstrained optimum is w = h/ratio and |h/w - ratio| is unimodal in w,
    so only the floor/ceil of that optimum (clamped to the feasible range)
    need checking; the test-suite oracle enumerates every pair instead.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    ratio = box.height / box.width
    best: tuple[float, int, int] | None = None
    best_hw = GridSize(1, 1)
    for h in range(1, budget + 1):
        w_max = budget // h
        w_star = h / ratio
        cands = {1, w_max}
        if w_star >= 1.0:
            cands.add(min(int(math.floor(w_star)), w_max))
            cands.add(min(int(math.ceil(w_star)), w_max))
        for w in cands:
            if w < 1:
                continue
            diff = abs(h / w - ratio)
            key = (diff, -(h * w), -h)
            if best is None or key < best:
                best = key
                best_hw = GridSize(h, w)
    return best_hw


def _block_sample_points(box: RoIBox, grid: GridSize) -> tuple[Array, Array]:
    """Continuous (y, x) coordinates of the 4 quarter-point samples per block,
    ordered (block_row, block_col, sample)."""
    h, w = grid
    bh = box.height / h
    bw = box.width / w
    off = np.array([0.25, 0.75])
    ys = box.y0 + (np.arange(h)[:, None] + off[None, :]) * bh  # (h, 2)
    xs = box.x0 + (np.arange(w)[:, None] + off[None, :]) * bw  # (w, 2)
    # (h, w, 2, 2) -> sample index s = 2*sy + sx
    yy = np.broadcast_to(ys[:, None, :, None], (h, w, 2, 2))
    xx = np.broadcast_to(xs[None, :, None, :], (h, w, 2, 2))
    return yy.ravel(), xx.ravel()


def block_average_pool_vjp(
    fmap: Array, box: RoIBox, grid: GridSize
) -> tuple[Array, VjpRecord]:
    """Pool ``fmap`` (C, H, W) over the box into a (C, h, w) grid.

    Each output value is the mean of 4 bilinear samples at the (1/4, 3/4)
    fractions of its block; samples outside the map clamp to the border.
    """
    h, w = grid
    ys, xs = _block_sample_points(box, grid)
    vals, rec = bilinear_sample_many_vjp(fmap, ys, xs)
    C = fmap.shape[0]
    out = vals.reshape(C, h, w, 4).mean(axis=3)

    def backward(gy: Array) -> tuple[Array]:
        gs = np.repeat(gy[..., None] / 4.0, 4, axis=3).reshape(C, -1)
        return rec.backward(gs)

    return out, VjpRecord("block_average_pool", backward)


def block_average_pool(fmap: Array, box: RoIBox, grid: GridSize) -> Array:
    return block_average_pool_vjp(fmap, box, grid)[0]
