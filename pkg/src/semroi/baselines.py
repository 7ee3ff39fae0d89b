"""Reference RoI feature extractors: quantized max pooling and aligned
bilinear averaging, both producing a fixed (out_h, out_w, C) grid."""

from __future__ import annotations

import numpy as np

from .numerics import Array, VjpRecord
from .sampler import GridSize, RoIBox, block_average_pool_vjp

DEFAULT_OUT = (7, 7)


def _pixel_range(start: float, end: float, size: int) -> tuple[int, int]:
    """Integer pixels p with start <= p < end, clipped to the map."""
    lo = int(np.ceil(start))
    hi = int(np.ceil(end)) - 1
    return max(lo, 0), min(hi, size - 1)


def roi_pool(fmap: Array, box: RoIBox, out: tuple[int, int] = DEFAULT_OUT) -> Array:
    """Max-pool integer pixels per quantized bin -> (out_h, out_w, C).

    A bin with no integer pixel inside falls back to the pixel nearest its
    center, so tiny boxes replicate their pixel.
    """
    c, height, width = fmap.shape
    oh, ow = out
    bh = box.height / oh
    bw = box.width / ow
    result = np.empty((oh, ow, c))
    for bj in range(oh):
        y_lo, y_hi = _pixel_range(box.y0 + bj * bh, box.y0 + (bj + 1) * bh, height)
        for bk in range(ow):
            x_lo, x_hi = _pixel_range(box.x0 + bk * bw, box.x0 + (bk + 1) * bw, width)
            if y_lo > y_hi or x_lo > x_hi:
                py = int(np.clip(round(box.y0 + (bj + 0.5) * bh), 0, height - 1))
                px = int(np.clip(round(box.x0 + (bk + 0.5) * bw), 0, width - 1))
                result[bj, bk] = fmap[:, py, px]
            else:
                block = fmap[:, y_lo : y_hi + 1, x_lo : x_hi + 1]
                result[bj, bk] = block.max(axis=(1, 2))
    return result


def roi_align_vjp(
    fmap: Array, box: RoIBox, out: tuple[int, int] = DEFAULT_OUT
) -> tuple[Array, VjpRecord]:
    """Average 2x2 bilinear samples per bin -> (out_h, out_w, C).

    Shares the sampling kernel with the dynamic-grid pooler, so the two are
    identical (up to layout) whenever the requested grids coincide.
    """
    pooled, rec = block_average_pool_vjp(fmap, box, GridSize(*out))
    result = np.transpose(pooled, (1, 2, 0))

    def backward(gy: Array) -> tuple[Array]:
        return rec.backward(np.transpose(gy, (2, 0, 1)))

    return result, VjpRecord("roi_align", backward)


def roi_align(fmap: Array, box: RoIBox, out: tuple[int, int] = DEFAULT_OUT) -> Array:
    return roi_align_vjp(fmap, box, out)[0]
