"""Fast Hough Transform over dyadic line patterns.

Geometry conventions
--------------------
An input image is an (n, n) float64 array, n a power of two, indexed
[row, col].  The transform emits 4 planes of shape (n, 2n-1); a cell
(quadrant q, row s, col c) accumulates the image sum along one discrete
line pattern, where s is the shift (column difference between the
pattern's two ends) and c encodes the offset x = c - (n - 1) of the
pattern's starting column ("bottom point", row 0 in the canonical frame).

The canonical (quadrant 0) pattern of (x, s) runs from (col x, row 0) to
(col x + s, row n-1) and is defined recursively: a height-2h pattern with
shift s is the height-h pattern of shift s//2 stacked under a copy offset
by s//2 + s%2 columns.  Quadrants 1-3 apply the canonical transform to the
transposed / column-mirrored / transposed-then-mirrored image; together the
four planes cover line orientations (-90, 90] degrees off the column axis:

    q0: [0, 45]   (vertical through the exact diagonal)
    q1: (45, 90]  (horizontal lines live here)
    q2: (-45, 0)
    q3: (-90, -45]

Pattern pixels falling outside the image contribute zero; cells with
x < -s have no in-image pixels at all (the "zero region") and are exactly
zero for every input.
"""

import math
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .geometry import BoundaryLine, canonical_direction, clip_line_to_frame

N_QUADRANTS = 4


class _Scratch(threading.local):
    """Per-thread butterfly work buffers, reused across calls."""

    def __init__(self):
        self.bufs = {}

    def pair(self, n):
        got = self.bufs.get(n)
        if got is None:
            got = (np.empty((n, 3 * n - 2)), np.empty((n, 3 * n - 2)))
            self.bufs[n] = got
        return got


_SCRATCH = _Scratch()


@dataclass(frozen=True)
class DyadicLine:
    """Address of one Hough cell: quadrant, bottom-column offset, shift."""

    quadrant: int
    offset_x: int
    shift_s: int
    n: int

    def __post_init__(self):
        if self.quadrant not in range(N_QUADRANTS):
            raise ValueError(f"quadrant must be 0..3, got {self.quadrant}")
        if not 0 <= self.shift_s <= self.n - 1:
            raise ValueError(f"shift {self.shift_s} outside [0, {self.n - 1}]")
        if not -(self.n - 1) <= self.offset_x <= self.n - 1:
            raise ValueError(
                f"offset {self.offset_x} outside [{-(self.n - 1)}, {self.n - 1}]")

    @property
    def is_zero_region(self) -> bool:
        return self.offset_x < -self.shift_s

    @property
    def col(self) -> int:
        return self.offset_x + self.n - 1


def hough_shape(n: int) -> tuple:
    return (N_QUADRANTS, n, 2 * n - 1)


def zero_region_mask(n: int) -> np.ndarray:
    """Boolean (n, 2n-1) mask of cells whose pattern misses the image."""
    x = np.arange(2 * n - 1) - (n - 1)
    s = np.arange(n)
    return x[None, :] < -s[:, None]


def _require_square_pow2(image) -> np.ndarray:
    image = np.ascontiguousarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"image must be square 2-D, got shape {image.shape}")
    n = image.shape[0]
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"image size {n} is not a power of two")
    return image


@lru_cache(maxsize=16)
def _canonical_cols(n: int) -> np.ndarray:
    """cols[s, r] = column of the canonical pattern (x=0, shift s) at row r."""
    table = np.zeros((1, 1), dtype=np.int64)
    h = 1
    while h < n:
        nxt = np.empty((2 * h, 2 * h), dtype=np.int64)
        for s in range(2 * h):
            s2, b = divmod(s, 2)
            nxt[s, :h] = table[s2]
            nxt[s, h:] = table[s2] + s2 + b
        table = nxt
        h *= 2
    table.setflags(write=False)
    return table


def dyadic_pattern(line: DyadicLine) -> np.ndarray:
    """In-image pixels of the cell's pattern as an (k, 2) array of
    (row, col), one pixel per canonical row before clipping."""
    n = line.n
    cols = _canonical_cols(n)[line.shift_s] + line.offset_x
    rows = np.arange(n, dtype=np.int64)
    keep = (cols >= 0) & (cols < n)
    c, r = cols[keep], rows[keep]
    if line.quadrant == 0:
        out = np.stack([r, c], axis=1)
    elif line.quadrant == 1:
        out = np.stack([c, r], axis=1)
    elif line.quadrant == 2:
        out = np.stack([r, n - 1 - c], axis=1)
    else:
        out = np.stack([n - 1 - c, r], axis=1)
    return out


def _quadrant_views(image):
    return (image,
            image.T,
            image[:, ::-1],
            image.T[:, ::-1])


def fht_forward(image) -> np.ndarray:
    """Exact FHT: (n, n) image -> (4, n, 2n-1) map in O(n^2 log n) adds."""
    image = _require_square_pow2(image)
    n = image.shape[0]
    cur, nxt = _SCRATCH.pair(n)
    out = np.empty(hough_shape(n))
    for q, view in enumerate(_quadrant_views(image)):
        padded = kernels.fht_fwd(np.ascontiguousarray(view), cur, nxt)
        out[q] = padded[:, :2 * n - 1]
    return out


def fht_vjp(out_grad) -> np.ndarray:
    """Adjoint of fht_forward: distributes cell cotangents back along their
    patterns; equals the exact gradient of the Hough layer."""
    out_grad = np.ascontiguousarray(out_grad, dtype=np.float64)
    if out_grad.ndim != 3 or out_grad.shape[0] != N_QUADRANTS:
        raise ValueError(f"expected (4, n, 2n-1), got shape {out_grad.shape}")
    n = out_grad.shape[1]
    if out_grad.shape[2] != 2 * n - 1 or n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"invalid hough shape {out_grad.shape}")
    cur, nxt = _SCRATCH.pair(n)
    g0 = kernels.fht_rev(np.ascontiguousarray(out_grad[0]), cur, nxt)
    g1 = kernels.fht_rev(np.ascontiguousarray(out_grad[1]), cur, nxt)
    g2 = kernels.fht_rev(np.ascontiguousarray(out_grad[2]), cur, nxt)
    g3 = kernels.fht_rev(np.ascontiguousarray(out_grad[3]), cur, nxt)
    return g0 + g1.T + g2[:, ::-1] + g3[:, ::-1].T


def slow_hough_oracle(image) -> np.ndarray:
    """Reference O(n^3) transform: direct summation over dyadic patterns."""
    image = _require_square_pow2(image)
    n = image.shape[0]
    cols0 = _canonical_cols(n)
    xs = np.arange(-(n - 1), n, dtype=np.int64)
    rows = np.arange(n)
    out = np.empty(hough_shape(n))
    for q, view in enumerate(_quadrant_views(image)):
        v = np.ascontiguousarray(view)
        for s in range(n):
            cols = cols0[s][None, :] + xs[:, None]
            valid = (cols >= 0) & (cols < n)
            vals = v[rows[None, :], np.clip(cols, 0, n - 1)]
            out[q, s] = np.where(valid, vals, 0.0).sum(axis=1)
    return out


@lru_cache(maxsize=16)
def pattern_length_map(n: int) -> np.ndarray:
    """In-image pixel count of every cell's pattern (read-only, cached)."""
    counts = fht_forward(np.ones((n, n)))
    counts.setflags(write=False)
    return counts


# ------------------------------------------------- cell <-> line mapping


def line_from_cell(line: DyadicLine) -> BoundaryLine:
    """Continuous line of a Hough cell, clipped to the image frame."""
    n, x, s = line.n, line.offset_x, line.shift_s
    if line.is_zero_region:
        raise ValueError(f"zero-region cell {line} has no in-image line")
    hi = n - 1
    if line.quadrant == 0:
        p, q = (x, 0.0), (x + s, float(hi))
    elif line.quadrant == 1:
        p, q = (0.0, x), (float(hi), x + s)
    elif line.quadrant == 2:
        p, q = (hi - x, 0.0), (hi - x - s, float(hi))
    else:
        p, q = (0.0, hi - x), (float(hi), hi - x - s)
    clipped = clip_line_to_frame(p, q, n)
    if clipped is None:
        raise ValueError(f"cell {line} only grazes a frame corner")
    return clipped


def _round_half_down(v: float) -> int:
    return int(math.ceil(v - 0.5))


def cell_from_line(bline: BoundaryLine, refine_radius: int = 2) -> DyadicLine:
    """Quantize a continuous frame line to its Hough cell.

    The quadrant is picked by the line direction (dx, dy), dy >= 0:
    q0 owns 0 <= dx <= dy (both the vertical and the exact-diagonal
    boundary), q1 owns dx > dy >= 0, q2 owns -dy < dx < 0, and q3 owns
    dx <= -dy; each line therefore lands in exactly one quadrant.

    (x, s) are computed in the quadrant's canonical frame, rounded half
    toward -inf, then refined over a small integer neighborhood to the
    cell whose continuous line minimizes the end-matching distance; plain
    rounding is optimal when both line ends leave through the top/bottom
    rows, but for lines cut by a side edge the frame ends move at a rate
    of up to (n-1)/s per unit offset, and the neighborhood search absorbs
    that amplification.
    """
    from .metrics import line_distance  # local import; metrics sits above fht

    n = bline.n
    hi = n - 1
    dx, dy = canonical_direction(bline)
    p0x, p0y = bline.p0

    def col_at(y):
        return p0x + (y - p0y) * dx / dy

    def row_at(x):
        return p0y + (x - p0x) * dy / dx

    if 0.0 <= dx <= dy:
        quad = 0
        xr = col_at(0.0)
        sr = hi * dx / dy
    elif dx > dy:
        quad = 1
        xr = row_at(0.0)
        sr = hi * dy / dx
    elif -dy < dx < 0.0:
        quad = 2
        xr = hi - col_at(0.0)
        sr = -hi * dx / dy
    else:
        quad = 3
        xr = hi - row_at(0.0)
        sr = -hi * dy / dx

    s0 = min(max(_round_half_down(sr), 0), hi)
    x0 = min(max(_round_half_down(xr), -hi), hi)

    def try_cell(x, s, best, best_key):
        cell = DyadicLine(quad, x, s, n)
        try:
            d = line_distance(bline, line_from_cell(cell))
        except ValueError:
            return best, best_key
        key = (d, s, x)
        if best_key is None or key < best_key:
            return cell, key
        return best, best_key

    best, best_key = None, None
    for s in range(max(0, s0 - refine_radius), min(hi, s0 + refine_radius) + 1):
        for x in range(max(-s, x0 - refine_radius),
                       min(hi, x0 + refine_radius) + 1):
            best, best_key = try_cell(x, s, best, best_key)

    if best_key is None or best_key[0] > 1.0:
        # Frame-corner grazers: the end positions are hypersensitive to the
        # offset, so the nearest good cell may sit far from the rounded
        # (x, s).  Scan every shift, offsetting each line to pass through
        # the target's midpoint.
        mx = 0.5 * (bline.p0[0] + bline.p1[0])
        my = 0.5 * (bline.p0[1] + bline.p1[1])
        for s in range(0, hi + 1):
            if quad == 0:
                xc = mx - s * my / hi
            elif quad == 1:
                xc = my - s * mx / hi
            elif quad == 2:
                xc = hi - mx - s * my / hi
            else:
                xc = hi - my - s * mx / hi
            xc = _round_half_down(xc)
            for x in (xc - 1, xc, xc + 1):
                if -s <= x <= hi:
                    best, best_key = try_cell(x, s, best, best_key)
    if best is None:  # every candidate grazed a corner; keep the clamp
        return DyadicLine(quad, max(x0, -s0), s0, n)
    return best
