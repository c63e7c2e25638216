"""Continuous line geometry on the image frame.

Points are (x, y) with x = column, y = row, origin at the top-left pixel
center; the frame is the boundary of the closed square [0, n-1] x [0, n-1].
"""

import math
from dataclasses import dataclass

_ON_FRAME_TOL = 1e-9


@dataclass(frozen=True)
class BoundaryLine:
    """A line given by its two intersection points with the image frame."""

    p0: tuple
    p1: tuple
    n: int

    def __post_init__(self):
        hi = self.n - 1
        for p in (self.p0, self.p1):
            x, y = p
            if not (-_ON_FRAME_TOL <= x <= hi + _ON_FRAME_TOL
                    and -_ON_FRAME_TOL <= y <= hi + _ON_FRAME_TOL):
                raise ValueError(f"point {p} outside frame [0, {hi}]^2")
            on_edge = (abs(x) <= _ON_FRAME_TOL or abs(x - hi) <= _ON_FRAME_TOL
                       or abs(y) <= _ON_FRAME_TOL or abs(y - hi) <= _ON_FRAME_TOL)
            if not on_edge:
                raise ValueError(f"point {p} not on the frame of [0, {hi}]^2")
        if self.p0 == self.p1:
            raise ValueError("degenerate line: identical endpoints")

    def endpoints(self):
        return self.p0, self.p1

    def to_list(self):
        return [self.p0[0], self.p0[1], self.p1[0], self.p1[1]]

    @classmethod
    def from_list(cls, vals, n):
        return cls((vals[0], vals[1]), (vals[2], vals[3]), n)


def clip_line_to_frame(p, q, n: int):
    """Intersect the infinite line through p and q with [0, n-1]^2.

    Returns a BoundaryLine, or None when the line misses the square or only
    touches it in a single point (a corner graze).
    """
    hi = float(n - 1)
    px, py = float(p[0]), float(p[1])
    dx = float(q[0]) - px
    dy = float(q[1]) - py
    if dx == 0.0 and dy == 0.0:
        raise ValueError("p and q coincide; no line defined")
    t0, t1 = -math.inf, math.inf
    for start, d in ((px, dx), (py, dy)):
        if d == 0.0:
            if start < -_ON_FRAME_TOL or start > hi + _ON_FRAME_TOL:
                return None
        else:
            ta = (0.0 - start) / d
            tb = (hi - start) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if not t1 - t0 > _ON_FRAME_TOL:
        return None
    a = (min(max(px + t0 * dx, 0.0), hi), min(max(py + t0 * dy, 0.0), hi))
    b = (min(max(px + t1 * dx, 0.0), hi), min(max(py + t1 * dy, 0.0), hi))
    if a == b:
        return None
    return BoundaryLine(a, b, n)


def canonical_direction(line: BoundaryLine):
    """Direction (dx, dy) of the line normalized to dy >= 0, and dx > 0 when
    dy == 0, so every line gets exactly one direction."""
    dx = line.p1[0] - line.p0[0]
    dy = line.p1[1] - line.p0[1]
    if dy < 0.0 or (dy == 0.0 and dx < 0.0):
        dx, dy = -dx, -dy
    return dx, dy
