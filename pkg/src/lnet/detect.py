"""Peak extraction in Hough space and the two detectors built on it: the
classical transform-plus-NMS baseline and the trained network."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .fht import (DyadicLine, fht_forward, hough_shape, line_from_cell,
                  pattern_length_map)
from .geometry import BoundaryLine
from .model import LNetModel, forward

DEFAULT_WINDOW = 5
DEFAULT_MIN_CONF = 0.05
# the raw transform spreads each line over a butterfly-shaped ridge, so the
# baseline suppresses over a much wider window than the trained network,
# whose targets are sigma=1.8 blobs spanning a couple of cells
BASELINE_WINDOW = 17
BASELINE_MIN_CONF = 0.02


@dataclass(frozen=True)
class Detection:
    line: BoundaryLine
    confidence: float
    cell: DyadicLine

    def to_json(self) -> dict:
        (x0, y0), (x1, y1) = self.line.endpoints()
        return {"x0": x0, "y0": y0, "x1": x1, "y1": y1,
                "confidence": self.confidence, "quadrant": self.cell.quadrant,
                "offset_x": self.cell.offset_x, "shift_s": self.cell.shift_s}


def nms_peaks(hmap, window: int = DEFAULT_WINDOW,
              min_conf: float = DEFAULT_MIN_CONF) -> list:
    """Detections at cells that dominate their window x window neighborhood
    within their plane (equal values resolved toward smaller (s, x)), have
    value >= min_conf, and are outside the zero region.  Sorted by
    confidence descending (ties by cell address for determinism).

    Cells whose continuous line only grazes a frame corner (offset_x ==
    -shift_s) carry no usable line and are skipped.
    """
    hmap = np.ascontiguousarray(hmap, dtype=np.float64)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    n = hmap.shape[1]
    if hmap.shape != hough_shape(n):
        raise ValueError(f"expected (4, n, 2n-1) map, got {hmap.shape}")
    mask = kernels.nms_mask(hmap, window // 2, min_conf)
    out = []
    for q, s, c in np.argwhere(mask):
        cell = DyadicLine(int(q), int(c) - (n - 1), int(s), n)
        try:
            line = line_from_cell(cell)
        except ValueError:
            # corner grazers (x == -s and x == n-1 with s > 0) have no
            # usable line
            continue
        out.append(Detection(line, float(hmap[q, s, c]), cell))
    out.sort(key=lambda d: (-d.confidence, d.cell.quadrant,
                            d.cell.shift_s, d.cell.offset_x))
    return out


def baseline_detect(image, window: int = BASELINE_WINDOW,
                    min_conf: float = BASELINE_MIN_CONF,
                    length_normalize: bool = True,
                    subtract_background: bool = True) -> list:
    """Hough transform followed by NMS.

    With length normalization each cell is divided by its pattern's
    in-image pixel count, making the vote a mean intensity in [0, 1]
    comparable across line lengths; cells with empty patterns are dropped.
    The additive noise floor varies per image and shifts every cell's mean
    equally, so by default the image's mean intensity is subtracted from
    the normalized votes; this leaves the within-image ranking (and the
    NMS cell set) untouched but makes confidences comparable across the
    dataset.  Disable both flags to get the raw vote sums."""
    votes = fht_forward(image)
    if length_normalize:
        counts = pattern_length_map(image.shape[0])
        votes = np.divide(votes, counts, out=np.zeros_like(votes),
                          where=counts > 0)
        if subtract_background:
            votes -= image.mean()
    return nms_peaks(votes, window, min_conf)


def lnet_detect(model: LNetModel, image, window: int = DEFAULT_WINDOW,
                min_conf: float = DEFAULT_MIN_CONF) -> list:
    """Network prediction followed by NMS."""
    return nms_peaks(forward(model, image), window, min_conf)
