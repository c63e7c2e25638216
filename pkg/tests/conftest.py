import numpy as np
import pytest

from lnet.geometry import clip_line_to_frame


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame_line(rng, n, min_len=10.0):
    """Line through two random interior points, extended to the frame."""
    while True:
        a = rng.uniform(0.0, n - 1, 2)
        b = rng.uniform(0.0, n - 1, 2)
        if np.hypot(*(b - a)) < min_len:
            continue
        line = clip_line_to_frame(tuple(a), tuple(b), n)
        if line is not None:
            return line


def conv2d_reference(x, weights, bias, pad, dilation):
    """Independent direct convolution: six nested loops over the output
    and kernel, zero padding handled by bounds checks."""
    co, ci, kh, kw = weights.shape
    _, h, w = x.shape
    ho = h + 2 * pad - dilation * (kh - 1)
    wo = w + 2 * pad - dilation * (kw - 1)
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(ci):
                    for ki in range(kh):
                        for kj in range(kw):
                            ii = i + ki * dilation - pad
                            jj = j + kj * dilation - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += weights[o, c, ki, kj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out
