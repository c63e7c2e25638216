"""Dense-array differentiable primitives: 2-D convolution, ReLU, Gaussian
blur, and their exact vector-Jacobian products.

Conventions
-----------
* Everything is float64; tensors are C-contiguous numpy arrays.
* Image-like data is (channels, height, width); the batched variants used
  by the network take (batch, channels, height, width).
* "Convolution" is cross-correlation (no kernel flip), the usual convention
  for learned filters.
* Weights are (out_channels, in_channels, kernel_h, kernel_w).
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import kernels


@dataclass(frozen=True)
class ConvSpec:
    """Shape/padding/dilation contract of one convolution layer."""

    out_channels: int
    kernel_h: int
    kernel_w: int
    in_channels: int
    pad: int
    dilation: int
    bias: bool = True

    def __post_init__(self):
        if min(self.out_channels, self.kernel_h, self.kernel_w,
               self.in_channels, self.dilation) < 1:
            raise ValueError(f"non-positive dimension in {self}")
        if self.pad < 0:
            raise ValueError(f"negative pad in {self}")

    @property
    def param_count(self) -> int:
        n = self.out_channels * self.kernel_h * self.kernel_w * self.in_channels
        return n + (self.out_channels if self.bias else 0)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def out_size(self, h: int, w: int) -> tuple:
        ho = h + 2 * self.pad - self.dilation * (self.kernel_h - 1)
        wo = w + 2 * self.pad - self.dilation * (self.kernel_w - 1)
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {self}")
        return ho, wo


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_conv_args(x, spec, weights, bias):
    if x.ndim != 4:
        raise ValueError(f"input must be (batch, channels, h, w), got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, spec.in_channels is {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ValueError(
            f"weights shape {weights.shape} does not match spec {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(
            f"bias shape {bias.shape}, expected ({spec.out_channels},)")


def pad_nchw(x, pad: int) -> np.ndarray:
    if pad == 0:
        return as_f64(x)
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


def conv2d_nchw(x, spec: ConvSpec, weights, bias, relu: bool = False,
                x_prepadded: bool = False, out=None) -> np.ndarray:
    """Batched cross-correlation with zero padding and dilation.

    `relu=True` fuses the elementwise max(0, .) into the output write; the
    values are identical to relu(conv2d(...)).  With `x_prepadded` the
    input already carries the zero margin, and `out` may supply a reusable
    output buffer (both skip allocations on hot paths).
    """
    x = as_f64(x)
    weights = as_f64(weights)
    bias = as_f64(bias)
    if x_prepadded:
        xp = x
        h, w = x.shape[2] - 2 * spec.pad, x.shape[3] - 2 * spec.pad
        _check_conv_args(x, spec, weights, bias)
    else:
        _check_conv_args(x, spec, weights, bias)
        h, w = x.shape[2], x.shape[3]
        xp = pad_nchw(x, spec.pad)
    ho, wo = spec.out_size(h, w)
    if out is None:
        out = np.empty((x.shape[0], spec.out_channels, ho, wo))
    if spec.kernel_h == 3 and spec.kernel_w == 3:
        return kernels.conv3x3_fwd(xp, weights, bias, spec.dilation, ho, wo,
                                   relu, out)
    if spec.kernel_h == 1 and spec.kernel_w == 1 and spec.pad == 0:
        return kernels.conv1x1_fwd(xp, weights, bias, relu, out)
    return kernels.conv_generic_fwd(xp, weights, bias, spec.dilation, ho, wo,
                                    relu, out)


def conv2d(x, spec: ConvSpec, weights, bias, relu: bool = False) -> np.ndarray:
    """Single-sample (channels, h, w) convolution; see conv2d_nchw."""
    x = as_f64(x)
    if x.ndim != 3:
        raise ValueError(f"input must be (channels, h, w), got shape {x.shape}")
    return conv2d_nchw(x[None], spec, weights, bias, relu)[0]


def _flip_weights(weights) -> np.ndarray:
    """Swap in/out channels and flip both spatial axes: the input gradient
    of a cross-correlation is a cross-correlation with these weights."""
    return np.ascontiguousarray(weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv_input_grad_nchw(out_grad, spec: ConvSpec, weights,
                         grad_prepadded=None, out=None) -> np.ndarray:
    """d/dx of sum(out_grad * conv2d_nchw(x, ...)).

    For the usual specs (back-pad = dilation*(kernel-1) - pad >= 0) this
    runs as a flipped-weight forward convolution; `grad_prepadded` may
    supply out_grad already embedded in a zero margin of that width.
    """
    weights = as_f64(weights)
    back_pad = spec.dilation * (spec.kernel_h - 1) - spec.pad
    back_pad_w = spec.dilation * (spec.kernel_w - 1) - spec.pad
    if back_pad >= 0 and back_pad == back_pad_w:
        if grad_prepadded is not None:
            gp = grad_prepadded
            ho = gp.shape[2] - 2 * back_pad
            wo = gp.shape[3] - 2 * back_pad
        else:
            gp = pad_nchw(as_f64(out_grad), back_pad)
            ho, wo = out_grad.shape[2], out_grad.shape[3]
        wt = _flip_weights(weights)
        zero_bias = np.zeros(spec.in_channels)
        hi = ho + spec.dilation * (spec.kernel_h - 1) - 2 * spec.pad
        wi = wo + spec.dilation * (spec.kernel_w - 1) - 2 * spec.pad
        if out is None:
            out = np.empty((gp.shape[0], spec.in_channels, hi, wi))
        if spec.kernel_h == 3 and spec.kernel_w == 3:
            return kernels.conv3x3_fwd(gp, wt, zero_bias, spec.dilation,
                                       hi, wi, False, out)
        if spec.kernel_h == 1 and spec.kernel_w == 1:
            return kernels.conv1x1_fwd(gp, wt, zero_bias, False, out)
        return kernels.conv_generic_fwd(gp, wt, zero_bias, spec.dilation,
                                        hi, wi, False, out)
    # pad wider than the kernel reach: fall back to the scatter kernel
    out_grad = as_f64(out_grad)
    hi = out_grad.shape[2] - 2 * spec.pad + spec.dilation * (spec.kernel_h - 1)
    wi = out_grad.shape[3] - 2 * spec.pad + spec.dilation * (spec.kernel_w - 1)
    hp, wp = hi + 2 * spec.pad, wi + 2 * spec.pad
    gxp = kernels.conv_generic_igrad(out_grad, weights, spec.dilation, hp, wp)
    p = spec.pad
    return gxp[:, :, p:hp - p, p:wp - p].copy() if p else gxp


def conv_param_grads_nchw(x_padded, spec: ConvSpec, out_grad,
                          grad_origin=(0, 0)):
    """(weight_grad, bias_grad) of sum(out_grad * conv).  `x_padded` is the
    pre-padded input; out_grad may sit inside a larger buffer with its
    top-left value at `grad_origin`."""
    goi, goj = grad_origin
    if spec.kernel_h == 3 and spec.kernel_w == 3:
        return kernels.conv3x3_wgrad(x_padded, out_grad, goi, goj, spec.dilation)
    if spec.kernel_h == 1 and spec.kernel_w == 1:
        return kernels.conv1x1_wgrad(x_padded, out_grad, goi, goj)
    return kernels.conv_generic_wgrad(x_padded, out_grad, goi, goj,
                                      spec.dilation, spec.kernel_h, spec.kernel_w)


def conv2d_vjp(x, spec: ConvSpec, weights, out_grad, need_input_grad: bool = True):
    """Exact gradients of sum(out_grad * conv2d(x, spec, weights, bias)).

    Returns (input_grad, weight_grad, bias_grad); input_grad is None when
    `need_input_grad` is False (saves the dominant cost for first layers).
    """
    x = as_f64(x)
    weights = as_f64(weights)
    out_grad = as_f64(out_grad)
    if x.ndim != 3:
        raise ValueError(f"input must be (channels, h, w), got shape {x.shape}")
    xb = x[None]
    _check_conv_args(xb, spec, weights, None)
    ho, wo = spec.out_size(x.shape[1], x.shape[2])
    if out_grad.shape != (spec.out_channels, ho, wo):
        raise ValueError(
            f"out_grad shape {out_grad.shape}, expected {(spec.out_channels, ho, wo)}")
    gb = out_grad[None]
    xp = pad_nchw(xb, spec.pad)
    gw, gbias = conv_param_grads_nchw(xp, spec, gb)
    gx = None
    if need_input_grad:
        gx = conv_input_grad_nchw(gb, spec, weights)[0]
    return gx, gw, gbias


def relu(x) -> np.ndarray:
    return np.maximum(as_f64(x), 0.0)


def relu_vjp(x, out_grad) -> np.ndarray:
    """Pass out_grad where x > 0; the subgradient at exactly 0 is 0."""
    x = as_f64(x)
    out_grad = as_f64(out_grad)
    if x.shape != out_grad.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {out_grad.shape}")
    return kernels.relu_bwd(x, out_grad)


def gaussian_kernel_1d(sigma: float, normalize: bool) -> np.ndarray:
    """Truncated Gaussian taps exp(-i^2 / (2 sigma^2)), i in [-r, r] with
    r = ceil(3 sigma).  Unnormalized keeps the center tap at 1.0."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    r = int(np.ceil(3.0 * sigma))
    i = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma * sigma))
    if normalize:
        k = k / k.sum()
    return k


def gaussian_blur(x, sigma: float, normalize: bool = True,
                  boundary: str = "replicate") -> np.ndarray:
    """Separable Gaussian blur of a single-channel image.

    Accepts (h, w) or (1, h, w); boundary is 'replicate' (clamp to edge) or
    'zero'.  sigma == 0 returns the input unchanged (as float64).
    """
    x = as_f64(x)
    squeeze = False
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single channel, got shape {x.shape}")
        x = x[0]
        squeeze = True
    elif x.ndim != 2:
        raise ValueError(f"expected (h, w) or (1, h, w), got shape {x.shape}")
    if boundary not in ("replicate", "zero"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    k = gaussian_kernel_1d(sigma, normalize)
    if k.size == 1 and k[0] == 1.0:
        out = x.copy()
    else:
        mode = "nearest" if boundary == "replicate" else "constant"
        out = correlate1d(x, k, axis=0, mode=mode, cval=0.0)
        out = correlate1d(out, k, axis=1, mode=mode, cval=0.0)
    return out[None] if squeeze else out
