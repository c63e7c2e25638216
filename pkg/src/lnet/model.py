"""LNet architectures: convolutions in image space, a fixed Hough layer,
and a shared convolution stack applied to each of the four Hough planes.

Two variants are provided: "fast" (3 convolutions, 55 parameters) and
"acc" (6 convolutions, 1334 parameters).  Every convolution is followed by
ReLU, including the final 1x1 (predictions are therefore nonnegative, like
the targets).  The four Hough planes ride the batch axis of the conv
primitives, which is what implements branch weight sharing.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fht, kernels
from .ops import (ConvSpec, conv2d_nchw, conv_input_grad_nchw,
                  conv_param_grads_nchw, relu_vjp)

VARIANTS = ("fast", "acc")
CHECKPOINT_MAGIC = "lnet-checkpoint"
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class LNetArch:
    variant: str
    conv_a: tuple
    conv_b: tuple
    n_branches: int = fht.N_QUADRANTS

    @property
    def layers(self) -> tuple:
        return self.conv_a + self.conv_b

    @property
    def param_count(self) -> int:
        return sum(s.param_count for s in self.layers)


@dataclass
class LNetModel:
    arch: LNetArch
    weights: list
    biases: list
    meta: dict = field(default_factory=dict)

    def params(self) -> list:
        """Flat parameter list in layer order: weight, bias, weight, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def build(variant: str) -> LNetArch:
    if variant == "fast":
        conv_a = (ConvSpec(1, 3, 3, 1, pad=1, dilation=1),)
        conv_b = (ConvSpec(4, 3, 3, 1, pad=1, dilation=1),
                  ConvSpec(1, 1, 1, 4, pad=0, dilation=1))
    elif variant == "acc":
        conv_a = (ConvSpec(4, 3, 3, 1, pad=1, dilation=1),
                  ConvSpec(1, 3, 3, 4, pad=1, dilation=1))
        conv_b = (ConvSpec(8, 3, 3, 1, pad=1, dilation=1),
                  ConvSpec(8, 3, 3, 8, pad=2, dilation=2),
                  ConvSpec(8, 3, 3, 8, pad=3, dilation=3),
                  ConvSpec(1, 1, 1, 8, pad=0, dilation=1))
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return LNetArch(variant, conv_a, conv_b)


def identity_kernel(spec: ConvSpec) -> np.ndarray:
    """Center-tap pass-through: expanding layers copy the single input into
    every output channel, channel-preserving layers map i -> i, and reducing
    layers average (1/C_in per input), so a noise-free stack is an exact
    identity on replicated inputs."""
    w = np.zeros(spec.weight_shape)
    ci, cj = spec.kernel_h // 2, spec.kernel_w // 2
    if spec.in_channels == spec.out_channels:
        for c in range(spec.in_channels):
            w[c, c, ci, cj] = 1.0
    elif spec.in_channels == 1:
        w[:, 0, ci, cj] = 1.0
    elif spec.out_channels == 1:
        w[0, :, ci, cj] = 1.0 / spec.in_channels
    else:
        raise ValueError(f"no identity rule for {spec.in_channels}->{spec.out_channels}")
    return w


def init_weights(arch: LNetArch, rng: np.random.Generator,
                 noise_scale: float = 1e-2) -> LNetModel:
    """Hough-identity initialization plus scaled Kaiming-uniform noise on the
    kernels (biases start at zero).  noise_scale=0 gives the pure identity,
    which reproduces the Hough transform exactly but must not be trained
    (tied kernels never decouple)."""
    weights, biases = [], []
    for spec in arch.layers:
        w = identity_kernel(spec)
        if noise_scale != 0.0:
            fan_in = spec.kernel_h * spec.kernel_w * spec.in_channels
            bound = math.sqrt(6.0 / fan_in)
            w = w + rng.uniform(-bound, bound, spec.weight_shape) * noise_scale
        weights.append(w)
        biases.append(np.zeros(spec.out_channels))
    return LNetModel(arch, weights, biases, meta={"noise_scale": noise_scale})


def _check_model(model: LNetModel):
    specs = model.arch.layers
    if len(model.weights) != len(specs) or len(model.biases) != len(specs):
        raise ValueError("model layer count does not match architecture")
    for k, spec in enumerate(specs):
        if model.weights[k].shape != spec.weight_shape:
            raise ValueError(
                f"layer {k}: weight shape {model.weights[k].shape} != {spec.weight_shape}")


class Scratch:
    """Buffer pool for the per-sample forward/backward arrays.

    In reuse mode the same buffers serve every sample of a training run,
    which avoids tens of MB of allocation (and page faults) per step.
    Zero-margined buffers are allocated as zeros and only their interiors
    are ever rewritten.  Not shareable between threads; the train loop owns
    one, while the public entry points build a fresh one per call.
    """

    def __init__(self, reuse: bool = True):
        self.reuse = reuse
        self.bufs = {}

    def take(self, key, shape, zero: bool = False):
        if not self.reuse:
            return np.zeros(shape) if zero else np.empty(shape)
        buf = self.bufs.get(key)
        if buf is None or buf.shape != shape:
            buf = np.zeros(shape) if zero else np.empty(shape)
            self.bufs[key] = buf
        return buf


def _forward_cached(model: LNetModel, image: np.ndarray, scratch: Scratch = None):
    """Forward pass keeping the padded input and the post-ReLU output of
    every layer for the backward sweep."""
    if scratch is None:
        scratch = Scratch(reuse=False)
    arch = model.arch
    na = len(arch.conv_a)
    x = image[None, None]
    cache = []  # (padded_input, post_relu_output) per layer
    for k, spec in enumerate(arch.layers):
        if k == na:
            if x.shape[1] != 1:
                raise ValueError("conv_a must end with a single channel")
            planes = fht.fht_forward(x[0, 0])
            x = planes[:, None]
        nb, ci, h, w = x.shape
        if spec.pad:
            xp = scratch.take(("xp", k), (nb, ci, h + 2 * spec.pad,
                                          w + 2 * spec.pad), zero=True)
            xp[:, :, spec.pad:spec.pad + h, spec.pad:spec.pad + w] = x
        else:
            xp = x
        y = conv2d_nchw(xp, spec, model.weights[k], model.biases[k],
                        relu=True, x_prepadded=True,
                        out=scratch.take(("y", k), (nb, spec.out_channels, h, w)))
        cache.append((xp, y))
        x = y
    return x[:, 0], planes, cache


def forward(model: LNetModel, image) -> np.ndarray:
    """Predicted Hough map (4, n, 2n-1) for an (n, n) image."""
    image = fht._require_square_pow2(image)
    _check_model(model)
    pred, _, _ = _forward_cached(model, image)
    return pred


def _layer_backward(model, k, spec, g, cache_entry, scratch):
    """One conv+ReLU layer's backward: mask by the stored activation, then
    weight/bias grads and the input grad.  For layers whose input gradient
    is a flipped-weight convolution, the masked gradient is written straight
    into a reusable zero-margined buffer, so no separate pad pass is needed."""
    xp, act_out = cache_entry
    bp_h = spec.dilation * (spec.kernel_h - 1) - spec.pad
    bp_w = spec.dilation * (spec.kernel_w - 1) - spec.pad
    b, co, ho, wo = g.shape
    gx_shape = (b, spec.in_channels, ho + spec.dilation * (spec.kernel_h - 1)
                - 2 * spec.pad, wo + spec.dilation * (spec.kernel_w - 1)
                - 2 * spec.pad)
    if bp_h == bp_w and bp_h > 0:
        buf = scratch.take(("gp", k), (b, co, ho + 2 * bp_h, wo + 2 * bp_h),
                           zero=True)
        kernels.relu_bwd_into(act_out, g, buf, bp_h, bp_h)
        gw, gb = conv_param_grads_nchw(xp, spec, buf, (bp_h, bp_h))
        gx = conv_input_grad_nchw(None, spec, model.weights[k],
                                  grad_prepadded=buf,
                                  out=scratch.take(("gx", k), gx_shape))
    else:
        gm = relu_vjp(act_out, g)
        gw, gb = conv_param_grads_nchw(xp, spec, gm)
        gx = conv_input_grad_nchw(gm, spec, model.weights[k],
                                  out=scratch.take(("gx", k), gx_shape))
    return gx, gw, gb


def _backward_cached(model: LNetModel, out_grad, planes, cache,
                     need_input_grad: bool = False, scratch: Scratch = None):
    """Backward sweep over a forward cache.  The branch axis is the batch
    axis, so branch-shared conv_b gradients come out already accumulated
    (fixed order inside the kernels; bit-reproducible)."""
    if scratch is None:
        scratch = Scratch(reuse=False)
    arch = model.arch
    na = len(arch.conv_a)
    nb = len(arch.conv_b)
    gw = [None] * len(arch.layers)
    gb = [None] * len(arch.layers)

    g = out_grad[:, None]
    for k in range(nb - 1, -1, -1):
        g, gw[na + k], gb[na + k] = _layer_backward(
            model, na + k, arch.conv_b[k], g, cache[na + k], scratch)

    g = fht.fht_vjp(g[:, 0])[None, None]
    for k in range(na - 1, -1, -1):
        if k == 0 and not need_input_grad:
            xp, act_out = cache[k]
            gm = relu_vjp(act_out, g)
            gw[k], gb[k] = conv_param_grads_nchw(xp, arch.conv_a[k], gm)
            g = None
        else:
            g, gw[k], gb[k] = _layer_backward(model, k, arch.conv_a[k], g,
                                              cache[k], scratch)

    grads = []
    for w, b in zip(gw, gb):
        grads.append(w)
        grads.append(b)
    return grads, (g[0, 0] if need_input_grad else None)


def forward_backward(model: LNetModel, image, out_grad):
    """Gradients of sum(out_grad * forward(model, image)) for every
    parameter, plus the gradient w.r.t. the input image.

    Returns (param_grads, input_grad); param_grads aligns with
    model.params().
    """
    image = fht._require_square_pow2(image)
    _check_model(model)
    out_grad = np.ascontiguousarray(out_grad, dtype=np.float64)
    n = image.shape[0]
    if out_grad.shape != fht.hough_shape(n):
        raise ValueError(
            f"out_grad shape {out_grad.shape} != {fht.hough_shape(n)}")
    _, planes, cache = _forward_cached(model, image)
    return _backward_cached(model, out_grad, planes, cache,
                            need_input_grad=True)


# ------------------------------------------------------------- accounting


def layer_param_counts(arch: LNetArch) -> list:
    return [s.param_count for s in arch.layers]


def flop_count(arch: LNetArch, n: int) -> dict:
    """Analytic cost table in MFLOP for an n x n input.

    Multiplications and additions count as one FLOP each; a convolution
    costs (2*kh*kw*C_in + 1)*C_out per output value (the +1 is the bias
    add), with the spatial extent taken as the n x n input tile for every
    layer and each of the four Hough branches counted separately.  The
    Hough layer costs 4*(2n-1)*n*log2(n) additions.
    """
    rows = []
    tile = n * n
    for spec in arch.conv_a:
        per = (2 * spec.kernel_h * spec.kernel_w * spec.in_channels + 1)
        rows.append(("convA", _spec_label(spec), per * spec.out_channels * tile / 1e6))
    fht_flops = 4.0 * (2 * n - 1) * n * math.log2(n) if n > 1 else 0.0
    rows.append(("HT", "", fht_flops / 1e6))
    for spec in arch.conv_b:
        per = (2 * spec.kernel_h * spec.kernel_w * spec.in_channels + 1)
        mflop = per * spec.out_channels * tile * arch.n_branches / 1e6
        rows.append(("convB", _spec_label(spec), mflop))
    total = sum(r[2] for r in rows)
    return {"rows": rows, "total_mflop": total, "fht_mflop": fht_flops / 1e6}


def _spec_label(spec: ConvSpec) -> str:
    return (f"{spec.out_channels}x{spec.kernel_h}x{spec.kernel_w}x{spec.in_channels}"
            f"/p{spec.pad}/d{spec.dilation}")


# ------------------------------------------------------------ checkpoints


def save_model(model: LNetModel, path):
    """Write a checkpoint: one JSON header line, then the parameters as a
    contiguous little-endian float64 blob in layer order (w0, b0, w1, ...)."""
    _check_model(model)
    header = {
        "format": CHECKPOINT_MAGIC,
        "schema_version": CHECKPOINT_SCHEMA,
        "variant": model.arch.variant,
        "layers": [[s.out_channels, s.kernel_h, s.kernel_w, s.in_channels,
                    s.pad, s.dilation] for s in model.arch.layers],
        "param_count": model.arch.param_count,
        "meta": model.meta,
    }
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes()
                    for p in model.params())
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_model(path) -> LNetModel:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"corrupt checkpoint header in {path}: {e}") from e
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    arch = build(header["variant"])
    declared = [[s.out_channels, s.kernel_h, s.kernel_w, s.in_channels,
                 s.pad, s.dilation] for s in arch.layers]
    if header["layers"] != declared:
        raise ValueError(f"{path}: layer table does not match variant "
                         f"{header['variant']!r}")
    flat = np.frombuffer(blob, dtype="<f8")
    if flat.size != arch.param_count:
        raise ValueError(f"{path}: expected {arch.param_count} parameters, "
                         f"found {flat.size}")
    weights, biases, pos = [], [], 0
    for spec in arch.layers:
        k = int(np.prod(spec.weight_shape))
        weights.append(flat[pos:pos + k].reshape(spec.weight_shape).copy())
        pos += k
        biases.append(flat[pos:pos + spec.out_channels].copy())
        pos += spec.out_channels
    return LNetModel(arch, weights, biases, meta=header.get("meta", {}))
