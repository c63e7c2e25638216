"""Training: Hough-space targets, weighted MSE, Adam, and the batch loop."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dataset import load_sample, split_records
from .fht import cell_from_line, hough_shape
from .model import LNetModel, build, forward_backward, init_weights, save_model
from .ops import gaussian_kernel_1d


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "fast"
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 1e-3
    lr_halving_period: int = 10
    weight_decay: float = 1e-5
    target_sigma: float = 1.8
    loss_weight_coeff: float = 1000.0
    init_noise_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.lr_halving_period) < 1:
            raise ValueError("epochs, batch_size and lr_halving_period must be >= 1")
        if min(self.lr0, self.target_sigma, self.loss_weight_coeff) <= 0 \
                or self.weight_decay < 0:
            raise ValueError("non-positive hyperparameter in config")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: lr0 halved every lr_halving_period epochs."""
    return config.lr0 * 0.5 ** (epoch // config.lr_halving_period)


def make_target(gt_lines, n: int, sigma: float = 1.8) -> np.ndarray:
    """Hough-space training target: a unit peak at each ground-truth line's
    cell, spread by an *unnormalized* Gaussian (center weight 1.0) so every
    peak's maximum stays exactly 1; overlapping peaks combine by max."""
    target = np.zeros(hough_shape(n))
    if not gt_lines:
        return target
    g = gaussian_kernel_1d(sigma, normalize=False)
    r = g.size // 2
    patch = np.outer(g, g)
    width = 2 * n - 1
    for bline in gt_lines:
        cell = cell_from_line(bline)
        s, c = cell.shift_s, cell.col
        s0, s1 = max(0, s - r), min(n, s + r + 1)
        c0, c1 = max(0, c - r), min(width, c + r + 1)
        view = target[cell.quadrant, s0:s1, c0:c1]
        np.maximum(view, patch[s0 - s + r:s1 - s + r, c0 - c + r:c1 - c + r],
                   out=view)
    return target


def weighted_mse(pred, target, weight_coeff: float = 1000.0):
    """loss = mean((1 + coeff*target) * (pred - target)^2) over all cells,
    and its exact gradient w.r.t. pred."""
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return kernels.wmse_loss_grad(pred, target, weight_coeff)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              weight_decay: float = 0.0):
    """One in-place Adam update with bias correction; L2 decay is folded
    into the gradient before the moment updates (classic, not decoupled)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
        if weight_decay:
            g = g + weight_decay * p
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TrainResult:
    model: LNetModel
    history: list = field(default_factory=list)  # (epoch, lr, train_loss, test_ap)


class _TrainSet:
    """Train images kept quantized (uint8) to bound memory; samples are
    dequantized to float64 on use, matching what load_sample returns."""

    def __init__(self, manifest, records):
        self.images = []
        self.lines = []
        for rec in records:
            sample = load_sample(manifest, rec)
            self.images.append(np.round(sample.image * 255.0).astype(np.uint8))
            self.lines.append(sample.gt_lines)

    def __len__(self):
        return len(self.images)

    def sample(self, i):
        return self.images[i].astype(np.float64) / 255.0, self.lines[i]


def train(config: TrainConfig, manifest, checkpoint_path=None,
          eval_fn=None, eval_every: int = 0, log=None) -> TrainResult:
    """Full training loop over the manifest's train split.

    Per batch: forward -> weighted MSE -> backward -> Adam, with seeded
    shuffling and sequential (fixed-order) gradient accumulation, so runs
    are bit-reproducible for a given (seed, dataset, config).  `eval_fn`
    (model -> float) is called every `eval_every` epochs when given.
    """
    from .model import Scratch

    records = split_records(manifest, "train")
    if not records:
        raise ValueError("manifest has no train records")
    data = _TrainSet(manifest, records)
    n = data.images[0].shape[0]
    scratch = Scratch(reuse=True)

    ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss = ss.spawn(2)
    arch = build(config.variant)
    model = init_weights(arch, np.random.Generator(np.random.PCG64(init_ss)),
                         config.init_noise_scale)
    model.meta.update(variant=config.variant, seed=config.seed,
                      epochs=config.epochs, lr0=config.lr0)
    params = model.params()
    state = AdamState.for_params(params)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))

    history = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = shuffle_rng.permutation(len(data))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = None
            for idx in batch:
                image, gt = data.sample(int(idx))
                target = make_target(gt, n, config.target_sigma)
                grads, loss = _sample_grads(model, image, target, config,
                                            scratch)
                loss_sum += loss
                if acc is None:
                    acc = grads
                else:
                    for a, g in zip(acc, grads):
                        a += g
            inv = 1.0 / len(batch)
            for a in acc:
                a *= inv
            adam_step(params, acc, state, lr, config.weight_decay)
        train_loss = loss_sum / len(data)
        test_ap = None
        if eval_fn is not None and eval_every and (epoch + 1) % eval_every == 0:
            test_ap = eval_fn(model)
        history.append((epoch, lr, train_loss, test_ap))
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  train_loss {train_loss:.6f}"
                + (f"  test_ap {test_ap:.2f}" if test_ap is not None else ""))

    model.meta["adam_steps"] = state.step
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
    return TrainResult(model, history)


def _sample_grads(model, image, target, config, scratch=None):
    from .model import _backward_cached, _forward_cached
    pred, planes, cache = _forward_cached(model, image, scratch)
    loss, gpred = weighted_mse(pred, target, config.loss_weight_coeff)
    grads, _ = _backward_cached(model, gpred, planes, cache, scratch=scratch)
    return grads, loss


def history_csv_rows(history):
    rows = [("epoch", "lr", "train_loss", "test_ap")]
    for epoch, lr, loss, ap in history:
        rows.append((epoch, f"{lr:.10g}", f"{loss:.10g}",
                     "" if ap is None else f"{ap:.10g}"))
    return rows
