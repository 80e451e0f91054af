"""Denoising training loop: masking corruption, MSE loss, decayed SGD.

The corruption step zeroes an exact count of values, floor(rate * N),
chosen by a seeded permutation, and the mask is resampled for every
presentation of every image so the network effectively never sees the
same input twice. The target is always the uncorrupted image. Updates
are plain SGD, one step per mini-batch, with the learning rate fixed
within an epoch at lr0 * decay^epoch.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .network import ArchitectureSpec, Model, backward, forward_cached, parse_spec
from .tensor import ShapeError, derive_seed, make_rng

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "corrupt",
    "mse_loss",
    "lr_at",
    "train",
    "gradient_check",
    "GRADCHECK_CHAINS",
    "run_gradcheck",
]


class TrainingDiverged(FloatingPointError):
    """Reconstruction loss became NaN/Inf; training aborted."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 16
    lr0: float = 0.05
    decay: float = 0.9
    corruption_rate: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs={self.epochs} must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size={self.batch_size} must be >= 1")
        if self.lr0 <= 0:
            raise ValueError(f"lr0={self.lr0} must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay={self.decay} outside (0, 1]")
        if not 0 <= self.corruption_rate < 1:
            raise ValueError(f"corruption_rate={self.corruption_rate} outside [0, 1)")


@dataclass
class LossHistory:
    """Per-epoch mean reconstruction MSE over the training set."""

    mean_mse: list = field(default_factory=list)

    def __len__(self):
        return len(self.mean_mse)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 * decay^epoch, in closed form so repeated calls never drift."""
    if epoch < 0:
        raise ValueError(f"epoch={epoch} must be >= 0")
    return config.lr0 * config.decay**epoch


def corrupt(
    image: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Zero exactly floor(rate * N) values at seeded-permutation positions.

    Returns (corrupted copy, boolean mask of zeroed positions). Values
    outside the mask are bit-identical to the input.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"rate={rate} outside [0, 1)")
    n = image.size
    # tiny epsilon absorbs binary representation error in rate * n
    # (e.g. 0.3 * 10 must count as 3, not 2)
    count = int(math.floor(rate * n + 1e-9))
    flat = image.reshape(-1).copy()
    mask_flat = np.zeros(n, dtype=bool)
    if count:
        idx = rng.permutation(n)[:count]
        flat[idx] = 0.0
        mask_flat[idx] = True
    return flat.reshape(image.shape), mask_flat.reshape(image.shape)


def mse_loss(recon: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. the reconstruction."""
    if recon.shape != target.shape:
        raise ShapeError(f"recon shape {recon.shape} != target shape {target.shape}")
    diff = recon - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def train(
    model: Model,
    dataset: np.ndarray,
    config: TrainConfig,
    log_path=None,
) -> tuple[Model, LossHistory]:
    """SGD over the dataset in its given order, one update per mini-batch.

    Deterministic given (seed, config, dataset order). Mutates the model
    in place and returns it with the per-epoch loss history. A NaN/Inf
    loss aborts with TrainingDiverged rather than limping on.
    """
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise ShapeError("dataset must be a nonempty (n, 1, h, w) tensor")
    expect = (1, model.spec.input_h, model.spec.input_w)
    if dataset.shape[1:] != expect:
        raise ShapeError(f"dataset images {dataset.shape[1:]} do not match spec {expect}")

    rng = make_rng(config.seed)
    history = LossHistory()
    log_file = open(log_path, "a", newline="") if log_path is not None else None
    try:
        writer = None
        if log_file is not None:
            writer = csv.writer(log_file)
            if log_file.tell() == 0:
                writer.writerow(["epoch", "lr", "mean_mse"])
        m = dataset.shape[0]
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            sq_sum = 0.0
            for start in range(0, m, config.batch_size):
                clean = dataset[start : start + config.batch_size]
                noisy = np.stack(
                    [
                        corrupt(clean[i : i + 1], config.corruption_rate, rng)[0][0]
                        for i in range(clean.shape[0])
                    ]
                )
                recon, caches = forward_cached(model, noisy)
                loss, grad = mse_loss(recon, clean)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss {loss} at epoch {epoch}, batch starting at sample "
                        f"{start} (lr={lr}); lower lr0 or check the input scaling"
                    )
                grads = backward(model, caches, grad)
                for p, g in zip(model.params, grads):
                    if p is None:
                        continue
                    w_arr, b_arr = p
                    w_arr -= lr * g[0]
                    b_arr -= lr * g[1]
                sq_sum += loss * clean.shape[0]
            epoch_mse = sq_sum / m
            history.mean_mse.append(epoch_mse)
            if writer is not None:
                writer.writerow([epoch, repr(lr), repr(epoch_mse)])
                log_file.flush()
            model.meta.epochs = epoch + 1
            model.meta.final_lr = lr
            model.meta.seed = config.seed
    finally:
        if log_file is not None:
            log_file.close()
    return model, history


def gradient_check(
    spec: ArchitectureSpec,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds a fresh model from the spec, draws a random input and target,
    and perturbs every parameter entry and every input pixel by +-eps, so
    parameter-free layers (pool, unpool, bare activations) are exercised
    through the input gradient. Only sensible for small specs; the cost
    is two forward passes per checked value.
    """
    seed = int(rng.integers(0, 2**32))
    model = Model.init(spec, seed=seed)
    x = rng.uniform(-1.0, 1.0, size=(1, 1, spec.input_h, spec.input_w))
    target = rng.uniform(-1.0, 1.0, size=x.shape)

    recon, caches = forward_cached(model, x)
    _, grad = mse_loss(recon, target)
    grads, grad_in = backward(model, caches, grad, with_input=True)

    def loss_now() -> float:
        out, _ = forward_cached(model, x)
        return mse_loss(out, target)[0]

    def sweep(arr: np.ndarray, garr: np.ndarray, worst: float) -> float:
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            plus = loss_now()
            flat[j] = keep - eps
            minus = loss_now()
            flat[j] = keep
            numeric = (plus - minus) / (2.0 * eps)
            analytic = gflat[j]
            # the 1e-3 floor turns the check absolute for tiny entries:
            # float64 differences cannot resolve relative error below it
            denom = max(abs(analytic) + abs(numeric), 1e-3)
            worst = max(worst, abs(analytic - numeric) / denom)
        return worst

    worst = 0.0
    for p, g in zip(model.params, grads):
        if p is None:
            continue
        for arr, garr in zip(p, g):
            worst = sweep(arr, garr, worst)
    return sweep(x, grad_in, worst)


# Chains chosen so that, together, every layer kind is crossed by some
# checked gradient. Convolution-only chains have an exactly quadratic
# loss, so central differences are exact for any step; a large step is
# used there because it suppresses the cancellation noise that would
# otherwise swamp a 1e-10 gate, while curved or kinked chains keep the
# conventional small step.
_CHAIN_HEAD = "input 8 8\ncorrupt 0.0\nbottleneck after=1\n"
GRADCHECK_CHAINS = (
    ("conv-linear", _CHAIN_HEAD + "conv filters=3 kernel=3 act=none\nconv filters=1 kernel=5 act=none\n", True),
    ("deconv-linear", _CHAIN_HEAD + "deconv filters=4 kernel=3 act=none\ndeconv filters=1 kernel=3 act=none\n", True),
    ("pool-unpool", _CHAIN_HEAD + "maxpool\nunpool\n", False),
    ("relu", _CHAIN_HEAD + "activation act=relu\n", False),
    ("tanh", _CHAIN_HEAD + "activation act=tanh\n", False),
    ("conv-pool-unpool-deconv", _CHAIN_HEAD + "conv filters=4 kernel=3 act=none\nmaxpool\nunpool\ndeconv filters=1 kernel=3 act=none\n", False),
    ("conv-pool-unpool-deconv-relu", _CHAIN_HEAD + "conv filters=4 kernel=3 act=relu\nmaxpool\nunpool\ndeconv filters=1 kernel=3 act=none\n", False),
    ("conv-pool-unpool-deconv-tanh", _CHAIN_HEAD + "conv filters=4 kernel=3 act=relu\nmaxpool\nunpool\ndeconv filters=1 kernel=3 act=tanh\n", False),
)

LINEAR_GATE = 1e-10
NONLINEAR_GATE = 1e-5


def run_gradcheck(seed: int) -> list:
    """Gradient-check every named chain; returns (name, worst, gate) rows."""
    results = []
    for name, text, linear in GRADCHECK_CHAINS:
        spec = parse_spec(text)
        rng = make_rng(derive_seed(seed, "gradcheck", name))
        worst = gradient_check(spec, rng, eps=1e-1 if linear else 1e-5)
        results.append((name, worst, LINEAR_GATE if linear else NONLINEAR_GATE))
    return results
