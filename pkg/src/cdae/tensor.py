"""Dense 4-D tensors and deterministic random initialization.

Tensors are plain numpy arrays in (batch, channel, height, width) layout,
row-major, float64 on the training path. Everything downstream assumes
this layout; the helpers here validate it once so layer kernels don't
have to.
"""

import hashlib
import math

import numpy as np

__all__ = [
    "ShapeError",
    "make_rng",
    "derive_seed",
    "zeros",
    "he_uniform_init",
    "check_tensor",
    "ensure_finite",
]


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64): same seed, same stream, any platform."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *tags) -> int:
    """Independent child seed for (seed, tags).

    Hash-based so the result depends only on the tags, not on how many
    other seeds were derived first; keeps per-gene / per-category streams
    stable under reordering and parallelism.
    """
    data = repr((int(seed),) + tags).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def _check_shape(shape) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions (n, c, h, w), got {len(shape)}")
    n, c, h, w = (int(d) for d in shape)
    for name, d in zip("nchw", (n, c, h, w)):
        if d < 1:
            raise ShapeError(f"dimension {name}={d} must be >= 1")
    if n * c * h * w > 2**40:
        raise ShapeError(f"shape {shape} overflows the supported tensor size")
    return n, c, h, w


def zeros(shape) -> np.ndarray:
    """All-zero tensor of the given (n, c, h, w) shape."""
    return np.zeros(_check_shape(shape), dtype=np.float64)


def he_uniform_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Filter bank (out_c, in_c, kh, kw) i.i.d. uniform in [-b, b].

    b = sqrt(6 / fan_in) with fan_in = in_c * kh * kw; the usual choice
    for ReLU-heavy stacks.
    """
    _, in_c, kh, kw = _check_shape(shape)
    bound = math.sqrt(6.0 / (in_c * kh * kw))
    return rng.uniform(-bound, bound, size=tuple(int(d) for d in shape))


def check_tensor(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Validate 4-D layout; returns the array unchanged."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{what} must be a 4-D array (n, c, h, w)")
    _check_shape(x.shape)
    return x


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise if any value is NaN/Inf; returns the array unchanged."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.isfinite(x).sum())
        raise FloatingPointError(f"{what} contains {bad} non-finite values")
    return x
