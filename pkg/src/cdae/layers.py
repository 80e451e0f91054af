"""Forward and backward passes for the autoencoder building blocks.

All ops are pure functions over (n, c, h, w) float arrays. Convolution is
cross-correlation with zero same-padding (odd kernels only), so spatial
dims never change inside a conv; resolution moves only through the 2x2
pool / unpool pair. Deconvolution is the same op as convolution and
reuses these kernels.

Two convolution code paths exist: a naive loop kernel (`method="direct"`,
the correctness oracle) and an im2col+GEMM kernel (`method="im2col"`,
the default). They agree to ~1e-14 and the test suite enforces 1e-12.
"""

import numpy as np

from .tensor import ShapeError, check_tensor

__all__ = [
    "conv_forward",
    "conv_forward_cached",
    "conv_backward",
    "maxpool_forward",
    "maxpool_backward",
    "unpool_forward",
    "unpool_backward",
    "activation_forward",
    "activation_backward",
]

ACTIVATIONS = ("relu", "tanh", "none")


def _check_filters(weights: np.ndarray, bias: np.ndarray) -> tuple[int, int, int, int]:
    check_tensor(weights, "weights")
    out_c, in_c, kh, kw = weights.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel {kh}x{kw} must be odd for same-padding")
    if bias.shape != (out_c,):
        raise ShapeError(f"bias shape {bias.shape} does not match {out_c} filters")
    return out_c, in_c, kh, kw


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    padded[:, :, ph : ph + h, pw : pw + w] = x
    return padded


# im2col duplicates the input k*k times, so cap the column matrix and
# fall back to sub-batches when a large batch would blow past it
_COLS_BYTE_CAP = 1 << 29


def _im2col(x_padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding windows of the padded input as a (c*kh*kw, n*h*w) matrix.

    Rows are ordered (channel, dr, dc) to match a row-major filter
    flatten; this column order copies and streams through the GEMM much
    faster than the spatial-major alternative.
    """
    windows = np.lib.stride_tricks.sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    n, c, h, w = windows.shape[:4]
    return windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * h * w)


def _conv_gemm(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """im2col convolution; returns (out, cols) so backward can reuse cols."""
    n, c, h, w = x.shape
    out_c, _, kh, kw = weights.shape
    cols = _im2col(_pad_same(x, kh, kw), kh, kw)
    out = weights.reshape(out_c, c * kh * kw) @ cols
    out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(out_c, n, h, w).transpose(1, 0, 2, 3))
    return out, cols


def conv_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    method: str = "im2col",
) -> np.ndarray:
    """Same-padding convolution: out = sum_c (x_c * w_oc,c) + bias_oc.

    Output shape is (n, out_c, h, w) -- spatial dims preserved.
    """
    check_tensor(x, "input")
    out_c, in_c, kh, kw = _check_filters(weights, bias)
    n, c, h, w = x.shape
    if c != in_c:
        raise ShapeError(f"input has {c} channels, filters expect {in_c}")

    if method == "direct":
        xp = _pad_same(x, kh, kw)
        out = np.empty((n, out_c, h, w), dtype=np.float64)
        for i in range(n):
            for oc in range(out_c):
                for r in range(h):
                    for col in range(w):
                        window = xp[i, :, r : r + kh, col : col + kw]
                        out[i, oc, r, col] = np.sum(window * weights[oc]) + bias[oc]
        return out
    if method != "im2col":
        raise ValueError(f"unknown conv method {method!r}")

    per_image = c * kh * kw * h * w * 8
    if n > 1 and n * per_image > _COLS_BYTE_CAP:
        chunk = max(1, _COLS_BYTE_CAP // per_image)
        return np.concatenate(
            [_conv_gemm(x[i : i + chunk], weights, bias)[0] for i in range(0, n, chunk)]
        )
    return _conv_gemm(x, weights, bias)[0]


def conv_forward_cached(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """conv_forward plus the column matrix, for reuse in conv_backward."""
    check_tensor(x, "input")
    _, in_c, _, _ = _check_filters(weights, bias)
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {in_c}")
    return _conv_gemm(x, weights, bias)


def conv_backward(
    x: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv_forward w.r.t. input, weights and bias.

    With odd kernels and zero same-padding the adjoint of the forward map
    is itself a same-padding convolution with the spatially flipped,
    channel-transposed filter bank, so grad_input reuses conv_forward.
    Pass the forward pass's column matrix as `cols` to skip rebuilding it;
    `need_input=False` skips grad_input entirely (the net's first layer
    has no use for it).
    """
    check_tensor(grad_out, "grad_out")
    out_c, in_c, kh, kw = weights.shape
    n, c, h, w = x.shape
    if grad_out.shape != (n, out_c, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output {(n, out_c, h, w)}"
        )

    per_image = c * kh * kw * h * w * 8
    if cols is None and n > 1 and n * per_image > _COLS_BYTE_CAP:
        chunk = max(1, _COLS_BYTE_CAP // per_image)
        grad_weights = np.zeros_like(weights)
        grad_bias = np.zeros(out_c, dtype=np.float64)
        parts = []
        for i in range(0, n, chunk):
            gi, gw, gb = conv_backward(
                x[i : i + chunk], weights, grad_out[i : i + chunk], need_input=need_input
            )
            grad_weights += gw
            grad_bias += gb
            if need_input:
                parts.append(gi)
        grad_input = np.concatenate(parts) if need_input else None
        return grad_input, grad_weights, grad_bias

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    if cols is None:
        cols = _im2col(_pad_same(x, kh, kw), kh, kw)
    gmat = grad_out.transpose(1, 0, 2, 3).reshape(out_c, n * h * w)
    grad_weights = (gmat @ cols.T).reshape(out_c, in_c, kh, kw)
    if not need_input:
        return None, grad_weights, grad_bias

    flipped = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_input = conv_forward(grad_out, np.ascontiguousarray(flipped), np.zeros(in_c))
    return grad_input, grad_weights, grad_bias


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (n, c, h/2, w/2, 4) with the window in row-major order."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling.

    Returns the pooled tensor and the argmax record: one row-major window
    offset (0-3) per output element, ties resolved to the smallest offset.
    """
    check_tensor(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims {h}x{w} must be even for 2x2 pooling")
    windows = _pool_windows(x)
    record = windows.argmax(axis=-1).astype(np.uint8)  # argmax takes the first max
    out = np.take_along_axis(windows, record[..., None], axis=-1)[..., 0]
    return out, record


def maxpool_backward(record: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient to its argmax position; zeros elsewhere."""
    check_tensor(grad_out, "grad_out")
    if record.shape != grad_out.shape:
        raise ShapeError(
            f"pool record shape {record.shape} does not match grad_out {grad_out.shape}"
        )
    n, c, oh, ow = grad_out.shape
    scattered = np.zeros((n, c, oh, ow, 4), dtype=np.float64)
    np.put_along_axis(scattered, record[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    blocks = scattered.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, 2 * oh, 2 * ow)


def unpool_forward(x: np.ndarray) -> np.ndarray:
    """Duplicate every value into its 2x2 output block."""
    check_tensor(x, "input")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def unpool_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of duplication: sum each 2x2 block of grad_out."""
    check_tensor(grad_out, "grad_out")
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"grad_out spatial dims {h}x{w} must be even")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through the activation; `x` is the pre-activation input."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "none":
        return grad_out
    raise ValueError(f"unknown activation {kind!r}")
