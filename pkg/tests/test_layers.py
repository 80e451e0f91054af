import numpy as np
import pytest

import cdae.layers as L
from cdae.tensor import ShapeError, make_rng


def dot(a, b):
    return float(np.sum(a * b))


# ---------------------------------------------------------------------------
# Convolution


@pytest.mark.parametrize("k", [1, 3, 5, 7, 9, 11])
def test_conv_im2col_matches_direct(k):
    rng = make_rng(k)
    x = rng.standard_normal((2, 3, 6, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    fast = L.conv_forward(x, w, b)
    slow = L.conv_forward(x, w, b, method="direct")
    assert fast.shape == (2, 4, 6, 8)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_conv_rejects_even_kernel_and_channel_mismatch():
    rng = make_rng(0)
    x = rng.standard_normal((1, 3, 4, 4))
    with pytest.raises(ShapeError):
        L.conv_forward(x, rng.standard_normal((2, 3, 4, 4)), np.zeros(2))
    with pytest.raises(ShapeError):
        L.conv_forward(x, rng.standard_normal((2, 5, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        L.conv_forward(x, rng.standard_normal((2, 3, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        L.conv_forward(x, rng.standard_normal((2, 3, 3, 3)), np.zeros(2), method="fft")


def test_conv_preserves_large_spatial_dims():
    rng = make_rng(1)
    x = rng.standard_normal((1, 1, 300, 140))
    w = rng.standard_normal((2, 1, 9, 9))
    out = L.conv_forward(x, w, np.zeros(2))
    assert out.shape == (1, 2, 300, 140)
    assert np.all(np.isfinite(out))


def test_conv_batch_chunking_matches_single_shot(monkeypatch):
    rng = make_rng(2)
    x = rng.standard_normal((7, 3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    g = rng.standard_normal((7, 2, 6, 6))
    whole = L.conv_forward(x, w, b)
    gi, gw, gb = L.conv_backward(x, w, g)
    # shrink the cap so the same calls go down the chunked path
    monkeypatch.setattr(L, "_COLS_BYTE_CAP", 3 * 3 * 3 * 6 * 6 * 8 * 2)
    chunked = L.conv_forward(x, w, b)
    ci, cw, cb = L.conv_backward(x, w, g)
    assert np.max(np.abs(whole - chunked)) < 1e-12
    assert np.max(np.abs(gi - ci)) < 1e-12
    assert np.max(np.abs(gw - cw)) < 1e-12
    assert np.max(np.abs(gb - cb)) < 1e-12


def central_diff(f, arr, eps=1e-4):
    # eps can be generous: the test losses are quadratic, so the central
    # difference has no truncation error and large eps only helps roundoff
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def test_conv_backward_matches_finite_differences():
    rng = make_rng(3)
    x = rng.standard_normal((2, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    target = rng.standard_normal((2, 3, 4, 5))

    def loss():
        return 0.5 * float(np.sum((L.conv_forward(x, w, b) - target) ** 2))

    grad_out = L.conv_forward(x, w, b) - target
    gi, gw, gb = L.conv_backward(x, w, grad_out)
    assert np.max(np.abs(gi - central_diff(loss, x))) < 1e-8
    assert np.max(np.abs(gw - central_diff(loss, w))) < 1e-8
    assert np.max(np.abs(gb - central_diff(loss, b))) < 1e-8


def test_conv_backward_adjoint_identity():
    # <conv(x), g> = <x, grad_input> when bias is zero
    rng = make_rng(4)
    for k in (1, 3, 5):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, k, k))
        g = rng.standard_normal((2, 4, 6, 6))
        out = L.conv_forward(x, w, np.zeros(4))
        gi, _, _ = L.conv_backward(x, w, g)
        assert abs(dot(out, g) - dot(x, gi)) < 1e-9


def test_conv_backward_cached_cols_and_need_input():
    rng = make_rng(5)
    x = rng.standard_normal((3, 2, 6, 4))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    g = rng.standard_normal((3, 4, 6, 4))
    out, cols = L.conv_forward_cached(x, w, b)
    assert np.array_equal(out, L.conv_forward(x, w, b))
    plain = L.conv_backward(x, w, g)
    reused = L.conv_backward(x, w, g, cols=cols)
    for a, b_ in zip(plain, reused):
        assert np.array_equal(a, b_)
    gi, gw, gb = L.conv_backward(x, w, g, cols=cols, need_input=False)
    assert gi is None
    assert np.array_equal(gw, plain[1])
    assert np.array_equal(gb, plain[2])
    with pytest.raises(ShapeError):
        L.conv_backward(x, w, rng.standard_normal((3, 4, 6, 5)))


# ---------------------------------------------------------------------------
# Max pooling


def test_maxpool_values_and_record():
    x = np.array(
        [
            [1.0, 2.0, 5.0, 5.0],
            [3.0, 0.0, 4.0, 5.0],
        ]
    ).reshape(1, 1, 2, 4)
    out, record = L.maxpool_forward(x)
    assert np.array_equal(out[0, 0], [[3.0, 5.0]])
    # row-major offsets: max 3.0 sits at (1, 0) -> 2; tie on 5.0 -> first (0)
    assert np.array_equal(record[0, 0], [[2, 0]])
    assert record.dtype == np.uint8


def test_maxpool_matches_block_max():
    rng = make_rng(6)
    x = rng.standard_normal((3, 2, 8, 6))
    out, _ = L.maxpool_forward(x)
    ref = x.reshape(3, 2, 4, 2, 3, 2).max(axis=(3, 5))
    assert np.array_equal(out, ref)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 4, 5)))


def test_maxpool_backward_routes_to_argmax():
    rng = make_rng(7)
    x = rng.standard_normal((2, 3, 6, 4))
    out, record = L.maxpool_forward(x)
    g = rng.standard_normal(out.shape)
    back = L.maxpool_backward(record, g)
    assert back.shape == x.shape
    # each window holds exactly its output gradient, at the max position
    blocks = back.reshape(2, 3, 3, 2, 2, 2)
    assert np.max(np.abs(blocks.sum(axis=(3, 5)) - g)) == 0.0
    assert np.count_nonzero(back) <= g.size
    # adjoint of the forward's linearization: <pool(x), g> = <x, back>
    assert abs(dot(out, g) - dot(x, back)) < 1e-12
    with pytest.raises(ShapeError):
        L.maxpool_backward(record, g[:, :, :2])


# ---------------------------------------------------------------------------
# Unpooling


def test_unpool_duplicates_blocks():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    up = L.unpool_forward(x)
    assert up.shape == (1, 1, 4, 6)
    for r in range(2):
        for c in range(3):
            assert np.all(up[0, 0, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2] == x[0, 0, r, c])


def test_unpool_backward_sums_blocks():
    rng = make_rng(8)
    g = rng.standard_normal((2, 2, 4, 6))
    back = L.unpool_backward(g)
    ref = g.reshape(2, 2, 2, 2, 3, 2).sum(axis=(3, 5))
    assert np.array_equal(back, ref)
    with pytest.raises(ShapeError):
        L.unpool_backward(np.zeros((1, 1, 3, 4)))


def test_maxpool_of_unpool_is_identity():
    rng = make_rng(9)
    x = rng.standard_normal((2, 3, 4, 5))
    out, _ = L.maxpool_forward(L.unpool_forward(x))
    assert np.array_equal(out, x)


# ---------------------------------------------------------------------------
# Activations


def test_activation_values():
    x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]]).reshape(1, 1, 1, 5)
    assert np.array_equal(
        L.activation_forward("relu", x)[0, 0, 0], [0.0, 0.0, 0.0, 0.5, 2.0]
    )
    assert np.array_equal(L.activation_forward("tanh", x), np.tanh(x))
    assert L.activation_forward("none", x) is x
    with pytest.raises(ValueError):
        L.activation_forward("sigmoid", x)


@pytest.mark.parametrize("name", ["relu", "tanh", "none"])
def test_activation_backward_matches_finite_differences(name):
    rng = make_rng(10)
    x = rng.standard_normal((2, 2, 3, 3)) + 0.1  # keep away from relu's kink
    target = rng.standard_normal(x.shape)

    def loss():
        return 0.5 * float(np.sum((L.activation_forward(name, x) - target) ** 2))

    grad_out = L.activation_forward(name, x) - target
    grad = L.activation_backward(name, x, grad_out)
    assert np.max(np.abs(grad - central_diff(loss, x))) < 1e-8
