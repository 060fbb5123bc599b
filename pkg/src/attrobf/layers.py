"""Forward/backward kernels for the fixed layer set.

Every layer is a pair of pure functions. ``*_forward`` returns the output and a
cache; ``*_backward`` takes the upstream gradient and that cache. The public
image layers take NCHW arrays; the ``*_nhwc_*`` kernels underneath work
channels-last, which is what the network uses internally to avoid a transpose
per layer. Dense layers take (N, features). The dtype of the inputs is
preserved, so the same code runs the float32 compute path and the float64
verification path.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError

KERNEL = 3
PAD = 1


def _check_conv(x, weight, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv2d expects (O, C, 3, 3) kernels, got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} has {x.shape[1]} channels, "
            f"kernel shape {weight.shape} expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel shape {weight.shape}")


def kernel_matrix(weight):
    """OIHW kernels as the (9*C, O) matrix used by the NHWC kernels."""
    o, c = weight.shape[:2]
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0).reshape(KERNEL * KERNEL * c, o))


def kernel_from_matrix(wmat, c):
    o = wmat.shape[1]
    return np.ascontiguousarray(wmat.reshape(KERNEL, KERNEL, c, o).transpose(3, 2, 0, 1))


def conv_nhwc_forward(x, wmat, bias):
    """Channels-last convolution; ``wmat`` comes from :func:`kernel_matrix`."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(KERNEL) for j in range(KERNEL)],
                          axis=3).reshape(n * h * w, KERNEL * KERNEL * c)
    y = cols @ wmat
    y += bias
    return y.reshape(n, h, w, -1), (cols, x.shape, wmat)


def conv_nhwc_backward(grad_y, cache, need_input_grad=True):
    """Returns ``(grad_x or None, grad_wmat, grad_bias)``."""
    cols, (n, h, w, c), wmat = cache
    g = grad_y.reshape(-1, wmat.shape[1])
    grad_w = cols.T @ g
    grad_b = g.sum(axis=0)
    if not need_input_grad:
        return None, grad_w, grad_b
    gcols = (g @ wmat.T).reshape(n, h, w, KERNEL * KERNEL * c)
    gpad = np.zeros((n, h + 2 * PAD, w + 2 * PAD, c), dtype=grad_y.dtype)
    k = 0
    for i in range(KERNEL):
        for j in range(KERNEL):
            gpad[:, i:i + h, j:j + w, :] += gcols[..., k * c:(k + 1) * c]
            k += 1
    return gpad[:, PAD:PAD + h, PAD:PAD + w, :], grad_w, grad_b


def conv2d_forward(x, weight, bias):
    """3x3 stride-1 convolution with zero same-padding.

    Parameters
    ----------
    x : ndarray, shape (N, C, H, W)
    weight : ndarray, shape (O, C, 3, 3)
    bias : ndarray, shape (O,)

    Returns
    -------
    y : ndarray, shape (N, O, H, W)
    cache : tuple
    """
    _check_conv(x, weight, bias)
    y, cache = conv_nhwc_forward(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), kernel_matrix(weight), bias)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cache


def conv2d_backward(grad_y, cache):
    """Returns ``(grad_x, grad_weight, grad_bias)`` in NCHW / OIHW layout."""
    gx, gw, gb = conv_nhwc_backward(np.ascontiguousarray(grad_y.transpose(0, 2, 3, 1)), cache)
    c = cache[1][3]
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), kernel_from_matrix(gw, c), gb


def _window_views(x):
    # (dy, dx) in row-major order, so view k has linear window index k
    return [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]


def pool_nhwc_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    views = _window_views(x)
    best = views[0].copy()
    idx = np.zeros(best.shape, dtype=np.int8)
    for k in range(1, 4):
        # strict comparison keeps the earliest (lowest-index) maximum
        better = views[k] > best
        idx[better] = k
        np.maximum(best, views[k], out=best)
    return best, (idx, x.shape)


def pool_nhwc_backward(grad_y, cache):
    idx, x_shape = cache
    gx = np.empty(x_shape, dtype=grad_y.dtype)
    for k, view in enumerate(_window_views(gx)):
        view[...] = grad_y * (idx == k)
    return gx


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2 on NCHW input.

    The cached argmax picks the lowest linear index on ties (row-major within
    the window, which is also the lowest index in the image).
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got shape {x.shape}")
    y, cache = pool_nhwc_forward(x.transpose(0, 2, 3, 1))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cache


def maxpool2x2_backward(grad_y, cache):
    gx = pool_nhwc_backward(grad_y.transpose(0, 2, 3, 1), cache)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_y, mask):
    # subgradient at exactly 0 is 0
    return grad_y * mask


def dense_forward(x, weight, bias):
    """Affine map ``y = x W^T + b`` for a batch of flat vectors.

    ``weight`` is (out, in). A 1-D ``x`` is treated as a single sample.
    """
    x2 = x.reshape(1, -1) if x.ndim == 1 else x.reshape(x.shape[0], -1)
    if weight.ndim != 2 or x2.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"dense dimension mismatch: input has {x2.shape[1]} features, "
            f"weight shape is {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match weight shape {weight.shape}")
    y = x2 @ weight.T + bias
    if x.ndim == 1:
        y = y[0]
    return y, (x, x2, weight)


def dense_backward(grad_y, cache):
    """Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` has the input's shape."""
    x, x2, weight = cache
    g = grad_y.reshape(x2.shape[0], -1)
    grad_x = (g @ weight).reshape(x.shape)
    grad_w = g.T @ x2
    grad_b = g.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of softmax(logits) against integer labels.

    Parameters
    ----------
    logits : ndarray, shape (K,) or (N, K)
    labels : int or int array of shape (N,)
    reduction : {"mean", "sum", "none"}
        How per-sample losses are combined for batched input.

    Returns
    -------
    loss : float or ndarray
    grad_logits : ndarray, same shape as ``logits``
    """
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    k = z.shape[1]
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.shape != (z.shape[0],):
        raise ShapeError(f"got {y.shape[0]} labels for {z.shape[0]} logit rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"label {bad} out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1
    if single:
        return float(losses[0]), grad[0]
    if reduction == "mean":
        return float(losses.mean()), grad / z.shape[0]
    if reduction == "sum":
        return float(losses.sum()), grad
    if reduction == "none":
        return losses, grad
    raise ValueError(f"unknown reduction {reduction!r}")


def he_normal(rng, shape, fan_in, dtype=np.float32):
    """Zero-mean normal weights with std ``sqrt(2 / fan_in)``."""
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
