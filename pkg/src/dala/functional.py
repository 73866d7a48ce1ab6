"""Differentiable primitives over :class:`~dala.tensor.Tensor`.

All ops are pure functions: identical inputs (and seed, for dropout)
produce bitwise-identical outputs.  Convolution and pooling use strided
window views plus one contraction, so the heavy lifting stays in BLAS.

Kink conventions, fixed so gradients are deterministic and testable:
relu'(0) = 0, leaky_relu'(0) = slope, max-pool ties route the gradient to
the first maximal cell in row-major window order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DimensionError, InputError
from .tensor import Tensor

__all__ = [
    "conv2d",
    "max_pool2d",
    "adaptive_avg_pool2d",
    "fully_connected",
    "leaky_relu",
    "relu",
    "channel_scale",
    "dropout",
    "softmax_cross_entropy",
    "add",
    "mul",
    "reshape",
    "scale",
    "sum_all",
    "pick",
]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [K,C,kh,kw].

    Output is [N,K,H',W'] with H' = floor((H+2*padding-kh)/stride)+1.
    No bias term; layers add one separately if they need it.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.ndim}-D and {kernel.ndim}-D")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(np.moveaxis(out, 3, 1))
    h_out, w_out = out.shape[2], out.shape[3]

    def backward(go: np.ndarray):
        g_kernel = np.tensordot(go, windows, axes=([0, 2, 3], [0, 2, 3]))
        g_cols = np.tensordot(go, kernel.data, axes=([1], [0]))  # N,H',W',C,kh,kw
        g_pad = np.zeros_like(x_pad)
        for i in range(kh):
            for j in range(kw):
                g_pad[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    np.moveaxis(g_cols[..., i, j], 3, 1)
                )
        g_x = g_pad[:, :, padding : padding + h, padding : padding + w]
        return g_x, g_kernel

    return Tensor._result(out, "conv2d", (x, kernel), backward)


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over non-overlapping (or strided) square windows."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects 4-D input, got {x.ndim}-D")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ConfigurationError("window and stride must be positive")
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")

    views = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = views.shape[2], views.shape[3]
    flat = views.reshape(n, c, h_out, w_out, window * window)
    arg = np.argmax(flat, axis=-1)  # first max in row-major scan
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward(go: np.ndarray):
        onehot = np.arange(window * window).reshape(1, 1, 1, 1, -1) == arg[..., None]
        g_win = (go[..., None] * onehot).reshape(n, c, h_out, w_out, window, window)
        g_x = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                g_x[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    g_win[..., i, j]
                )
        return (g_x,)

    return Tensor._result(out, "max_pool2d", (x,), backward)


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over half-open bins [floor(j*H/out_h), floor((j+1)*H/out_h)).

    With a 1x1 target this is the per-channel arithmetic mean over all
    spatial positions; gradients spread uniformly over each bin.
    """
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d expects 4-D input, got {x.ndim}-D")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be positive")
    if out_h > h or out_w > w:
        raise DimensionError(f"output {out_h}x{out_w} exceeds input {h}x{w}")

    h_edges = [(a * h) // out_h for a in range(out_h + 1)]
    w_edges = [(b * w) // out_w for b in range(out_w + 1)]
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for a in range(out_h):
        for b in range(out_w):
            out[:, :, a, b] = x.data[
                :, :, h_edges[a] : h_edges[a + 1], w_edges[b] : w_edges[b + 1]
            ].mean(axis=(2, 3))

    def backward(go: np.ndarray):
        g_x = np.zeros_like(x.data)
        for a in range(out_h):
            for b in range(out_w):
                span = (h_edges[a + 1] - h_edges[a]) * (w_edges[b + 1] - w_edges[b])
                g_x[:, :, h_edges[a] : h_edges[a + 1], w_edges[b] : w_edges[b + 1]] += (
                    go[:, :, a, b, None, None] / span
                )
        return (g_x,)

    return Tensor._result(out, "adaptive_avg_pool2d", (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x [N,D], weight [D,M], bias [M]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError("fully_connected expects x [N,D], weight [D,M], bias [M]")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"inner dimensions disagree: input D={x.shape[1]}, weight D={weight.shape[0]}"
        )
    if bias.shape[0] != weight.shape[1]:
        raise DimensionError(
            f"bias length {bias.shape[0]} != output width {weight.shape[1]}"
        )
    out = x.data @ weight.data + bias.data

    def backward(go: np.ndarray):
        return go @ weight.data.T, x.data.T @ go, go.sum(axis=0)

    return Tensor._result(out, "fully_connected", (x, weight, bias), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """x if x > 0 else slope * x; derivative at 0 is the slope."""
    if slope < 0:
        raise ConfigurationError(f"leaky_relu slope must be >= 0, got {slope}")
    s = x.dtype.type(slope)
    out = np.where(x.data > 0, x.data, s * x.data)

    def backward(go: np.ndarray):
        return (go * np.where(x.data > 0, x.dtype.type(1), s),)

    return Tensor._result(out, "leaky_relu", (x,), backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0)

    def backward(go: np.ndarray):
        return (go * (x.data > 0),)

    return Tensor._result(out, "relu", (x,), backward)


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each channel of x [N,C,H,W] by its gate value [N,C]."""
    if x.ndim != 4 or gate.ndim != 2:
        raise DimensionError("channel_scale expects x [N,C,H,W] and gate [N,C]")
    if x.shape[0] != gate.shape[0] or x.shape[1] != gate.shape[1]:
        raise DimensionError(
            f"gate shape {tuple(gate.shape)} does not match input channels {tuple(x.shape[:2])}"
        )
    g = gate.data[:, :, None, None]
    out = x.data * g

    def backward(go: np.ndarray):
        return go * g, (go * x.data).sum(axis=(2, 3))

    return Tensor._result(out, "channel_scale", (x, gate), backward)


def dropout(x: Tensor, rate: float, training: bool, seed: int) -> Tensor:
    """Zero each element with probability ``rate`` and rescale survivors
    by 1/(1-rate) during training; exact identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def backward_id(go: np.ndarray):
            return (go,)

        return Tensor._result(x.data, "dropout", (x,), backward_id)

    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * keep * factor

    def backward(go: np.ndarray):
        return (go * keep * factor,)

    return Tensor._result(out, "dropout", (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max subtraction."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {logits.ndim}-D")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise InputError("labels must be a vector with one entry per row of logits")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = np.asarray(-log_p[rows, labels].mean(), dtype=logits.dtype)

    def backward(go: np.ndarray):
        g = np.exp(log_p)
        g[rows, labels] -= 1
        return (g * (go / n),)

    return Tensor._result(loss, "softmax_cross_entropy", (logits,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual skip join)."""
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = a.data + b.data

    def backward(go: np.ndarray):
        return go, go

    return Tensor._result(out, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = a.data * b.data

    def backward(go: np.ndarray):
        return go * b.data, go * a.data

    return Tensor._result(out, "mul", (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(go: np.ndarray):
        return (go.reshape(x.shape),)

    return Tensor._result(out, "reshape", (x,), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    f = x.dtype.type(factor)
    out = x.data * f

    def backward(go: np.ndarray):
        return (go * f,)

    return Tensor._result(out, "scale", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(go: np.ndarray):
        return (np.broadcast_to(go, x.shape).copy(),)

    return Tensor._result(out, "sum_all", (x,), backward)


def pick(x: Tensor, index: tuple) -> Tensor:
    """Select a single element as a scalar tensor (class-score extraction)."""
    index = tuple(int(i) for i in index)
    if len(index) != x.ndim:
        raise InputError(f"pick index rank {len(index)} != tensor rank {x.ndim}")
    for i, (idx, dim) in enumerate(zip(index, x.shape)):
        if not 0 <= idx < dim:
            raise InputError(f"pick index {idx} out of range for axis {i} of size {dim}")
    out = np.asarray(x.data[index], dtype=x.dtype)

    def backward(go: np.ndarray):
        g = np.zeros_like(x.data)
        g[index] = go
        return (g,)

    return Tensor._result(out, "pick", (x,), backward)
