"""Differentiable primitives used by the forecasting network."""
import logging
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.tensor import Tensor
from errors import ShapeMismatch, SignalTooShort

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


def _tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    return a + b


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return a * b


def relu(x: Tensor) -> Tensor:
    return x.relu()


def reshape(x: Tensor, shape) -> Tensor:
    return x.reshape(shape)


def permute(x: Tensor, axes) -> Tensor:
    return x.permute(axes)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ W + b over the last axis of x; leading axes are treated as batch."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeMismatch(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    n_in, n_out = weight.shape
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        flat_g = g.reshape(-1, n_out)
        grad_x = g @ weight.data.T
        grad_w = x.data.reshape(-1, n_in).T @ flat_g
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, flat_g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "linear")


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding.

    x is [C_in, H, W], kernels [C_out, C_in, k, k] with k odd.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 3-d input and 4-d kernels, got {x.shape} and {kernels.shape}")
    c_out, c_in, k, k_w = kernels.shape
    if k != k_w or k % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernels must be square with odd size, got {k}x{k_w}")
    if x.shape[0] != c_in:
        raise ShapeMismatch(f"conv2d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # [C_in, H, W, k, k]
    out = np.tensordot(kernels.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        grad_k = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        g_padded = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        g_windows = sliding_window_view(g_padded, (k, k), axis=(1, 2))  # [C_out, H, W, k, k]
        flipped = kernels.data[:, :, ::-1, ::-1]
        grad_x = np.tensordot(flipped, g_windows, axes=([0, 2, 3], [0, 3, 4]))
        if bias is None:
            return grad_x, grad_k
        return grad_x, grad_k, g.sum(axis=(1, 2))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, computed max-subtracted."""
    x = _tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / np.sum(exp, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def rfft_amplitude(x: ArrayLike) -> Tensor:
    """|DFT| of each column for frequencies 1..T//2, averaged over columns.

    Forward only: the result never carries a gradient.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise ShapeMismatch(f"rfft_amplitude: expected [T, d] input, got shape {data.shape}")
    length = data.shape[0]
    if length < 4:
        raise SignalTooShort(f"rfft_amplitude needs at least 4 timesteps, got {length}")
    spectrum = np.abs(np.fft.rfft(data.astype(np.float64), axis=0))
    return Tensor(spectrum[1 : length // 2 + 1].mean(axis=1))


def pad_rows(x: Tensor, total: int) -> Tensor:
    """Zero-pad axis 0 up to `total` rows."""
    rows = x.shape[0]
    if total < rows:
        raise ShapeMismatch(f"pad_rows: cannot pad {rows} rows down to {total}")
    if total == rows:
        return x
    widths = [(0, total - rows)] + [(0, 0)] * (x.ndim - 1)
    return Tensor.from_op(np.pad(x.data, widths), (x,), lambda g: (g[:rows],), "pad_rows")


def mse_loss(prediction: Tensor, target: ArrayLike) -> Tensor:
    target = _tensor(target)
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.data - target.data.astype(prediction.dtype, copy=False)
    count = diff.size

    def backward(g):
        scaled = (2.0 / count) * g * diff
        return scaled, -scaled

    return Tensor.from_op(np.mean(diff * diff), (prediction, target), backward, "mse_loss")
