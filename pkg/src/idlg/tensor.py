"""Numerical kernels shared by the model and the attacks.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every function
here is pure: inputs are never written to.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Rng = np.random.Generator


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def make_rng(seed: int) -> Rng:
    """Seeded generator (PCG64).  Equal seeds give equal streams."""
    return np.random.Generator(np.random.PCG64(seed))


def sample_normal(rng: Rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def sample_uniform(rng: Rng, shape, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"empty interval [{lo}, {hi})")
    return rng.uniform(lo, hi, shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _patches(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """View of ``x`` as (C, H', W', k, k) patches."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv_output_shape(in_shape, kernel_shape, stride: int, pad: int) -> tuple[int, int, int]:
    c, h, w = in_shape
    kk, kc, kh, kw = kernel_shape
    if kc != c or kh != kw:
        raise DimensionError(f"kernels {tuple(kernel_shape)} do not fit input {tuple(in_shape)}")
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"non-positive output extent {oh}x{ow} for input {tuple(in_shape)}, "
            f"kernel {kh}, stride {stride}, pad {pad}"
        )
    return kk, oh, ow


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of a (C, H, W) input.

    ``bias`` may be None, which is the same as a zero bias.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"expected (C,H,W) input and (K,C,k,k) kernels, got {x.shape} and {kernels.shape}")
    kout, oh, ow = conv_output_shape(x.shape, kernels.shape, stride, pad)
    if bias is not None and bias.shape != (kout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {kout} output channels")
    cols = _patches(x, kernels.shape[-1], stride, pad)
    out = np.tensordot(kernels, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_input_grad(in_shape, kernels: np.ndarray, stride: int, pad: int,
                      upstream: np.ndarray) -> np.ndarray:
    """Adjoint of ``conv2d`` with respect to its input."""
    expected = conv_output_shape(in_shape, kernels.shape, stride, pad)
    if upstream.shape != expected:
        raise DimensionError(f"upstream {upstream.shape} does not match conv output {expected}")
    c, h, w = in_shape
    k = kernels.shape[-1]
    _, oh, ow = expected
    # (C, k, k, H', W') contributions, scattered back one kernel offset at a time
    contrib = np.tensordot(kernels, upstream, axes=([0], [0]))
    grad = np.zeros((c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            grad[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib[:, i, j]
    return grad[:, pad:pad + h, pad:pad + w]


def conv2d_grads(x: np.ndarray, kernels: np.ndarray, stride: int, pad: int,
                 upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of ``conv2d`` for input, kernels and bias."""
    expected = conv_output_shape(x.shape, kernels.shape, stride, pad)
    if upstream.shape != expected:
        raise DimensionError(f"upstream {upstream.shape} does not match conv output {expected}")
    cols = _patches(x, kernels.shape[-1], stride, pad)
    grad_kernels = np.tensordot(upstream, cols, axes=([1, 2], [1, 2]))
    grad_bias = upstream.sum(axis=(1, 2))
    grad_input = conv2d_input_grad(x.shape, kernels, stride, pad, upstream)
    return grad_input, grad_kernels, grad_bias


def sigmoid(t: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_grad(out: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Backprop through sigmoid given its output."""
    return upstream * out * (1.0 - out)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"mse of mismatched shapes {a.shape} and {b.shape}")
    return float(np.mean((a - b) ** 2))
