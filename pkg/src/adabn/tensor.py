"""Dense float64 array primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the shape checks and error messages the rest of the
package relies on.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, PreconditionError

Tensor = np.ndarray


def as_tensor(x, *, check_finite: bool = True) -> Tensor:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _windows(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    # (n, c, h', w', kh, kw) view, no copy
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    The kernel is not flipped: ``out[n, o, i, j] = sum_{c,u,v}
    x[n, c, i*stride + u, j*stride + v] * kernel[o, c, u, v]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise PreconditionError(f"stride must be positive, got {stride}")
    _, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kernel.shape} larger than input {x.shape}")
    win = _windows(x, kh, kw, stride)
    return np.ascontiguousarray(np.einsum("nchwij,ocij->nohw", win, kernel, optimize=True))


def conv2d_backward(x: Tensor, kernel: Tensor, stride: int, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    """Gradients of :func:`conv2d` with respect to input and kernel."""
    _, _, kh, kw = kernel.shape
    win = _windows(x, kh, kw, stride)
    grad_kernel = np.einsum("nohw,nchwij->ocij", grad_out, win, optimize=True)
    # per-tap scatter-add back into the input grid
    taps = np.einsum("nohw,ocij->nchwij", grad_out, kernel, optimize=True)
    grad_x = np.zeros_like(x)
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    for u in range(kh):
        for v in range(kw):
            grad_x[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += taps[:, :, :, :, u, v]
    return grad_x, grad_kernel


def reduce_moments(x: Tensor, axes: Iterable[int] | int = 0) -> tuple[Tensor, Tensor]:
    """Mean and population (divide-by-N) variance over ``axes``.

    Uses the two-pass form (centre first, then square) so the variance is never
    negative through cancellation.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count < 1:
        raise PreconditionError("reduce_moments over an empty reduction")
    mean = x.mean(axis=axes)
    centred = x - np.expand_dims(mean, axes)
    var = (centred * centred).mean(axis=axes)
    return mean, var
