"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64, NCHW for feature
maps. Every forward op that needs state for its backward returns a context
object; the matching ``*_backward`` consumes it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class UsageError(RuntimeError):
    """An op was called out of order (e.g. backward without a forward)."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass
class GradPair:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")


# ---------------------------------------------------------------------------
# matmul / affine
# ---------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class AffineCtx:
    x: np.ndarray
    w: np.ndarray


def affine_forward(x, w, b):
    """y = x @ w + b, with x of shape (N, D), w (D, M), b (M,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shapes x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, AffineCtx(x, w)


def affine_backward(ctx: AffineCtx, grad_out):
    if ctx is None:
        raise UsageError("affine_backward called without a forward context")
    grad_out = as_tensor(grad_out)
    if grad_out.shape != (ctx.x.shape[0], ctx.w.shape[1]):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match affine output")
    return grad_out @ ctx.w.T, ctx.x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise / row ops
# ---------------------------------------------------------------------------

def relu_forward(x):
    x = as_tensor(x)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask, grad_out):
    if mask is None:
        raise UsageError("relu_backward called without a forward mask")
    return np.where(mask, grad_out, 0.0)


def softmax(c) -> np.ndarray:
    c = as_tensor(c)
    if np.isnan(c).any():
        raise NumericError("softmax input contains NaN")
    z = c - c.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, grad_p):
    """Vector-Jacobian product of softmax given its output ``p``."""
    p, grad_p = as_tensor(p), as_tensor(grad_p)
    return p * (grad_p - (p * grad_p).sum(axis=-1, keepdims=True))


def concat(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot concatenate rows of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(split: int, grad_out):
    grad_out = as_tensor(grad_out)
    return grad_out[:, :split], grad_out[:, split:]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvCtx:
    x_shape: tuple
    cols: np.ndarray  # (N*Ho*Wo, k*k*Cin)
    w: np.ndarray
    stride: int
    pad: int
    out_hw: tuple


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0):
    """Cross-correlation of an NCHW batch with a (Cout, Cin, k, k) kernel.

    Implemented as im2col + a single GEMM; the column buffer is kept in the
    context for the backward pass.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel {w.shape} incompatible with input {x.shape} (odd square kernels only)")
    if b.shape != (cout,):
        raise DimensionError(f"bias shape {b.shape} != ({cout},)")
    ho, wo = conv_out_extent(h, k, stride, pad), conv_out_extent(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"non-positive conv output extent {ho}x{wo}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # columns ordered (kh, kw, cin) so that col2im adds contiguous channel runs
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n * ho * wo, k * k * cin)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, ConvCtx(x.shape, cols, w, stride, pad, (ho, wo))


def conv2d_backward(ctx: ConvCtx, grad_out, need_input_grad: bool = True):
    if ctx is None:
        raise UsageError("conv2d_backward called without a forward context")
    grad_out = as_tensor(grad_out)
    n, cin, h, wd = ctx.x_shape
    cout, _, k, _ = ctx.w.shape
    ho, wo = ctx.out_hw
    if grad_out.shape != (n, cout, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, cout, ho, wo)}")
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, cout)
    wmat = ctx.w.transpose(0, 2, 3, 1).reshape(cout, -1)
    grad_w = np.ascontiguousarray((g.T @ ctx.cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, grad_w, grad_b
    s, p = ctx.stride, ctx.pad
    gcols = (g @ wmat).reshape(n, ho, wo, k, k, cin)
    gxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin))  # NHWC scratch
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, i, j, :]
    grad_x = gxp[:, p : p + h, p : p + wd, :] if p else gxp
    return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), grad_w, grad_b


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

@dataclass
class PoolCtx:
    x_shape: tuple
    argmax: np.ndarray  # flat index into H*W per output element


def maxpool2d_forward(x, window: int, stride: int):
    """Fixed-window max pooling; ties go to the first element in row-major order."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    local = flat.argmax(axis=-1)  # numpy argmax returns the first maximum
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    return np.ascontiguousarray(out), PoolCtx(x.shape, rows * w + cols)


def maxpool2d_backward(ctx: PoolCtx, grad_out):
    if ctx is None:
        raise UsageError("maxpool2d_backward called without a forward context")
    return scatter_argmax(ctx.x_shape, ctx.argmax, grad_out)


def scatter_argmax(x_shape, argmax, grad_out):
    """Route ``grad_out`` to flat argmax positions, summing collisions."""
    grad_out = as_tensor(grad_out)
    if grad_out.shape != argmax.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {argmax.shape}")
    n, c, h, w = x_shape
    per_map = argmax[0, 0].size if argmax.ndim == 4 else argmax.size // (n * c)
    offsets = np.repeat(np.arange(n * c, dtype=np.int64) * (h * w), per_map)
    gx = np.bincount(offsets + argmax.reshape(-1), weights=grad_out.reshape(-1), minlength=n * c * h * w)
    return gx.reshape(x_shape)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all coordinates."""
    a, n = as_tensor(analytic), as_tensor(numeric)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(f: Callable[[np.ndarray], float], grad_f: Callable[[np.ndarray], np.ndarray], x,
              h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between ``grad_f(x)`` and central differences of scalar ``f``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_tensor(x)
    f0 = f(x)
    if not np.isfinite(f0):
        raise NumericError("function value is not finite")
    return relative_error(grad_f(x.copy()), numeric_grad(f, x, h), floor)
