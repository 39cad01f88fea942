"""Differentiable image ops: 3x3 convolution, pooling, upsampling, concat.

All image tensors are (H, W, C) row-major.  conv2d is fixed at kernel 3x3,
stride 1, zero padding 1; that is the only convolution the network uses.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, apply_op

__all__ = [
    "conv2d",
    "avg_pool2",
    "upsample_bilinear2",
    "concat_channels",
    "channel_slice",
    "relu",
]


def relu(x: Tensor) -> Tensor:
    return x.relu()


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-size convolution, zero padded, stride 1.

    x: (H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,) -> (H, W, Cout).
    Implemented as im2col + one matmul; the column matrix is kept for the
    backward pass.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError("conv2d expects x (H,W,Cin), w (3,3,Cin,Cout), b (Cout,)")
    if w.data.shape[:2] != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {w.data.shape[:2]}")
    cin, cout = w.data.shape[2], w.data.shape[3]
    if x.data.shape[2] != cin:
        raise ShapeError(f"channel mismatch: input has {x.data.shape[2]}, kernel expects {cin}")
    if b.data.shape[0] != cout:
        raise ShapeError(f"bias length {b.data.shape[0]} != output channels {cout}")
    if not (x.data.dtype == w.data.dtype == b.data.dtype):
        raise ShapeError("conv2d operands must share one dtype")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("conv2d input contains non-finite values")

    h, wd = x.data.shape[:2]
    dtype = x.data.dtype
    padded = np.zeros((h + 2, wd + 2, cin), dtype=dtype)
    padded[1:-1, 1:-1] = x.data
    # windows[y, x, c, a, b] = padded[y+a, x+b, c]; reorder to (a, b, c) to
    # line up with w.reshape(9*Cin, Cout)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(h * wd, 9 * cin)
    w2d = w.data.reshape(9 * cin, cout)
    out = cols @ w2d
    out += b.data
    out = out.reshape(h, wd, cout)

    x_needs = x.requires_grad

    def backward(g):
        gm = g.reshape(h * wd, cout)
        dw = (cols.T @ gm).reshape(3, 3, cin, cout)
        db = gm.sum(axis=0)
        dx = None
        if x_needs:
            dcols = (gm @ w2d.T).reshape(h, wd, 3, 3, cin)
            dpad = np.zeros((h + 2, wd + 2, cin), dtype=dtype)
            for a in range(3):
                for bb in range(3):
                    dpad[a:a + h, bb:bb + wd] += dcols[:, :, a, bb]
            dx = dpad[1:-1, 1:-1]
        return dx, dw, db

    return apply_op(out, (x, w, b), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2.  Requires even H and W."""
    if x.data.ndim != 3:
        raise ShapeError("avg_pool2 expects (H, W, C)")
    h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"odd spatial extents: {h}x{w}")
    dtype = x.data.dtype
    out = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def backward(g):
        dx = np.empty((h, w, c), dtype=dtype)
        dx.reshape(h // 2, 2, w // 2, 2, c)[...] = g[:, None, :, None, :] * 0.25
        return (dx,)

    return apply_op(out, (x,), backward)


# Interpolation weight matrices keyed by (input extent, dtype).
_bilinear_cache: dict = {}


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """Row i holds the source weights of output sample i for a 2x upsample.

    Half-pixel centers: output i reads input coordinate (i+0.5)/2 - 0.5,
    linearly interpolated, clamped at the borders.
    """
    key = (n, np.dtype(dtype).str)
    m = _bilinear_cache.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            f = src - i0
            m[i, min(max(i0, 0), n - 1)] += 1.0 - f
            m[i, min(max(i0 + 1, 0), n - 1)] += f
        _bilinear_cache[key] = m
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling: (H, W, C) -> (2H, 2W, C)."""
    if x.data.ndim != 3:
        raise ShapeError("upsample_bilinear2 expects (H, W, C)")
    h, w, _ = x.data.shape
    mr = _bilinear_matrix(h, x.data.dtype)
    mc = _bilinear_matrix(w, x.data.dtype)
    t = np.tensordot(mr, x.data, axes=(1, 0))           # (2H, W, C)
    out = np.tensordot(t, mc, axes=(1, 1))              # (2H, C, 2W)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(g):
        t2 = np.tensordot(mr, g, axes=(0, 0))           # (H, 2W, C)
        dx = np.tensordot(t2, mc, axes=(1, 0))          # (H, C, W)
        return (np.ascontiguousarray(dx.transpose(0, 2, 1)),)

    return apply_op(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's.  Spatial extents must match."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels expects (H, W, C) operands")
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeError(f"spatial mismatch: {a.data.shape[:2]} vs {b.data.shape[:2]}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError("concat_channels operands must share one dtype")
    ca = a.data.shape[2]
    out = np.concatenate([a.data, b.data], axis=2)

    def backward(g):
        return np.ascontiguousarray(g[:, :, :ca]), np.ascontiguousarray(g[:, :, ca:])

    return apply_op(out, (a, b), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """View channels [start, stop) as a new tensor; backward scatters back."""
    if x.data.ndim != 3:
        raise ShapeError("channel_slice expects (H, W, C)")
    c = x.data.shape[2]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"slice [{start}:{stop}) out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, :, start:stop])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :, start:stop] = g
        return (dx,)

    return apply_op(out, (x,), backward)
