"""Per-pixel kernel composition, multi-size fusion, and local convolution.

A predicted kernel field assigns every pixel of every burst frame a separable
kernel per size: a vertical coefficient vector v (length s) and a horizontal
one h, whose outer product v⊗h is the 2D kernel.  Reconstruction applies
those kernels to the frames with spatially varying (local) convolution.

Two reconstruction paths exist and agree to roundoff:
  - training: one local convolution per (frame, size), all N·|S| estimates
    materialized because the annealed loss needs them, then averaged;
  - inference: per frame, sizes are fused into one kernel (center-aligned
    mean) first, so only N local convolutions run.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, add_n, apply_op

__all__ = [
    "compose_2d",
    "fuse_kernels",
    "local_conv",
    "KernelField",
    "TrainingReconstruction",
    "reconstruct_training",
    "reconstruct_inference",
    "local_conv_count",
    "reset_local_conv_count",
]

# Benchmarking hook: counts local_conv invocations process-wide.
_local_conv_calls = 0


def local_conv_count() -> int:
    return _local_conv_calls


def reset_local_conv_count() -> None:
    global _local_conv_calls
    _local_conv_calls = 0


def compose_2d(v: Tensor, h: Tensor) -> Tensor:
    """Outer product per pixel: out[y,x,a,b] = v[y,x,a] * h[y,x,b]."""
    if v.data.ndim != 3 or h.data.ndim != 3:
        raise ShapeError("compose_2d expects (H, W, s) coefficient tensors")
    if v.data.shape != h.data.shape:
        raise ShapeError(f"coefficient shape mismatch: {v.data.shape} vs {h.data.shape}")
    vd, hd = v.data, h.data
    out = np.einsum("yxa,yxb->yxab", vd, hd)

    def backward(g):
        dv = np.einsum("yxab,yxb->yxa", g, hd)
        dh = np.einsum("yxab,yxa->yxb", g, vd)
        return dv, dh

    return apply_op(out, (v, h), backward)


def fuse_kernels(kernels: Sequence[Tensor]) -> Tensor:
    """Mean of center-embedded 2D kernels: (H, W, s_max, s_max).

    Each input is (H, W, s, s) with s odd; smaller kernels are zero-padded
    symmetrically so their centers coincide.
    """
    ks = list(kernels)
    if not ks:
        raise ShapeError("fuse_kernels needs at least one kernel tensor")
    hw = ks[0].data.shape[:2]
    sizes = []
    for k in ks:
        if k.data.ndim != 4 or k.data.shape[2] != k.data.shape[3]:
            raise ShapeError("fused inputs must be (H, W, s, s)")
        if k.data.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k.data.shape[2]}")
        if k.data.shape[:2] != hw:
            raise ShapeError("inconsistent spatial extents across kernel sizes")
        sizes.append(k.data.shape[2])
    s_max = max(sizes)
    scale = 1.0 / len(ks)
    out = np.zeros(hw + (s_max, s_max), dtype=ks[0].data.dtype)
    for k, s in zip(ks, sizes):
        o = (s_max - s) // 2
        out[:, :, o:o + s, o:o + s] += k.data
    out *= scale

    def backward(g):
        grads = []
        for s in sizes:
            o = (s_max - s) // 2
            grads.append(g[:, :, o:o + s, o:o + s] * scale)
        return tuple(grads)

    return apply_op(out, tuple(ks), backward)


def local_conv(frame: Tensor, kernels: Tensor) -> Tensor:
    """Spatially varying convolution of one frame.

    out(y,x) = sum_{a,b} kernels[y,x,a,b] * frame(y+a-r, x+b-r), r = s//2,
    reading zero outside the frame.
    """
    global _local_conv_calls
    if frame.data.ndim != 2:
        raise ShapeError("local_conv expects a single-channel (H, W) frame")
    if kernels.data.ndim != 4 or kernels.data.shape[2] != kernels.data.shape[3]:
        raise ShapeError("kernels must be (H, W, s, s)")
    s = kernels.data.shape[2]
    if s % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {s}")
    h, w = frame.data.shape
    if kernels.data.shape[:2] != (h, w):
        raise ShapeError(f"kernel field {kernels.data.shape[:2]} does not match frame {(h, w)}")
    _local_conv_calls += 1

    r = s // 2
    dtype = frame.data.dtype
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=dtype)
    padded[r:r + h, r:r + w] = frame.data
    patches = np.lib.stride_tricks.sliding_window_view(padded, (s, s))  # (H, W, s, s)
    kd = kernels.data
    out = np.einsum("yxab,yxab->yx", patches, kd)

    frame_needs = frame.requires_grad

    def backward(g):
        dk = patches * g[:, :, None, None]
        dframe = None
        if frame_needs:
            dpad = np.zeros((h + 2 * r, w + 2 * r), dtype=dtype)
            for a in range(s):
                for b in range(s):
                    dpad[a:a + h, b:b + w] += g * kd[:, :, a, b]
            dframe = dpad[r:r + h, r:r + w]
        return dframe, dk

    return apply_op(out, (frame, kernels), backward)


def _frame(burst: Tensor, i: int) -> Tensor:
    """Differentiable view of channel i of a (H, W, N) burst."""
    out = np.ascontiguousarray(burst.data[:, :, i])

    def backward(g):
        db = np.zeros_like(burst.data)
        db[:, :, i] = g
        return (db,)

    return apply_op(out, (burst,), backward)


class KernelField:
    """Separable coefficients for every (frame, size), with lazy caches.

    coeffs maps (frame index, size) to a (v, h) pair of (H, W, s) tensors.
    Composed 2D kernels and per-frame fused kernels are materialized on
    first use and reused; both stay part of the autodiff graph.
    """

    def __init__(self, n: int, sizes: Sequence[int],
                 coeffs: Dict[Tuple[int, int], Tuple[Tensor, Tensor]]):
        sizes = tuple(sizes)
        if len(set(sizes)) != len(sizes):
            raise ShapeError("duplicate kernel sizes")
        for s in sizes:
            if s < 1 or s % 2 == 0:
                raise ShapeError(f"kernel sizes must be odd and >= 1, got {s}")
        hw = None
        for i in range(n):
            for s in sizes:
                if (i, s) not in coeffs:
                    raise ShapeError(f"missing coefficients for frame {i}, size {s}")
                v, h = coeffs[(i, s)]
                if v.data.shape != h.data.shape or v.data.shape[2] != s:
                    raise ShapeError(f"bad coefficient shapes for frame {i}, size {s}")
                if hw is None:
                    hw = v.data.shape[:2]
                elif v.data.shape[:2] != hw:
                    raise ShapeError("inconsistent spatial extents in kernel field")
        self.n = n
        self.sizes = sizes
        self.coeffs = coeffs
        self.spatial = hw
        self._kernels_2d: Dict[Tuple[int, int], Tensor] = {}
        self._fused: Dict[int, Tensor] = {}

    def kernel_2d(self, i: int, s: int) -> Tensor:
        k = self._kernels_2d.get((i, s))
        if k is None:
            v, h = self.coeffs[(i, s)]
            k = compose_2d(v, h)
            self._kernels_2d[(i, s)] = k
        return k

    def fused(self, i: int) -> Tensor:
        k = self._fused.get(i)
        if k is None:
            k = fuse_kernels([self.kernel_2d(i, s) for s in self.sizes])
            self._fused[i] = k
        return k


class TrainingReconstruction:
    """All per-(frame, size) estimates plus their average."""

    __slots__ = ("estimates", "final")

    def __init__(self, estimates: Dict[Tuple[int, int], Tensor], final: Tensor):
        self.estimates = estimates
        self.final = final


def _check_burst(burst: Tensor, field: KernelField) -> None:
    if burst.data.ndim != 3:
        raise ShapeError("burst must be (H, W, N)")
    if burst.data.shape[2] != field.n:
        raise ShapeError(f"burst has {burst.data.shape[2]} frames, field expects {field.n}")
    if burst.data.shape[:2] != field.spatial:
        raise ShapeError(f"burst extent {burst.data.shape[:2]} != field extent {field.spatial}")


def reconstruct_training(burst: Tensor, field: KernelField) -> TrainingReconstruction:
    """One local convolution per (frame, size); final = mean of all estimates."""
    _check_burst(burst, field)
    estimates: Dict[Tuple[int, int], Tensor] = {}
    for i in range(field.n):
        fr = _frame(burst, i)
        for s in field.sizes:
            estimates[(i, s)] = local_conv(fr, field.kernel_2d(i, s))
    final = add_n(list(estimates.values())) * (1.0 / len(estimates))
    return TrainingReconstruction(estimates, final)


def reconstruct_inference(burst: Tensor, field: KernelField) -> Tensor:
    """Fused path: exactly one local convolution per frame."""
    _check_burst(burst, field)
    outs = [local_conv(_frame(burst, i), field.fused(i)) for i in range(field.n)]
    return add_n(outs) * (1.0 / field.n)
