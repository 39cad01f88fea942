"""Training losses and evaluation metrics.

The training objective combines a per-pixel MSE with an L1 penalty on image
gradients, both as means so the balance is resolution-independent.  During
training every per-(frame, size) estimate additionally receives the same
basic loss, scaled by an annealing weight beta * alpha^t that decays toward
zero; early on this forces each kernel size to denoise on its own, later the
averaged reconstruction takes over.

PSNR and SSIM operate on plain arrays and are not differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, add_n, apply_op

__all__ = [
    "LossSchedule",
    "grad_image",
    "basic_loss",
    "total_loss",
    "psnr",
    "ssim",
]


@dataclass
class LossSchedule:
    """Loss weights and the annealing state at training step t."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    beta: float = 100.0
    alpha: float = 0.9998
    t: int = 0

    def __post_init__(self):
        if abs(self.lambda1 + self.lambda2 - 1.0) > 1e-12:
            raise ValueError(f"lambda1 + lambda2 must be 1, got {self.lambda1 + self.lambda2}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.t < 0:
            raise ValueError(f"step must be >= 0, got {self.t}")

    def at(self, t: int) -> "LossSchedule":
        return replace(self, t=t)

    def anneal_weight(self) -> float:
        return self.beta * self.alpha ** self.t


def grad_image(img: Tensor) -> Tensor:
    """Forward-difference image gradient, (H, W) -> (H, W, 2).

    Channel 0 differences along x (columns), channel 1 along y (rows); the
    trailing column/row holds zeros since no forward neighbor exists.
    """
    if img.data.ndim != 2:
        raise ShapeError("grad_image expects a single-channel (H, W) image")
    h, w = img.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"image too small for gradients: {h}x{w}")
    d = img.data
    out = np.zeros((h, w, 2), dtype=d.dtype)
    out[:, :-1, 0] = d[:, 1:] - d[:, :-1]
    out[:-1, :, 1] = d[1:, :] - d[:-1, :]

    def backward(g):
        di = np.zeros_like(d)
        gx = g[:, :-1, 0]
        di[:, 1:] += gx
        di[:, :-1] -= gx
        gy = g[:-1, :, 1]
        di[1:, :] += gy
        di[:-1, :] -= gy
        return (di,)

    return apply_op(out, (img,), backward)


def _coerce(t, like: Tensor) -> Tensor:
    if isinstance(t, Tensor):
        return t
    return Tensor(np.asarray(t, dtype=like.data.dtype))


def basic_loss(pred: Tensor, truth, sched: LossSchedule) -> Tensor:
    """lambda1 * mean((pred-truth)^2) + lambda2 * mean(|grad pred - grad truth|)."""
    truth = _coerce(truth, pred)
    diff = pred - truth
    mse = (diff * diff).mean()
    gdiff = grad_image(pred) - grad_image(truth)
    return mse * sched.lambda1 + gdiff.abs().mean() * sched.lambda2


def total_loss(final: Tensor, per_estimates, truth, sched: LossSchedule,
               expected: Optional[int] = None) -> Tensor:
    """Annealed objective: basic(final) + beta*alpha^t * sum of per-estimate
    basic losses."""
    if hasattr(per_estimates, "values"):
        estimates = list(per_estimates.values())
    else:
        estimates = list(per_estimates)
    if not estimates:
        raise ValueError("total_loss needs at least one per-estimate reconstruction")
    if expected is not None and len(estimates) != expected:
        raise ValueError(f"expected {expected} per-estimate reconstructions, got {len(estimates)}")
    loss = basic_loss(final, truth, sched)
    aux = add_n([basic_loss(e, truth, sched) for e in estimates])
    return loss + aux * sched.anneal_weight()


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(pred, truth) -> float:
    """10*log10(1/MSE) on a [0, 1] intensity scale; 99 dB when MSE is
    numerically zero."""
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    mse = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return 99.0
    return 10.0 * math.log10(1.0 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _gaussian_window() -> np.ndarray:
    r = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, truth) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), computed
    over valid window positions only."""
    p, t = _as_array(pred), _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim != 2 or min(p.shape) < _SSIM_WINDOW:
        raise ShapeError(f"image must be 2D and at least {_SSIM_WINDOW} pixels each way")
    p = p.astype(np.float64)
    t = t.astype(np.float64)
    k = _gaussian_window()

    def wmean(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (_SSIM_WINDOW, _SSIM_WINDOW))
        return np.einsum("hwab,ab->hw", win, k)

    mu_p = wmean(p)
    mu_t = wmean(t)
    var_p = wmean(p * p) - mu_p * mu_p
    var_t = wmean(t * t) - mu_t * mu_t
    cov = wmean(p * t) - mu_p * mu_t
    num = (2.0 * mu_p * mu_t + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_p * mu_p + mu_t * mu_t + _SSIM_C1) * (var_p + var_t + _SSIM_C2)
    return float(np.mean(num / den))
