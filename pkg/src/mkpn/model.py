"""Kernel prediction U-Net.

Input is a burst stacked channelwise plus one noise-estimate channel.  An
encoder of conv+relu pairs with 2x average pooling between scales feeds a
two-conv bottleneck; the decoder mirrors it with bilinear upsampling and
skip concatenations.  The decoder stops at half resolution: a single linear
3x3 head conv emits 2*p*N channels of 1D kernel coefficients there, and one
last bilinear upsample brings them to input resolution.  Outer products and
local convolution happen downstream on the sliced coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .container import load_tensors, save_tensors
from .kernels import KernelField
from .ops import avg_pool2, channel_slice, concat_channels, conv2d, upsample_bilinear2
from .tensor import ShapeError, Tensor

__all__ = ["ModelConfig", "Checkpoint", "layer_plan", "init_weights", "forward", "slice_head"]

DEFAULT_SIZES = (1, 3, 5, 7, 9, 11)


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 8
    sizes: Tuple[int, ...] = DEFAULT_SIZES
    depth: int = 3
    widths: Tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(self.sizes))
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.n_frames < 1:
            raise ValueError(f"burst length must be >= 1, got {self.n_frames}")
        if not self.sizes:
            raise ValueError("at least one kernel size required")
        if len(set(self.sizes)) != len(self.sizes):
            raise ValueError(f"duplicate kernel sizes in {self.sizes}")
        for s in self.sizes:
            if s < 1 or s % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {s}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if len(self.widths) != self.depth:
            raise ValueError(f"need one width per scale: depth {self.depth}, widths {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")

    @property
    def p(self) -> int:
        return sum(self.sizes)

    @property
    def head_channels(self) -> int:
        return 2 * self.p * self.n_frames

    @property
    def input_channels(self) -> int:
        return self.n_frames + 1

    @property
    def model_id(self) -> str:
        if len(self.sizes) == 1:
            return f"kpn-l{self.sizes[0]}"
        return "mkpn-" + "-".join(str(s) for s in self.sizes)

    def to_dict(self) -> dict:
        return {"n_frames": self.n_frames, "sizes": list(self.sizes),
                "depth": self.depth, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(n_frames=d["n_frames"], sizes=tuple(d["sizes"]),
                   depth=d["depth"], widths=tuple(d["widths"]))


def layer_plan(config: ModelConfig) -> List[Tuple[str, int, int]]:
    """Ordered (layer name, in channels, out channels) for every conv."""
    plan: List[Tuple[str, int, int]] = []
    cin = config.input_channels
    for k in range(config.depth):
        w = config.widths[k]
        plan.append((f"enc{k}a", cin, w))
        plan.append((f"enc{k}b", w, w))
        cin = w
    plan.append(("bot_a", cin, config.widths[-1]))
    plan.append(("bot_b", config.widths[-1], config.widths[-1]))
    cin = config.widths[-1]
    for k in range(config.depth - 1, 0, -1):
        w = config.widths[k]
        plan.append((f"dec{k}a", cin + w, w))
        plan.append((f"dec{k}b", w, w))
        cin = w
    plan.append(("head", cin, config.head_channels))
    return plan


@dataclass
class Checkpoint:
    """Model weights plus the training step they were taken at."""

    config: ModelConfig
    params: Dict[str, Tensor]
    step: int = 0

    def parameters(self) -> List[Tensor]:
        return [self.params[name] for name in self.param_names()]

    def param_names(self) -> List[str]:
        names = []
        for layer, _, _ in layer_plan(self.config):
            names.append(f"{layer}.w")
            names.append(f"{layer}.b")
        return names

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Checkpoint":
        params = {name: Tensor(p.data.astype(dtype), requires_grad=True)
                  for name, p in self.params.items()}
        return Checkpoint(self.config, params, self.step)

    def save(self, path, opt_state: Optional[Dict[str, np.ndarray]] = None) -> None:
        meta = {"kind": "checkpoint", "config": self.config.to_dict(), "step": self.step}
        tensors = {name: p.data for name, p in self.params.items()}
        if opt_state:
            for name, arr in opt_state.items():
                tensors[f"opt.{name}"] = arr
        save_tensors(path, meta, tensors)

    @classmethod
    def load(cls, path) -> Tuple["Checkpoint", Dict[str, np.ndarray]]:
        meta, tensors = load_tensors(path)
        if meta.get("kind") != "checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        config = ModelConfig.from_dict(meta["config"])
        params: Dict[str, Tensor] = {}
        opt_state: Dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            if name.startswith("opt."):
                opt_state[name[4:]] = arr
            else:
                params[name] = Tensor(arr, requires_grad=True)
        ckpt = cls(config, params, step=int(meta["step"]))
        expected = set(ckpt.param_names())
        if set(params) != expected:
            raise ValueError(f"{path}: parameter names do not match the model plan")
        for layer, cin, cout in layer_plan(config):
            if params[f"{layer}.w"].shape != (3, 3, cin, cout):
                raise ValueError(f"{path}: bad shape for {layer}.w")
            if params[f"{layer}.b"].shape != (cout,):
                raise ValueError(f"{path}: bad shape for {layer}.b")
        return ckpt, opt_state


def init_weights(config: ModelConfig, seed: int, dtype=np.float64) -> Checkpoint:
    """Fan-in-scaled uniform init, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for layer, cin, cout in layer_plan(config):
        fan_in = 9 * cin
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(3, 3, cin, cout)).astype(dtype)
        params[f"{layer}.w"] = Tensor(w, requires_grad=True)
        params[f"{layer}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return Checkpoint(config, params, step=0)


def forward(ckpt: Checkpoint, x: Tensor) -> Tensor:
    """(H, W, N+1) -> (H, W, 2pN) raw kernel coefficients."""
    config = ckpt.config
    if x.data.ndim != 3:
        raise ShapeError("model input must be (H, W, C)")
    h, w, c = x.data.shape
    if c != config.input_channels:
        raise ShapeError(f"expected {config.input_channels} input channels, got {c}")
    div = 1 << config.depth
    if h % div or w % div or h < div or w < div:
        raise ShapeError(f"spatial extents must be divisible by {div}, got {h}x{w}")

    def conv_relu(name, t):
        return conv2d(t, ckpt.params[f"{name}.w"], ckpt.params[f"{name}.b"]).relu()

    skips = []
    t = x
    for k in range(config.depth):
        t = conv_relu(f"enc{k}a", t)
        t = conv_relu(f"enc{k}b", t)
        skips.append(t)
        t = avg_pool2(t)
    t = conv_relu("bot_a", t)
    t = conv_relu("bot_b", t)
    for k in range(config.depth - 1, 0, -1):
        t = upsample_bilinear2(t)
        t = concat_channels(t, skips[k])
        t = conv_relu(f"dec{k}a", t)
        t = conv_relu(f"dec{k}b", t)
    t = conv2d(t, ckpt.params["head.w"], ckpt.params["head.b"])  # linear head
    return upsample_bilinear2(t)


def slice_head(raw: Tensor, config: ModelConfig) -> KernelField:
    """Split raw coefficients into per-(frame, size) vertical/horizontal pairs.

    Channel layout: frames outermost; within a frame, sizes ascending, each
    contributing s vertical then s horizontal channels.
    """
    if raw.data.ndim != 3 or raw.data.shape[2] != config.head_channels:
        raise ShapeError(
            f"raw coefficients must have {config.head_channels} channels, "
            f"got {raw.data.shape}")
    sizes = tuple(sorted(config.sizes))
    coeffs = {}
    offset = 0
    for i in range(config.n_frames):
        for s in sizes:
            v = channel_slice(raw, offset, offset + s)
            hh = channel_slice(raw, offset + s, offset + 2 * s)
            coeffs[(i, s)] = (v, hh)
            offset += 2 * s
    return KernelField(config.n_frames, sizes, coeffs)
