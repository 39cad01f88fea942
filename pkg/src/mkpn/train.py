"""Training loop, optimizer, and evaluation harness.

Training is fully deterministic for a fixed config: data synthesis streams
from (seed, sample index), weights come from the seed, and every step runs
forward -> slice -> reconstruct -> annealed loss -> backward -> Adam.
Checkpoints carry the optimizer moments, so a resumed run retraces the
uninterrupted one bitwise in 64-bit precision.

Evaluation always runs in float64 regardless of training precision; the
naive (per-size) and fused reconstruction paths must agree to roundoff, so
reports from either mode are interchangeable.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import BurstSample, ProceduralCorpus, burst_stream, load_sample, read_manifest
from .kernels import reconstruct_inference, reconstruct_training
from .losses import LossSchedule, basic_loss, psnr, ssim, total_loss
from .model import Checkpoint, ModelConfig, forward, init_weights, slice_head
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "adam_step",
    "Adam",
    "train",
    "evaluate",
    "EvalReport",
    "write_loss_log",
]

log = logging.getLogger(__name__)

EVAL_MODES = ("training_path", "fused_path")
_MODE_ALIASES = {"naive": "training_path", "fused": "fused_path"}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message names the offending step and sample."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSchedule = field(default_factory=LossSchedule)
    steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patch_size: int = 64
    checkpoint_every: int = 1000
    eval_every: int = 0          # 0 disables periodic loss reporting to the log
    precision: str = "float32"   # float64 for bitwise-reproducible runs

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        div = 1 << self.model.depth
        if self.patch_size % div:
            raise ValueError(
                f"patch size {self.patch_size} not divisible by 2^depth = {div}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: dict, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One adaptive-moment update, in place, with bias correction.

    state holds "m" and "v" moment arrays (zeros initially) and the step
    counter "t".  Raises NonFiniteError before touching anything if any
    gradient is non-finite, so an aborted step leaves params and state
    intact.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; step aborted")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam bound to a parameter list, with persistable state."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {
            "t": 0,
            "m": [np.zeros_like(p.data) for p in self.params],
            "v": [np.zeros_like(p.data) for p in self.params],
        }

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.lr, self.betas, self.eps)

    def state_tensors(self, names: Sequence[str]) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {"t": np.array([self.state["t"]], dtype=np.int64)}
        for name, m, v in zip(names, self.state["m"], self.state["v"]):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_tensors(self, names: Sequence[str], tensors: Dict[str, np.ndarray]) -> None:
        self.state["t"] = int(tensors["t"][0])
        self.state["m"] = [tensors[f"m.{n}"].copy() for n in names]
        self.state["v"] = [tensors[f"v.{n}"].copy() for n in names]


def _sample_to_tensors(sample: BurstSample, dtype):
    x = Tensor(sample.network_input().astype(dtype))
    burst = Tensor(sample.frames.astype(dtype))
    truth = sample.ground_truth.astype(dtype)
    return x, burst, truth


def train(config: TrainConfig, data: Optional[Iterator[BurstSample]] = None,
          out_dir=None, resume_from=None) -> Tuple[Checkpoint, List[dict]]:
    """Run the optimization loop; returns the final checkpoint and loss log.

    data defaults to the procedural stream seeded by config; a resumed run
    restarts that stream at the stored step so the trajectory matches an
    uninterrupted one.  out_dir, when given, receives periodic checkpoints
    (checkpoint.mkpn, overwritten) and the loss log CSV.
    """
    dtype = config.dtype
    if resume_from is not None:
        loaded, opt_tensors = Checkpoint.load(resume_from)
        if loaded.config != config.model:
            raise ValueError("checkpoint model config does not match TrainConfig")
        ckpt = loaded.astype(dtype)
        ckpt.step = loaded.step
    else:
        ckpt = init_weights(config.model, config.seed, dtype=dtype)
        opt_tensors = None

    opt = Adam(ckpt.parameters(), lr=config.lr,
               betas=(config.beta1, config.beta2), eps=config.eps)
    if opt_tensors:
        opt.load_state_tensors(ckpt.param_names(), opt_tensors)

    if data is None:
        corpus = ProceduralCorpus(seed=config.seed)
        data = burst_stream(corpus, config.model.n_frames, config.seed,
                            patch_size=config.patch_size,
                            start_index=ckpt.step * config.batch_size)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n_estimates = config.model.n_frames * len(config.model.sizes)
    inv_batch = 1.0 / config.batch_size
    rows: List[dict] = []
    while ckpt.step < config.steps:
        t = ckpt.step
        sched = config.loss.at(t)
        ckpt.zero_grads()
        total_val = 0.0
        basic_val = 0.0
        for k in range(config.batch_size):
            sample = next(data)
            where = (f"step {t}, batch slot {k} (stream seed {config.seed}, "
                     f"sample index ~{t * config.batch_size + k})")
            try:
                x, burst, truth = _sample_to_tensors(sample, dtype)
                raw = forward(ckpt, x)
                fld = slice_head(raw, config.model)
                rec = reconstruct_training(burst, fld)
                loss = total_loss(rec.final, rec.estimates, truth, sched,
                                  expected=n_estimates)
                lv = loss.item()
            except NonFiniteError as e:
                raise TrainingDiverged(f"non-finite activations at {where}") from e
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at {where}")
            with no_grad():
                basic_val += basic_loss(Tensor(rec.final.data), truth, sched).item() * inv_batch
            total_val += lv * inv_batch
            (loss * inv_batch).backward()
        try:
            opt.step()
        except NonFiniteError:
            log.warning("step %d: non-finite gradient, update skipped", t)
        rows.append({"step": t, "total_loss": total_val, "basic_loss": basic_val,
                     "anneal_weight": sched.anneal_weight()})
        ckpt.step = t + 1
        if out_path is not None and config.checkpoint_every and \
                ckpt.step % config.checkpoint_every == 0:
            ckpt.save(out_path / "checkpoint.mkpn",
                      opt_state=opt.state_tensors(ckpt.param_names()))
        if config.eval_every and ckpt.step % config.eval_every == 0:
            log.info("step %d: loss %.5f (basic %.5f)", t, total_val, basic_val)

    if out_path is not None:
        ckpt.save(out_path / "checkpoint.mkpn",
                  opt_state=opt.state_tensors(ckpt.param_names()))
        write_loss_log(out_path / "loss_log.csv", rows)
    return ckpt, rows


def write_loss_log(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "total_loss", "basic_loss",
                                               "anneal_weight"])
        writer.writeheader()
        writer.writerows(rows)


@dataclass
class EvalReport:
    """Per-sample metrics over one stored test set, plus their means."""

    model_id: str
    mode: str
    gain: Optional[int]
    manifest_sha256: str
    rows: List[dict]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows]))

    @property
    def mean_reference_psnr(self) -> float:
        return float(np.mean([r["reference_psnr"] for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["sample_id", "psnr", "ssim", "reference_psnr"])
            writer.writeheader()
            writer.writerows(self.rows)

    def summary(self) -> str:
        gain = f"Gain {self.gain}" if self.gain is not None else "Gain ?"
        lines = [
            f"{'model':<16} | {gain:^16}",
            f"{'':<16} | {'PSNR':>7} {'SSIM':>7}",
            "-" * 34,
            f"{self.model_id:<16} | {self.mean_psnr:>7.2f} {self.mean_ssim:>7.3f}",
            f"{'reference':<16} | {self.mean_reference_psnr:>7.2f} {'':>7}",
        ]
        return "\n".join(lines)


def _manifest_gain(testset_dir) -> Optional[int]:
    first = (Path(testset_dir) / "manifest.txt").read_text().splitlines()[0]
    if first.startswith("#"):
        for tok in first[1:].split():
            key, _, val = tok.partition("=")
            if key == "gain":
                return int(val)
    return None


def crop_border(img: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return img
    return img[margin:-margin, margin:-margin]


def evaluate(ckpt: Checkpoint, testset_dir, mode: str = "fused_path") -> EvalReport:
    """Metrics for every stored sample; float64 regardless of training dtype.

    A border of floor(s_max/2) pixels is cropped from every image before
    PSNR/SSIM so zero-padding artifacts of the local convolution do not
    enter the comparison; the reference (noisy frame 0) metric gets the
    identical crop.
    """
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    ck64 = ckpt.astype(np.float64)
    config = ck64.config
    margin = max(config.sizes) // 2
    manifest = Path(testset_dir) / "manifest.txt"
    sha = hashlib.sha256(manifest.read_bytes()).hexdigest()
    rows: List[dict] = []
    for sample_id in read_manifest(testset_dir):
        sample = load_sample(Path(testset_dir) / f"{sample_id}.mkpn")
        if sample.n_frames != config.n_frames:
            raise ValueError(
                f"{sample_id}: burst length {sample.n_frames} does not match "
                f"model ({config.n_frames})")
        with no_grad():
            x, burst, truth = _sample_to_tensors(sample, np.float64)
            raw = forward(ck64, x)
            fld = slice_head(raw, config)
            if mode == "training_path":
                pred = reconstruct_training(burst, fld).final.data
            else:
                pred = reconstruct_inference(burst, fld).data
        truth_c = crop_border(truth, margin)
        pred_c = crop_border(pred, margin)
        ref_c = crop_border(sample.frames[:, :, 0], margin)
        rows.append({
            "sample_id": sample_id,
            "psnr": psnr(pred_c, truth_c),
            "ssim": ssim(pred_c, truth_c),
            "reference_psnr": psnr(ref_c, truth_c),
        })
    return EvalReport(model_id=config.model_id, mode=mode,
                      gain=_manifest_gain(testset_dir), manifest_sha256=sha,
                      rows=rows)
