"""Synthetic burst generation: patches, misalignment offsets, sensor noise.

A burst is built from one clean source image: a reference patch plus N-1
translated copies of it, each corrupted with signal-dependent Gaussian noise
of per-pixel variance sigma_r^2 + sigma_s * y.  The translations come from
the source (cropped at shifted coordinates), never from zero padding, so no
fake borders enter the training data.

Everything here is plain numpy in float64; tensors enter the picture only at
the model boundary.  All randomness flows through explicitly passed
generators, and each sample's generator derives from (master seed, index),
so generation is reproducible and order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .container import load_tensors, save_tensors

__all__ = [
    "NoiseParams",
    "BurstSample",
    "gain_preset",
    "sample_noise_params",
    "add_noise",
    "estimate_noise",
    "box_downsample4",
    "sample_offsets",
    "make_burst",
    "ProceduralCorpus",
    "DirectoryCorpus",
    "burst_stream",
    "save_sample",
    "load_sample",
    "generate_testset",
    "read_manifest",
    "load_image",
    "save_png",
    "GAINS",
]

OFFSET_WIDE = 16   # misalignment range for "moved" frames
OFFSET_SMALL = 2   # jitter range for aligned frames


@dataclass(frozen=True)
class NoiseParams:
    sigma_r: float
    sigma_s: float


# Gain presets: ISO-like sensitivity steps, noisiest at 8.
GAINS = {
    1: NoiseParams(10.0 ** -2.1, 10.0 ** -2.6),
    2: NoiseParams(10.0 ** -1.8, 10.0 ** -2.3),
    4: NoiseParams(10.0 ** -1.4, 10.0 ** -1.9),
    8: NoiseParams(10.0 ** -1.1, 10.0 ** -1.5),
}


def gain_preset(gain: int) -> NoiseParams:
    try:
        return GAINS[gain]
    except KeyError:
        raise ValueError(f"unknown gain {gain!r}; valid gains: {sorted(GAINS)}") from None


def sample_noise_params(rng: np.random.Generator) -> NoiseParams:
    # Uniform in the exponent: the stated ranges are powers of ten.
    return NoiseParams(10.0 ** rng.uniform(-3.0, -1.5), 10.0 ** rng.uniform(-2.0, -1.0))


def add_noise(clean: np.ndarray, noise: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel Gaussian with variance sigma_r^2 + sigma_s * y.  Not clipped."""
    std = np.sqrt(noise.sigma_r ** 2 + noise.sigma_s * clean)
    return clean + rng.standard_normal(clean.shape) * std


def estimate_noise(frame0: np.ndarray, noise: NoiseParams) -> np.ndarray:
    """Per-pixel noise std from the (noisy) reference frame, floored at 0."""
    return np.sqrt(noise.sigma_r ** 2 + noise.sigma_s * np.maximum(frame0, 0.0))


def box_downsample4(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    if h % 4 or w % 4:
        raise ValueError(f"extents must be divisible by 4, got {h}x{w}")
    # reduce each block as one contiguous run so the result is bitwise equal
    # to block.mean() regardless of summation associativity
    blocks = image.reshape(h // 4, 4, w // 4, 4).transpose(0, 2, 1, 3).reshape(h // 4, w // 4, 16)
    return blocks.mean(axis=2)


def _sample_offsets_detailed(n_frames: int, lam: float, rng: np.random.Generator):
    """Offsets plus the per-frame wide/small branch taken (for statistics)."""
    if n_frames < 1:
        raise ValueError("burst needs at least one frame")
    n = min(int(rng.poisson(lam)), n_frames)
    p_wide = n / n_frames
    offsets: List[Tuple[int, int]] = [(0, 0)]
    wide: List[bool] = [False]
    for _ in range(1, n_frames):
        w = bool(rng.random() < p_wide)
        r = OFFSET_WIDE if w else OFFSET_SMALL
        x = int(rng.integers(-r, r + 1))
        y = int(rng.integers(-r, r + 1))
        offsets.append((x, y))
        wide.append(w)
    return offsets, wide, n


def sample_offsets(n_frames: int, lam: float, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Per-burst misalignments (x_i, y_i).

    One Poisson(lam) draw n fixes this burst's movedness; each non-reference
    frame then independently takes the [-16,16] range with probability n/N
    and the [-2,2] jitter range otherwise.  Frame 0 is always (0, 0).
    """
    return _sample_offsets_detailed(n_frames, lam, rng)[0]


@dataclass
class BurstSample:
    """One synthetic burst: clean truth, noisy frames, and what made them."""

    ground_truth: np.ndarray          # (H, W) in [0, 1]
    frames: np.ndarray                # (H, W, N), noisy, not clipped
    offsets: List[Tuple[int, int]]    # per frame (x, y); frame 0 is (0, 0)
    noise: NoiseParams
    noise_estimate: np.ndarray        # (H, W), from noisy frame 0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[2]

    def network_input(self) -> np.ndarray:
        """(H, W, N+1): frames in capture order, noise estimate appended."""
        return np.concatenate([self.frames, self.noise_estimate[:, :, None]], axis=2)


def make_burst(source: np.ndarray, n_frames: int, noise: NoiseParams,
               rng: np.random.Generator, patch_size: int = 128,
               lam: float = 1.5) -> BurstSample:
    """Cut a clean patch and its misaligned noisy burst out of source.

    The patch anchor keeps a margin of OFFSET_WIDE on every side so shifted
    crops stay inside the source.  Draw order (fixed for reproducibility):
    anchor row, anchor column, offsets, then per-frame noise.
    """
    h, w = source.shape
    margin = OFFSET_WIDE
    if h < patch_size + 2 * margin or w < patch_size + 2 * margin:
        raise ValueError(
            f"source {h}x{w} too small for {patch_size}x{patch_size} patches "
            f"with +-{margin} shifts")
    r0 = int(rng.integers(margin, h - patch_size - margin + 1))
    c0 = int(rng.integers(margin, w - patch_size - margin + 1))
    offsets = sample_offsets(n_frames, lam, rng)

    ground_truth = source[r0:r0 + patch_size, c0:c0 + patch_size].copy()
    frames = np.empty((patch_size, patch_size, n_frames))
    for i, (x, y) in enumerate(offsets):
        clean = source[r0 + y:r0 + y + patch_size, c0 + x:c0 + x + patch_size]
        frames[:, :, i] = add_noise(clean, noise, rng)
    noise_estimate = estimate_noise(frames[:, :, 0], noise)
    return BurstSample(ground_truth, frames, offsets, noise, noise_estimate)


class ProceduralCorpus:
    """Deterministic synthetic source images: gradients, blobs, boxes, grain.

    Stands in for a photo collection; image(i) is a pure function of
    (seed, i).  Sized so that default patches plus shift margins fit.
    """

    def __init__(self, seed: int = 0, size: int = 192):
        self.seed = seed
        self.size = size

    def image(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        n = self.size
        yy, xx = np.mgrid[0:n, 0:n] / n
        img = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy + rng.uniform(0, 1)
        for _ in range(int(rng.integers(2, 6))):
            cx, cy = rng.uniform(0, 1, 2)
            width = rng.uniform(0.03, 0.2)
            img += rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
        for _ in range(int(rng.integers(2, 6))):
            r0, c0 = rng.integers(0, n, 2)
            rh, cw = rng.integers(n // 16, n // 3, 2)
            img[r0:r0 + rh, c0:c0 + cw] += rng.uniform(-0.8, 0.8)
        grain = rng.standard_normal((n, n))
        k = 5  # box blur tames the grain into mid-frequency texture
        kernel = np.ones(k) / k
        grain = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, grain)
        grain = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, grain)
        img += 0.15 * grain
        lo, hi = img.min(), img.max()
        return (img - lo) / (hi - lo + 1e-12)


class DirectoryCorpus:
    """Grayscale images from a directory of PNG/PGM files, sorted by name."""

    def __init__(self, path):
        self.paths = sorted(p for p in Path(path).iterdir()
                            if p.suffix.lower() in (".png", ".pgm"))
        if not self.paths:
            raise ValueError(f"no PNG/PGM images under {path}")

    def __len__(self) -> int:
        return len(self.paths)

    def image(self, index: int) -> np.ndarray:
        return load_image(self.paths[index % len(self.paths)])


def burst_stream(corpus, n_frames: int, master_seed: int,
                 noise: Optional[NoiseParams] = None, patch_size: int = 128,
                 lam: float = 1.5, start_index: int = 0) -> Iterator[BurstSample]:
    """Endless deterministic sample stream; noise params drawn per burst
    when no fixed preset is given."""
    index = start_index
    while True:
        rng = np.random.default_rng([master_seed, index])
        params = noise if noise is not None else sample_noise_params(rng)
        source = corpus.image(index)
        yield make_burst(source, n_frames, params, rng, patch_size=patch_size, lam=lam)
        index += 1


# ---- image files -----------------------------------------------------------

def load_image(path) -> np.ndarray:
    """8- or 16-bit grayscale file -> float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr


def save_png(path, image: np.ndarray) -> None:
    """Clip to [0, 1] and write 8-bit grayscale.  Export-only clipping."""
    arr = np.clip(image, 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L").save(path)


# ---- stored samples and test sets -----------------------------------------

def save_sample(path, sample: BurstSample, sample_id: str, seed: int) -> None:
    meta = {
        "kind": "burst_sample",
        "sample_id": sample_id,
        "seed": seed,
        "sigma_r": sample.noise.sigma_r,
        "sigma_s": sample.noise.sigma_s,
    }
    save_tensors(path, meta, {
        "ground_truth": sample.ground_truth,
        "frames": sample.frames,
        "offsets": np.asarray(sample.offsets, dtype=np.int64),
        "noise_estimate": sample.noise_estimate,
    })


def load_sample(path) -> BurstSample:
    meta, tensors = load_tensors(path)
    if meta.get("kind") != "burst_sample":
        raise ValueError(f"{path}: not a stored burst sample")
    offsets = [(int(x), int(y)) for x, y in tensors["offsets"]]
    return BurstSample(
        ground_truth=tensors["ground_truth"],
        frames=tensors["frames"],
        offsets=offsets,
        noise=NoiseParams(meta["sigma_r"], meta["sigma_s"]),
        noise_estimate=tensors["noise_estimate"],
    )


def generate_testset(out_dir, gain: int, count: int, seed: int, n_frames: int = 8,
                     patch_size: int = 128, corpus=None, lam: float = 1.5) -> Path:
    """Write count stored samples plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    noise = gain_preset(gain)
    if corpus is None:
        corpus = ProceduralCorpus(seed=seed)
    lines = [f"# gain={gain} count={count} seed={seed} n_frames={n_frames} "
             f"patch_size={patch_size}"]
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        sample = make_burst(corpus.image(i), n_frames, noise, rng,
                            patch_size=patch_size, lam=lam)
        sample_id = f"sample_{i:05d}"
        save_sample(out / f"{sample_id}.mkpn", sample, sample_id, seed)
        lines.append(f"{sample_id} {seed}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(testset_dir) -> List[str]:
    """Sample IDs listed in a test-set directory's manifest."""
    manifest = Path(testset_dir) / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.txt under {testset_dir}")
    ids = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line.split()[0])
    return ids
