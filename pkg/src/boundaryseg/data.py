"""Synthetic blob segmentation data and the ``.bseg`` sample file format.

File layout (little-endian)::

    b"BSEG" | u32 version=1 | u32 H | u32 W | H*W float32 image | H*W u8 mask

A dataset is a directory of such files plus ``manifest.txt`` naming them one
per line.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

MAGIC = b"BSEG"
VERSION = 1
MAX_SIDE = 1 << 14
MANIFEST = "manifest.txt"
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A sample or checkpoint file that cannot be decoded."""


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] float64 in [0, 1], exactly representable as float32
    mask: np.ndarray  # [1, H, W] float64 in {0, 1}

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 1 or self.image.shape != self.mask.shape:
            raise ValueError(f"expected matching [1,H,W] image and mask, got {self.image.shape} / {self.mask.shape}")


@dataclass
class SynthConfig:
    size: int = 64
    blob_count_range: tuple = (1, 3)
    contrast: float = 0.6
    noise_sigma: float = 0.06
    boundary_jitter: float = 0.25
    seed: int = 0
    radius_range: tuple = (0.08, 0.18)  # fraction of the image side
    texture_sigma: float = 3.0  # smoothing length of background texture, pixels

    def __post_init__(self):
        if self.size < 4:
            raise ValueError("size must be at least 4")
        if self.noise_sigma < 0 or self.boundary_jitter < 0:
            raise ValueError("noise_sigma and boundary_jitter must be non-negative")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ValueError("blob_count_range must satisfy 1 <= lo <= hi")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Smooth random field rescaled to [0, 1]."""
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    span = field_.max() - field_.min()
    return (field_ - field_.min()) / span if span > 0 else np.zeros_like(field_)


def _blob(rng: np.random.Generator, cfg: SynthConfig, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    n = cfg.size
    lo, hi = cfg.radius_range
    a, b = rng.uniform(lo * n, hi * n, size=2)
    reach = max(a, b) * (1.0 + cfg.boundary_jitter)
    margin = min(reach, n / 2 - 1)
    cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    phi = np.arctan2(v, u)
    radius = np.ones_like(phi)
    # sinusoidal ameboid perturbation of the ellipse outline
    for k in (2, 3, 5):
        radius += cfg.boundary_jitter * rng.uniform(0.2, 1.0) / k ** 0.5 * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
    return np.hypot(u / a, v / b) <= radius


def generate_one(cfg: SynthConfig, index: int) -> Sample:
    """Sample ``index`` of the dataset defined by ``cfg`` (independent of the others)."""
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mask = np.zeros((n, n), dtype=bool)
    while not mask.any():
        for _ in range(rng.integers(cfg.blob_count_range[0], cfg.blob_count_range[1] + 1)):
            mask |= _blob(rng, cfg, yy, xx)

    background = 0.3 * _smooth_noise(rng, n, cfg.texture_sigma)
    foreground = 0.3 + cfg.contrast * 0.7 * (0.85 + 0.15 * _smooth_noise(rng, n, cfg.texture_sigma))
    image = np.where(mask, foreground, background)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Sample(image[None], mask[None].astype(np.float64))


def generate(cfg: SynthConfig, n: int) -> list:
    """``n`` samples; deterministic in ``cfg`` (each sample has its own seeded stream)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_one(cfg, i) for i in range(n)]


def stack(samples: Iterable[Sample]):
    """``(images, masks)`` as ``[N,1,H,W]`` arrays."""
    samples = list(samples)
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))


# ---------------------------------------------------------------------------
# raster I/O


def encode_sample(sample: Sample) -> bytes:
    _, h, w = sample.image.shape
    img32 = sample.image[0].astype("<f4")
    if not np.array_equal(img32.astype(np.float64), sample.image[0]):
        raise ValueError("image values are not exactly representable as float32")
    if not np.isin(sample.mask, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")
    return (_HEADER.pack(MAGIC, VERSION, h, w) + img32.tobytes()
            + sample.mask[0].astype(np.uint8).tobytes())


def decode_sample(buf: bytes) -> Sample:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    magic, version, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if not (1 <= h <= MAX_SIDE and 1 <= w <= MAX_SIDE):
        raise FormatError(f"dimensions {h}x{w} outside 1..{MAX_SIDE}")
    npx = h * w
    expected = _HEADER.size + 5 * npx
    if len(buf) < expected:
        raise FormatError(f"truncated payload: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    off = _HEADER.size
    image = np.frombuffer(buf, dtype="<f4", count=npx, offset=off).astype(np.float64).reshape(1, h, w)
    mask = np.frombuffer(buf, dtype=np.uint8, count=npx, offset=off + 4 * npx).reshape(1, h, w)
    if mask.max() > 1:
        raise FormatError("mask payload is not binary")
    return Sample(image, mask.astype(np.float64))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_sample(path, sample: Sample) -> None:
    _atomic_write(Path(path), encode_sample(sample))


def load_sample(path) -> Sample:
    return decode_sample(Path(path).read_bytes())


def save_dataset(directory, samples: Iterable[Sample]) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.bseg"
        save_sample(directory / name, s)
        names.append(name)
    _atomic_write(directory / MANIFEST, "".join(f"{n}\n" for n in names).encode())
    return names


def load_dataset(directory) -> list:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    return [load_sample(directory / n) for n in names]
