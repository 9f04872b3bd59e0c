"""Exposure map sampling for darkener training and model adaptation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STAGE1_RANGE = (0.0, 0.5)
STAGE2_RANGE = (0.0, 0.2)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_pixel: float = 0.01
    sigma_patch: float = 0.03
    patch_size: int = 8
    floor: float = 0.01

    def __post_init__(self):
        if min(self.sigma_pixel, self.sigma_patch, self.floor) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.floor > 1:
            raise ValueError("floor must be <= 1")


@dataclass
class ExposureMap:
    values: np.ndarray  # [H, W]
    kind: str = "constant"

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def constant(cls, level: float, h: int, w: int, dtype=np.float32) -> ExposureMap:
        return cls(np.full((h, w), level, dtype=dtype), "constant")


def sample_stage1(rng: np.random.Generator, h: int, w: int) -> ExposureMap:
    level = rng.uniform(*STAGE1_RANGE)
    return ExposureMap.constant(level, h, w)


def patch_noise(rng: np.random.Generator, h: int, w: int, sigma: float, patch: int) -> np.ndarray:
    """One Gaussian draw per ``patch x patch`` tile; edge tiles get their own draw."""
    th, tw = -(-h // patch), -(-w // patch)
    tiles = rng.normal(0.0, sigma, size=(th, tw))
    return np.repeat(np.repeat(tiles, patch, axis=0), patch, axis=1)[:h, :w]


def sample_stage2_parts(rng: np.random.Generator, h: int, w: int, noise: NoiseSpec = NoiseSpec()):
    """Return ``(base, z1, z2)`` before summation and clamping."""
    base = rng.uniform(*STAGE2_RANGE)
    z1 = rng.normal(0.0, noise.sigma_pixel, size=(h, w))
    z2 = patch_noise(rng, h, w, noise.sigma_patch, noise.patch_size)
    return base, z1, z2


def sample_stage2(rng: np.random.Generator, h: int, w: int, noise: NoiseSpec = NoiseSpec()) -> ExposureMap:
    base, z1, z2 = sample_stage2_parts(rng, h, w, noise)
    values = np.clip(base + z1 + z2, noise.floor, 1.0)
    return ExposureMap(values.astype(np.float32), "compound")


def stack(maps) -> np.ndarray:
    return np.stack([m.values for m in maps])
