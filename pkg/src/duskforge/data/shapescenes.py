"""Procedural day/night classification scenes.

Each class is a shape archetype drawn in a random colour over a smooth,
lightly textured background. Night versions go through gamma compression, a
warm colour cast with dimming, random local light blobs and sensor-like
noise; the noise and blobs put them outside the darkener's curve family.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest
from .ppm import save_image

CLASS_NAMES = ["circle", "square", "triangle", "diamond", "plus",
               "saltire", "ring", "frame", "bar", "arrow"]
SUPERSAMPLE = 4


@dataclass
class ShapeSceneSpec:
    num_classes: int = 10
    image_size: int = 32
    train_per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 30
    radius: tuple[float, float] = (0.24, 0.36)  # fraction of image size
    jitter: float = 0.12
    background_level: tuple[float, float] = (0.5, 0.8)
    texture_amplitude: float = 0.06
    min_contrast: float = 0.25
    gamma: tuple[float, float] = (2.0, 4.0)
    exposure: tuple[float, float] = (0.04, 0.10)  # mean level after gamma and cast
    warm_cast: tuple[float, float] = (0.0, 0.35)
    noise_sigma: tuple[float, float] = (0.02, 0.05)
    max_blobs: int = 2
    blob_amplitude: tuple[float, float] = (0.1, 0.25)

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float, angle: float) -> np.ndarray:
    """Boolean mask on centred coordinates (u right, v down), radius ``r``."""
    c, s = np.cos(angle), np.sin(angle)
    x, y = c * u + s * v, -s * u + c * v
    ax, ay = np.abs(x), np.abs(y)
    t = 0.32 * r
    if kind == "circle":
        return x * x + y * y < r * r
    if kind == "square":
        return np.maximum(ax, ay) < 0.85 * r
    if kind == "triangle":
        return (y < 0.7 * r) & (y > -r + 1.7 * ax)
    if kind == "diamond":
        return ax + ay < r
    if kind == "plus":
        return ((ax < t) & (ay < r)) | ((ay < t) & (ax < r))
    if kind == "saltire":
        d1, d2 = np.abs(x - y) / np.sqrt(2), np.abs(x + y) / np.sqrt(2)
        return ((d1 < t) | (d2 < t)) & (np.maximum(ax, ay) < 0.8 * r)
    if kind == "ring":
        rr = x * x + y * y
        return (rr < r * r) & (rr > (0.55 * r) ** 2)
    if kind == "frame":
        m = np.maximum(ax, ay)
        return (m < 0.85 * r) & (m > 0.5 * r)
    if kind == "bar":
        return (ax < r) & (ay < 0.3 * r)
    if kind == "arrow":
        head = (x > 0) & (x < r) & (ay < r - x)
        shaft = (x <= 0) & (x > -r) & (ay < 0.3 * r)
        return head | shaft
    raise ValueError(kind)


def _luma(rgb: np.ndarray) -> float:
    return float(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])


def render_day(label: int, rng: np.random.Generator, spec: ShapeSceneSpec) -> np.ndarray:
    n = spec.image_size
    big = n * SUPERSAMPLE
    coords = (np.arange(big) + 0.5) / SUPERSAMPLE
    u, v = np.meshgrid(coords, coords)
    cx, cy = n / 2 + rng.uniform(-spec.jitter, spec.jitter, size=2) * n
    r = rng.uniform(*spec.radius) * n
    angle = rng.uniform(-np.pi / 8, np.pi / 8) if CLASS_NAMES[label] != "arrow" else rng.uniform(0, 2 * np.pi)
    mask = _shape_mask(CLASS_NAMES[label], u - cx, v - cy, r, angle)
    cover = mask.reshape(n, SUPERSAMPLE, n, SUPERSAMPLE).mean(axis=(1, 3))

    # background: tinted level + linear gradient + low-frequency texture
    level = rng.uniform(*spec.background_level)
    tint = rng.uniform(-0.08, 0.08, size=3)
    gy, gx = np.meshgrid(np.linspace(-0.5, 0.5, n), np.linspace(-0.5, 0.5, n), indexing="ij")
    slope = rng.uniform(-0.15, 0.15, size=2)
    coarse = rng.normal(0, 1, size=(3, 4, 4))
    texture = np.kron(coarse, np.ones((n // 4, n // 4)))[:, :n, :n] if n % 4 == 0 else 0.0
    bg = level + tint[:, None, None] + slope[0] * gx + slope[1] * gy + spec.texture_amplitude * texture

    while True:
        fg = rng.uniform(0.0, 1.0, size=3)
        if abs(_luma(fg) - level) >= spec.min_contrast:
            break
    img = bg * (1 - cover) + fg[:, None, None] * cover
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_night(day: np.ndarray, rng: np.random.Generator, spec: ShapeSceneSpec) -> np.ndarray:
    """Gamma, then colour cast and dimming, then light blobs, then noise, then clamp.

    Dimming rescales the image so its mean hits a sampled exposure level.
    """
    _, h, w = day.shape
    img = day.astype(np.float64) ** rng.uniform(*spec.gamma)
    warm = rng.uniform(*spec.warm_cast)
    img = img * np.array([1.0, 1.0 - 0.5 * warm, 1.0 - warm])[:, None, None]
    # dim to a sampled scene exposure
    img = img * (rng.uniform(*spec.exposure) / max(img.mean(), 1e-6))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(0, spec.max_blobs + 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.06, 0.14) * h
        amp = rng.uniform(*spec.blob_amplitude)
        colour = np.array([1.0, rng.uniform(0.7, 0.95), rng.uniform(0.3, 0.7)])
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        img = img + amp * colour[:, None, None] * blob
    img = img + rng.normal(0.0, rng.uniform(*spec.noise_sigma), size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_seed(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, ["train", "val", "test_day", "test_night"].index(split)])


def render_split(spec: ShapeSceneSpec, seed: int, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Render a class-balanced split in memory; returns ``(images, labels)``."""
    per_class = {"train": spec.train_per_class, "val": spec.val_per_class}.get(split, spec.test_per_class)
    rng = _split_seed(seed, split)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    images = []
    for label in labels:
        img = render_day(int(label), rng, spec)
        if split == "test_night":
            img = render_night(img, rng, spec)
        images.append(img)
    return np.stack(images), labels


def generate_shapescenes(spec: ShapeSceneSpec, seed: int, out_root: str | os.PathLike) -> dict[str, DatasetManifest]:
    """Write the four splits as PPM files plus one manifest per split."""
    out_root = Path(out_root)
    names = CLASS_NAMES[:spec.num_classes]
    manifests = {}
    for split in ("train", "val", "test_day", "test_night"):
        images, labels = render_split(spec, seed, split)
        entries = []
        counters = [0] * spec.num_classes
        for img, label in zip(images, labels):
            rel = f"{split}/{names[label]}/{counters[label]:05d}.ppm"
            counters[label] += 1
            save_image(img, out_root / rel)
            entries.append((rel, int(label)))
        manifest = DatasetManifest(out_root, entries, list(names), split)
        manifest.save(out_root / f"{split}.manifest")
        manifests[split] = manifest
    return manifests
