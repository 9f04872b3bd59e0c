"""Dataset manifests and batch loading."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ppm import load_image

SPLITS = ("train", "val", "test_day", "test_night")
IMAGE_SUFFIXES = (".ppm",)


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int]]
    class_names: list[str]
    split: str = "train"
    _cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        k = len(self.class_names)
        for rel, label in self.entries:
            if not 0 <= label < k:
                raise ManifestError(f"{rel}: label {label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def serialize(self) -> str:
        lines = ["#classes: " + ",".join(self.class_names)]
        lines += [f"{rel}\t{label}" for rel, label in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, root, split: str = "train", check_paths: bool = True) -> DatasetManifest:
        lines = text.split("\n")
        if not lines or not lines[0].startswith("#classes:"):
            raise ManifestError("manifest must start with a '#classes:' header line")
        names = [n.strip() for n in lines[0][len("#classes:"):].split(",") if n.strip()]
        entries = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError(f"line {lineno}: expected 'path<TAB>label'")
            try:
                label = int(parts[1])
            except ValueError:
                raise ManifestError(f"line {lineno}: label {parts[1]!r} is not an integer") from None
            entries.append((parts[0], label))
        manifest = cls(Path(root), entries, names, split)
        if check_paths:
            missing = [rel for rel, _ in entries if not (manifest.root / rel).is_file()]
            if missing:
                raise ManifestError(f"{len(missing)} listed files are missing, e.g. {missing[0]}")
        return manifest

    @classmethod
    def load(cls, path: str | os.PathLike, root=None, split: str | None = None) -> DatasetManifest:
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        split = split or path.stem
        return cls.parse(path.read_text(encoding="utf-8"), root or path.parent, split)

    # -- image access ---------------------------------------------------------
    def image(self, index: int) -> np.ndarray:
        if self._cache is not None:
            return self._cache[index]
        return load_image(self.root / self.entries[index][0])

    def preload(self) -> DatasetManifest:
        """Decode every image once and keep the stack in memory."""
        if self._cache is None and self.entries:
            self._cache = np.stack([load_image(self.root / rel) for rel, _ in self.entries])
        return self


def manifest_from_class_folders(root: str | os.PathLike, split: str, class_names: list[str] | None = None,
                                suffixes=IMAGE_SUFFIXES) -> DatasetManifest:
    """Index a ``root/split/<class>/<image>`` tree (CODaN-style layout)."""
    root = Path(root)
    base = root / split
    if not base.is_dir():
        raise ManifestError(f"split directory not found: {base}")
    names = class_names or sorted(p.name for p in base.iterdir() if p.is_dir())
    entries = []
    for label, name in enumerate(names):
        for f in sorted((base / name).iterdir()):
            if f.suffix.lower() in suffixes:
                entries.append((f.relative_to(root).as_posix(), label))
    return DatasetManifest(root, entries, list(names), split)


def load_batch(manifest: DatasetManifest, indices, augment: bool = False,
               rng: np.random.Generator | None = None, crop_pad: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Stack the requested entries as ``[N, C, H, W]`` plus their labels.

    With ``augment`` each image gets a random horizontal flip and a random
    crop from a zero-padded copy.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = len(manifest)
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"batch index out of range for manifest of size {n}")
    if manifest._cache is not None:
        images = manifest._cache[indices].copy()
    else:
        images = np.stack([manifest.image(i) for i in indices])
    labels = np.array([manifest.entries[i][1] for i in indices], dtype=np.int64)
    if augment:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        images = _augment(images, rng, crop_pad)
    return images, labels


def _augment(images: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    images[flips] = images[flips, :, :, ::-1]
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        images = np.stack([padded[i, :, y:y + h, x:x + w] for i, (y, x) in enumerate(offs)])
    return images


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches covering every index exactly once."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
