"""In-memory quality datasets with min-max label normalization."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class QualityDataset:
    """Images (N x C x H x W) with optional raw quality labels.

    ``label_range`` is the (low, high) pair used to map raw labels into
    [0, 1]; it defaults to the observed min/max.
    """

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    label_range: Optional[tuple[float, float]] = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError(f"dataset {self.name or '<unnamed>'} is empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("labels must be one scalar per image")
            if self.label_range is None:
                self.label_range = (float(self.labels.min()), float(self.labels.max()))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def normalize(self, raw) -> np.ndarray:
        lo, hi = self.label_range
        span = hi - lo if hi > lo else 1.0
        return (np.asarray(raw, dtype=np.float64) - lo) / span

    def denormalize(self, unit) -> np.ndarray:
        lo, hi = self.label_range
        span = hi - lo if hi > lo else 1.0
        return np.asarray(unit, dtype=np.float64) * span + lo

    @property
    def unit_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"dataset {self.name or '<unnamed>'} has no labels")
        return self.normalize(self.labels)

    def save(self, path) -> None:
        arrays = {"images": self.images}
        if self.labels is not None:
            arrays["labels"] = self.labels
            arrays["label_range"] = np.asarray(self.label_range, dtype=np.float64)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "QualityDataset":
        with np.load(path) as z:
            labels = z["labels"] if "labels" in z else None
            rng = tuple(z["label_range"]) if "label_range" in z else None
            return cls(z["images"], labels, rng, name=Path(path).stem)


IMAGE_SUFFIXES = (".ppm", ".png")


def load_target(path, input_size: int = 32, name: str = "") -> QualityDataset:
    """Load a dataset from a ``.npz`` file or a directory.

    A directory either holds ``dataset.npz`` or raster images (PPM/PNG) with
    an optional ``labels.csv`` of ``file,score`` rows.  Images go through the
    test-mode resize and center crop to ``input_size``.
    """
    from .pcproj import load_image, prepare_input

    path = Path(path)
    if path.is_file():
        return QualityDataset.load(path)
    if not path.is_dir():
        raise FileNotFoundError(f"no dataset at {path}")
    if (path / "dataset.npz").exists():
        return QualityDataset.load(path / "dataset.npz")

    scores = {}
    labels_csv = path / "labels.csv"
    if labels_csv.exists():
        with open(labels_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                scores[row["file"]] = float(row["score"])
        files = [path / f for f in scores]
    else:
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{path} contains no images")
    short = max(input_size, round(input_size * 256 / 224))
    images = np.stack([prepare_input(load_image(f), "test", short=short, side=input_size) for f in files])
    labels = np.array([scores[f.name] for f in files]) if scores else None
    return QualityDataset(images, labels, name=name or path.name)
