"""Procedural labelled datasets and the ``.dfsd`` dataset file format."""
from dataclasses import dataclass

import numpy as np

from . import container

DATASET_MAGIC = b"DFSD"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    value_range: tuple = (None, None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        lo, hi = self.value_range
        self.value_range = (None if lo is None else float(lo), None if hi is None else float(hi))
        if self.x.shape[0] != self.y.shape[0]:
            raise DatasetError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.x.shape[0]

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    @property
    def bounded(self):
        return self.value_range[0] is not None or self.value_range[1] is not None

    def clip(self, x):
        lo, hi = self.value_range
        if lo is None and hi is None:
            return x
        return np.clip(x, -np.inf if lo is None else lo, np.inf if hi is None else hi)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.value_range)


def train_test_split(ds, stride=5):
    """Deterministic 80/20 split: every ``stride``-th sample (offset stride-1) is test."""
    idx = np.arange(len(ds))
    test = idx % stride == stride - 1
    return ds.subset(idx[~test]), ds.subset(idx[test])


def gauss2d_centers(classes, radius=2.0):
    angles = 2.0 * np.pi * np.arange(classes) / classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_gauss2d(classes, per_class, spread, rng, radius=2.0):
    """``classes`` isotropic Gaussian clusters evenly spaced on a circle.

    Samples are stored class-major (all of class 0, then class 1, ...).
    """
    if classes < 2 or per_class < 1:
        raise DatasetError("need classes >= 2 and per_class >= 1")
    centers = gauss2d_centers(classes, radius)
    noise = rng.normal(size=(classes, per_class, 2))
    x = (centers[:, None, :] + spread * noise).reshape(-1, 2)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(x, y, classes, (None, None))


def pattern_templates():
    """Sixteen fixed 8x8 templates in [0, 1] (stripes, checkers, blobs, ...)."""
    r, c = np.mgrid[0:8, 0:8]
    blob = lambda cy, cx, s: np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2.0 * s * s))
    t = [
        (r % 2 == 0), (r % 2 == 1), (c % 2 == 0), (c % 2 == 1),
        ((r + c) % 2 == 0), ((r // 2 + c // 2) % 2 == 0),
        (r == c) | (r == c + 1), (r + c == 7) | (r + c == 8),
        blob(3.5, 3.5, 1.5), blob(1.5, 1.5, 1.2), blob(5.5, 5.5, 1.2),
        blob(1.5, 5.5, 1.2), blob(5.5, 1.5, 1.2),
        (np.abs(np.hypot(r - 3.5, c - 3.5) - 2.8) < 0.8),
        (r == 3) | (r == 4) | (c == 3) | (c == 4),
        (r < 4),
    ]
    return np.stack([np.asarray(a, dtype=np.float64) for a in t])


def make_patterns8x8(classes, per_class, noise, rng):
    """Single-channel 8x8 templates plus U(-noise, noise) noise, clamped to [0, 1]."""
    if not 2 <= classes <= 16 or per_class < 1:
        raise DatasetError("patterns8x8 needs 2 <= classes <= 16 and per_class >= 1")
    templates = pattern_templates()[:classes]
    x = np.repeat(templates, per_class, axis=0)[:, None, :, :]
    if noise > 0:
        x = x + rng.uniform(-noise, noise, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(x, y, classes, (0.0, 1.0))


def _parts(ds):
    meta = {"kind": "dataset", "num_classes": int(ds.num_classes),
            "value_range": list(ds.value_range)}
    return meta, [("x", ds.x), ("y", ds.y)]


def dataset_bytes(ds):
    meta, tensors = _parts(ds)
    return container.encode(DATASET_MAGIC, meta, tensors)


def save_dataset(path, ds):
    meta, tensors = _parts(ds)
    container.write(path, DATASET_MAGIC, meta, tensors)


def load_dataset(path):
    header, tensors = container.read(path, DATASET_MAGIC)
    return _from_container(header, tensors)


def loads_dataset(blob):
    header, tensors = container.decode(DATASET_MAGIC, blob)
    return _from_container(header, tensors)


def _from_container(header, tensors):
    if header.get("kind") != "dataset" or "x" not in tensors or "y" not in tensors:
        raise container.ContainerError("not a dataset file")
    if tensors["x"].shape[0] == 0:
        raise DatasetError("dataset file holds no samples (N = 0)")
    return Dataset(tensors["x"], tensors["y"], header["num_classes"],
                   tuple(header["value_range"]))
