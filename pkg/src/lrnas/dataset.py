"""Seeded procedural image dataset used in place of a real image corpus.

Ten classes of anti-aliased patterns on 3x16x16 images. Foreground and
background colours are drawn per image, independent of the class, so the
class is carried by shape alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArtifactError

CLASSES = (
    "disk",
    "square",
    "cross",
    "ring",
    "hstripes",
    "vstripes",
    "hgradient",
    "vgradient",
    "corner-wedge",
    "corner-bracket",
)
SIZE = 16
SUPERSAMPLE = 4
TRAIN_PER_CLASS = 800
VAL_PER_CLASS = 200
FEW_SAMPLE = 100


@dataclass
class ImageSet:
    """Images (N, C, H, W) float32 with optional int labels and free-form metadata."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return ImageSet(self.images[idx], None if self.labels is None else self.labels[idx], dict(self.meta))


@dataclass
class ProceduralDataset:
    seed: int
    train: ImageSet
    val: ImageSet
    few_index: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def few(self):
        return self.train.subset(self.few_index)


def _masks(labels, rng):
    """Coverage in [0, 1] of the foreground for each image, rendered at 4x and box-filtered."""
    n = len(labels)
    s = SIZE * SUPERSAMPLE
    coords = (np.arange(s) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((n, SIZE, SIZE), dtype=np.float64)
    cx = 8 + rng.uniform(-2.5, 2.5, n)
    cy = 8 + rng.uniform(-2.5, 2.5, n)
    radius = rng.uniform(3.0, 5.5, n)
    period = rng.uniform(3.5, 6.0, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    flip = rng.integers(0, 2, n).astype(bool)
    corner = rng.integers(0, 4, n)
    reach = rng.uniform(7.0, 10.0, n)
    for i, lab in enumerate(labels):
        dx, dy = xx - cx[i], yy - cy[i]
        r = radius[i]
        if lab == 0:
            m = np.hypot(dx, dy) < r
        elif lab == 1:
            m = np.maximum(np.abs(dx), np.abs(dy)) < 0.85 * r
        elif lab == 2:
            w = 0.3 * r
            m = ((np.abs(dx) < w) & (np.abs(dy) < r)) | ((np.abs(dy) < w) & (np.abs(dx) < r))
        elif lab == 3:
            d = np.hypot(dx, dy)
            m = (d < r) & (d > 0.55 * r)
        elif lab in (4, 5):
            axis = yy if lab == 4 else xx
            m = np.sin(2 * np.pi * axis / period[i] + phase[i]) > 0
        elif lab in (6, 7):
            axis = xx if lab == 6 else yy
            ramp = np.clip((axis - 1.0) / (SIZE - 2.0), 0, 1)
            m = 1 - ramp if flip[i] else ramp
        else:
            px = xx if corner[i] % 2 == 0 else SIZE - xx
            py = yy if corner[i] < 2 else SIZE - yy
            if lab == 8:
                m = px + py < reach[i]
            else:
                w = 2.5
                m = ((px < w) & (py < reach[i])) | ((py < w) & (px < reach[i]))
        m = np.asarray(m, dtype=np.float64)
        out[i] = m.reshape(SIZE, SUPERSAMPLE, SIZE, SUPERSAMPLE).mean(axis=(1, 3))
    return out


def _colors(n, rng, min_contrast=0.4):
    fg = rng.uniform(0, 1, (n, 3))
    bg = rng.uniform(0, 1, (n, 3))
    bad = np.linalg.norm(fg - bg, axis=1) < min_contrast
    while bad.any():
        fg[bad] = rng.uniform(0, 1, (bad.sum(), 3))
        bg[bad] = rng.uniform(0, 1, (bad.sum(), 3))
        bad = np.linalg.norm(fg - bg, axis=1) < min_contrast
    return fg, bg


def render(labels, rng, noise=0.15):
    """Raw (unstandardised) images for ``labels``."""
    labels = np.asarray(labels)
    m = _masks(labels, rng)[:, None]
    fg, bg = _colors(len(labels), rng)
    img = bg[:, :, None, None] * (1 - m) + fg[:, :, None, None] * m
    img += rng.normal(0, noise, img.shape)
    return img.astype(np.float32)


def generate_dataset(seed=0):
    """Balanced 8000/2000 train/validation splits plus a 100-image few-sample subset of train."""
    rng = np.random.default_rng(seed)
    k = len(CLASSES)
    train_y = rng.permutation(np.repeat(np.arange(k), TRAIN_PER_CLASS))
    val_y = rng.permutation(np.repeat(np.arange(k), VAL_PER_CLASS))
    train_x = render(train_y, rng)
    val_x = render(val_y, rng)
    mean = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = train_x.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)

    def norm(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)

    per_class = FEW_SAMPLE // k
    few = np.sort(np.concatenate(
        [rng.choice(np.flatnonzero(train_y == c), per_class, replace=False) for c in range(k)]
    ))
    meta = {"seed": seed}
    return ProceduralDataset(
        seed,
        ImageSet(norm(train_x), train_y.astype(np.int32), dict(meta, split="train")),
        ImageSet(norm(val_x), val_y.astype(np.int32), dict(meta, split="val")),
        few,
        mean,
        std,
    )


# ---------------------------------------------------------------------------
# files


def save_image_set(image_set, path):
    """Manifest JSON at ``path`` plus a ``.bin`` blob: float32 images, then int32 labels if any."""
    path = Path(path)
    images = np.ascontiguousarray(image_set.images, dtype="<f4")
    chunks = [images.tobytes()]
    manifest = {
        "format": "lrnas-images",
        "version": 1,
        "count": int(images.shape[0]),
        "shape": list(images.shape[1:]),
        "images": {"offset": 0, "dtype": "<f4"},
        "meta": image_set.meta,
        "blob": path.with_suffix(".bin").name,
    }
    if image_set.labels is not None:
        labels = np.ascontiguousarray(image_set.labels, dtype="<i4")
        manifest["labels"] = {"offset": images.nbytes, "dtype": "<i4"}
        chunks.append(labels.tobytes())
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_image_set(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(path, "image manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(path, f"image manifest is not JSON ({exc})") from None
    if manifest.get("format") != "lrnas-images":
        raise ArtifactError(path, "not an image-set manifest")
    blob_path = path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(blob_path, "image blob not found") from None
    n, shape = int(manifest["count"]), tuple(manifest["shape"])
    size = n * int(np.prod(shape))
    expected = 4 * size + (4 * n if "labels" in manifest else 0)
    if len(blob) != expected:
        raise ArtifactError(blob_path, f"blob holds {len(blob)} bytes, manifest implies {expected}")
    images = np.frombuffer(blob, dtype="<f4", count=size).reshape((n,) + shape).astype(np.float32)
    labels = None
    if "labels" in manifest:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=int(manifest["labels"]["offset"])).astype(np.int32)
    return ImageSet(images, labels, manifest.get("meta", {}))


def save_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image_set(ds.train, directory / "train.json")
    save_image_set(ds.val, directory / "val.json")
    save_image_set(ds.few, directory / "few.json")
    info = {
        "format": "lrnas-dataset",
        "seed": ds.seed,
        "classes": list(CLASSES),
        "mean": [float(v) for v in ds.mean],
        "std": [float(v) for v in ds.std],
        "few_index": [int(i) for i in ds.few_index],
    }
    (directory / "dataset.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def load_dataset(directory):
    directory = Path(directory)
    try:
        info = json.loads((directory / "dataset.json").read_text())
    except FileNotFoundError:
        raise ArtifactError(directory / "dataset.json", "dataset index not found") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(directory / "dataset.json", f"dataset index is not JSON ({exc})") from None
    train = load_image_set(directory / "train.json")
    val = load_image_set(directory / "val.json")
    return ProceduralDataset(
        int(info["seed"]),
        train,
        val,
        np.asarray(info["few_index"], dtype=np.int64),
        np.asarray(info["mean"], dtype=np.float32),
        np.asarray(info["std"], dtype=np.float32),
    )
