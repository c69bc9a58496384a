"""Seeded synthetic segmentation corpus.

Each sample paints geometric regions (ellipses, rectangles, 3-pixel-thin
bands) onto a background, in increasing class order so that later classes
overwrite earlier ones. Pixel intensities are drawn per class from
``N((c + 0.5) / K, 0.08)`` plus white noise and clamped to [0, 1].

Profiles:

``imbalanced``
    a few large blobs, smaller blobs (the two smallest nested inside the two
    largest) and thin bands covering ~1.2% of the image each; background
    covers well over half of every image.
``balanced``
    concentric rectangles, each class covering ~1/K of the image.
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor import TensorFormatError, read_tensor, write_tensor

PROFILES = ("imbalanced", "balanced")
MANIFEST_VERSION = 1
CLASS_SIGMA = 0.08
NOISE_SIGMA = 0.03
THIN_FRACTION = 0.012
BLOB_TOTAL = 0.35
BAND_HALF_WIDTH = 1.5
SIZE_MULTIPLE = 16


class DataConfigError(ValueError):
    pass


class DatasetError(OSError):
    pass


@dataclass(frozen=True)
class ClassShape:
    label: int
    kind: str  # "ellipse" | "rect" | "band"
    fraction: float  # expected share of image pixels after painting
    parent: int = 0  # class the shape is nested in; 0 = free placement


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32
    label: np.ndarray  # (H, W) int64
    split: str
    image_path: str
    label_path: str


def class_layout(num_classes, profile):
    if profile not in PROFILES:
        raise DataConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    k = num_classes
    if profile == "balanced":
        return [ClassShape(c, "rect", 1.0 / k, parent=c - 1 if c > 1 else 0)
                for c in range(1, k)]
    n_thin = max(1, (k - 1) // 4)
    n_blob = k - 1 - n_thin
    raw = 0.8 ** np.arange(n_blob)
    blob = BLOB_TOTAL * raw / raw.sum() if n_blob else raw
    parents = {}
    if n_blob >= 4:
        parents = {n_blob: 1, n_blob - 1: 2}
    shapes = [ClassShape(c, "ellipse" if c % 2 else "rect", float(blob[c - 1]),
                         parents.get(c, 0)) for c in range(1, n_blob + 1)]
    shapes += [ClassShape(c, "band", THIN_FRACTION) for c in range(n_blob + 1, k)]
    return shapes


def target_fractions(num_classes, profile):
    """Expected pixel share of every class (index 0 = background)."""
    f = np.zeros(num_classes)
    for s in class_layout(num_classes, profile):
        f[s.label] = s.fraction
    f[0] = 1.0 - f[1:].sum()
    return f


def class_means(num_classes):
    return (np.arange(num_classes) + 0.5) / num_classes


# -- rasterisation -----------------------------------------------------------


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def _ellipse(h, w, cy, cx, a, b, theta):
    yy, xx = _grid(h, w)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def _rect(h, w, cy, cx, half_h, half_w):
    yy, xx = _grid(h, w)
    return (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)


def _band(h, w, cy, cx, length, theta):
    yy, xx = _grid(h, w)
    half = length / 2
    p0 = np.array([cy - half * np.sin(theta), cx - half * np.cos(theta)])
    d = np.array([np.sin(theta), np.cos(theta)])
    rel_y, rel_x = yy - p0[0], xx - p0[1]
    t = np.clip(rel_y * d[0] + rel_x * d[1], 0, length)
    dist2 = (rel_y - t * d[0]) ** 2 + (rel_x - t * d[1]) ** 2
    return dist2 <= BAND_HALF_WIDTH ** 2


def _draw_shape(rng, shape, area, h, w, region):
    """Return a candidate mask for ``shape`` of roughly ``area`` pixels inside ``region``.

    ``region`` is (y0, y1, x0, x1), the box the shape's extent must fit in.
    """
    y0, y1, x0, x1 = region
    bh, bw = y1 - y0, x1 - x0
    if shape.kind == "band":
        length = max((area - np.pi * BAND_HALF_WIDTH ** 2) / (2 * BAND_HALF_WIDTH), 2.0)
        length = min(length, 0.9 * min(bh, bw))
        theta = rng.uniform(0, np.pi)
        ext_y = abs(np.sin(theta)) * length / 2 + BAND_HALF_WIDTH
        ext_x = abs(np.cos(theta)) * length / 2 + BAND_HALF_WIDTH
        cy = rng.uniform(y0 + ext_y, max(y1 - ext_y, y0 + ext_y))
        cx = rng.uniform(x0 + ext_x, max(x1 - ext_x, x0 + ext_x))
        return _band(h, w, cy, cx, length, theta)
    aspect = rng.uniform(0.7, 1.4)
    if shape.kind == "ellipse":
        a = np.sqrt(area / np.pi * aspect)
        b = area / (np.pi * a)
        a, b = min(a, bw / 2 - 0.5), min(b, bh / 2 - 0.5)
        theta = rng.uniform(-0.3, 0.3)
        ext_x, ext_y = a, b
        cy = rng.uniform(y0 + ext_y, max(y1 - ext_y, y0 + ext_y))
        cx = rng.uniform(x0 + ext_x, max(x1 - ext_x, x0 + ext_x))
        return _ellipse(h, w, cy, cx, a, b, theta)
    half_w = min(np.sqrt(area * aspect) / 2, bw / 2 - 0.5)
    half_h = min(area / (4 * half_w), bh / 2 - 0.5)
    cy = rng.uniform(y0 + half_h, max(y1 - half_h, y0 + half_h))
    cx = rng.uniform(x0 + half_w, max(x1 - half_w, x0 + half_w))
    return _rect(h, w, cy, cx, half_h, half_w)


def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def render_sample(rng, height, width, num_classes, profile, tries=60):
    """Paint one (image, label) pair."""
    shapes = class_layout(num_classes, profile)
    label = np.zeros((height, width), dtype=np.int64)
    masks = {}
    occupied = np.zeros((height, width), dtype=bool)
    nested_extra = {}
    for s in shapes:
        if s.parent and profile == "imbalanced":
            nested_extra[s.parent] = nested_extra.get(s.parent, 0.0) + s.fraction
    full = (0, height, 0, width)
    for s in shapes:
        frac = s.fraction + nested_extra.get(s.label, 0.0)
        if profile == "balanced":
            frac = (num_classes - s.label) / num_classes
        area = frac * height * width * rng.uniform(0.85, 1.15)
        if s.parent and s.parent in masks:
            parent = masks[s.parent]
            region = _bbox(parent)
            for _ in range(tries):
                m = _draw_shape(rng, s, area, height, width, region)
                if m.any() and not (m & ~parent).any():
                    break
            m &= parent
        else:
            for _ in range(tries):
                m = _draw_shape(rng, s, area, height, width, full)
                if not (m & _dilate(occupied)).any():
                    break
        masks[s.label] = m
        occupied |= m
        label[m] = s.label
    means = class_means(num_classes).astype(np.float32)
    image = means[label] + CLASS_SIGMA * rng.standard_normal(label.shape) \
        + NOISE_SIGMA * rng.standard_normal(label.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image[None], label


# -- corpus I/O --------------------------------------------------------------


def split_counts(n_samples, val_fraction=1 / 6, test_fraction=1 / 6):
    n_val = int(round(n_samples * val_fraction))
    n_test = int(round(n_samples * test_fraction))
    return n_samples - n_val - n_test, n_val, n_test


def generate_dataset(out_dir, seed, n_samples, height, width, num_classes,
                     profile="imbalanced", val_fraction=1 / 6, test_fraction=1 / 6):
    """Write ``image_%05d.tns`` / ``label_%05d.tns`` pairs and ``manifest.json``.

    Samples are assigned to train, val, test in index order. Returns the
    manifest path.
    """
    if height % SIZE_MULTIPLE or width % SIZE_MULTIPLE:
        raise DataConfigError(
            f"height and width must be divisible by {SIZE_MULTIPLE}, got {height}x{width}")
    if num_classes < 2:
        raise DataConfigError("num_classes must be at least 2 (class 0 is background)")
    if n_samples < 1:
        raise DataConfigError("n_samples must be positive")
    class_layout(num_classes, profile)
    n_train, n_val, _ = split_counts(n_samples, val_fraction, test_fraction)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        image, label = render_sample(rng, height, width, num_classes, profile)
        img_name, lbl_name = f"image_{i:05d}.tns", f"label_{i:05d}.tns"
        write_tensor(image, os.path.join(out_dir, img_name))
        write_tensor(label.astype(np.float32), os.path.join(out_dir, lbl_name))
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append({"image": img_name, "label": lbl_name, "split": split})
    manifest = {"version": MANIFEST_VERSION, "seed": seed, "num_classes": num_classes,
                "height": height, "width": width, "profile": profile, "entries": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return path


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest {path} is not valid JSON: {e}") from e
    for key in ("version", "num_classes", "entries"):
        if key not in manifest:
            raise DatasetError(f"manifest {path} lacks {key!r}")
    return manifest


def load_dataset(manifest_path, split=None):
    """Yield :class:`Sample` objects in manifest order, optionally for one split."""
    manifest = read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    k = manifest["num_classes"]
    for entry in manifest["entries"]:
        if split is not None and entry["split"] != split:
            continue
        img_path = os.path.join(root, entry["image"])
        lbl_path = os.path.join(root, entry["label"])
        image = _load(img_path)
        label = _load(lbl_path)
        if image.ndim == 2:
            image = image[None]
        if image.ndim != 3 or image.shape[0] != 1:
            raise DatasetError(f"{img_path}: expected a (1, H, W) image, got {image.shape}")
        if label.ndim == 3 and label.shape[0] == 1:
            label = label[0]
        if label.shape != image.shape[1:]:
            raise DatasetError(
                f"{lbl_path}: label shape {label.shape} does not match image {image.shape[1:]}")
        ids = label.astype(np.int64)
        if (ids != label).any() or ids.min() < 0 or ids.max() >= k:
            raise DatasetError(f"{lbl_path}: label ids must be integers in [0, {k})")
        yield Sample(image, ids, entry["split"], img_path, lbl_path)


def _load(path):
    try:
        return read_tensor(path)
    except FileNotFoundError as e:
        raise DatasetError(f"missing sample file: {path}") from e
    except TensorFormatError as e:
        raise DatasetError(f"{path}: {e}") from e


def load_split_arrays(manifest_path, split):
    """Stack one split into ``(X, y)`` with X (N, 1, H, W) and y (N, H, W)."""
    samples = list(load_dataset(manifest_path, split))
    if not samples:
        return (np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros((0, 1, 1), dtype=np.int64))
    return (np.stack([s.image for s in samples]), np.stack([s.label for s in samples]))


def class_frequencies(manifest_path, split=None):
    """Per-class frequencies (see :func:`median_frequency_weights`) and raw pixel counts."""
    from .losses import class_pixel_stats, frequencies_from_stats

    manifest = read_manifest(manifest_path)
    labels = [s.label for s in load_dataset(manifest_path, split)]
    if not labels:
        raise DataConfigError(f"split {split!r} is empty")
    counts, present = class_pixel_stats(labels, manifest["num_classes"])
    return frequencies_from_stats(counts, present), counts
