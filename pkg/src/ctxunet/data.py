"""Dataset ingestion, synthetic data generation, and deterministic splits.

A Sample pairs a rank-4 image tensor (1, c, h, w) scaled to [0, 1] with a
target of the same spatial size: an integer label map for segmentation or a
real-valued density map (whose integral is the object count) for counting.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

DENSITY_SIGMA_DEFAULT = 3.0


@dataclass
class Sample:
    image: np.ndarray      # (1, c, h, w) float, values in [0, 1]
    target: np.ndarray     # (1, 1, h, w): integer labels or float density
    id: str
    dots: list | None = None    # (x, y) annotations backing a density target

    def __post_init__(self):
        if self.image.ndim != 4 or self.target.ndim != 4:
            raise DataError(f"sample {self.id}: image and target must be rank-4")
        if self.image.shape[2:] != self.target.shape[2:]:
            raise DataError(
                f"sample {self.id}: image {self.image.shape} and target "
                f"{self.target.shape} spatial shapes differ"
            )

    @property
    def is_density(self):
        return np.issubdtype(self.target.dtype, np.floating)


@dataclass
class SplitSpec:
    """Disjoint train/val/test index assignment by counts.

    shuffle=False takes consecutive ranges in dataset order (the first
    `train` samples, the following `val`, the next `test`); shuffle=True
    permutes indices with the supplied rng first.
    """

    train: int
    val: int
    test: int
    shuffle: bool = False

    def validate(self, n):
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"split count {name} must be >= 0")
        if self.train + self.val + self.test > n:
            raise ConfigError(
                f"split {self.train}/{self.val}/{self.test} exceeds dataset size {n}"
            )

    def indices(self, n, rng=None):
        self.validate(n)
        order = np.arange(n)
        if self.shuffle:
            if rng is None:
                raise ConfigError("shuffled split requires an rng")
            order = rng.permutation(n)
        a, b = self.train, self.train + self.val
        c = b + self.test
        return list(order[:a]), list(order[a:b]), list(order[b:c])


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list


def split_dataset(samples, spec, rng=None):
    tr, va, te = spec.indices(len(samples), rng)
    return DatasetSplits(train=[samples[i] for i in tr],
                         val=[samples[i] for i in va],
                         test=[samples[i] for i in te])


# ---------------------------------------------------------------- image IO

def load_image(path):
    """Load an 8- or 16-bit grayscale/RGB PNG or TIFF as (1, c, h, w) in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("P", "LA", "RGBA"):
                im = im.convert("RGB" if mode != "LA" else "L")
                mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if mode == "L":
        scaled = arr.astype(np.float32) / 255.0
        scaled = scaled[None, None]
    elif mode in ("I;16", "I;16B", "I"):
        scaled = arr.astype(np.float32) / 65535.0
        scaled = scaled[None, None]
    elif mode == "RGB":
        scaled = arr.astype(np.float32) / 255.0
        scaled = scaled.transpose(2, 0, 1)[None]
    else:
        raise DataError(f"unsupported image mode {mode!r} in {path}")
    return scaled


def save_image_u8(path, plane):
    """Write a 2-d float array in [0, 1] (or uint8) as an 8-bit PNG."""
    plane = np.asarray(plane)
    if plane.dtype != np.uint8:
        plane = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(plane, mode="L").save(path)


def save_image_u16(path, plane):
    """Write a 2-d uint16 array as a 16-bit grayscale PNG."""
    plane = np.asarray(plane, dtype=np.uint16)
    Image.fromarray(plane).save(path)


# ------------------------------------------------------------- annotations

def load_dots_csv(path):
    """Read dot annotations: one "x,y" pair per line, 0-indexed, header optional."""
    dots = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'x,y', got {line!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                if lineno == 1:
                    continue        # header line
                raise DataError(f"{path}:{lineno}: non-numeric dot {line!r}")
            dots.append((x, y))
    return dots


def save_dots_csv(path, dots):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y\n")
        for x, y in dots:
            fh.write(f"{x:.4f},{y:.4f}\n")


def density_from_dots(dots, h, w, sigma=DENSITY_SIGMA_DEFAULT):
    """Sum of per-dot 2-d Gaussians, each renormalized to unit mass after
    boundary truncation, so total mass equals the dot count.

    dots are (x, y) pairs, x being the column. Returns (1, 1, h, w) float64.
    """
    if sigma <= 0:
        raise DataError(f"sigma must be > 0, got {sigma}")
    out = np.zeros((h, w), dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in dots:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"dot ({x}, {y}) outside {w}x{h} image")
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) * inv)
        out += g / g.sum()
    return out[None, None]


# ---------------------------------------------------------- synthetic data

def synth_counting_set(n_images, count_range, rng, size=64,
                       density_sigma=DENSITY_SIGMA_DEFAULT):
    """Images of Gaussian blobs with Poisson-like noise, plus dot annotations.

    Deterministic per rng. Blob count per image is uniform over
    [count_range[0], count_range[1]].
    """
    lo, hi = int(count_range[0]), int(count_range[1])
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad blob count range ({lo}, {hi})")
    samples = []
    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    for i in range(n_images):
        k = int(rng.integers(lo, hi + 1))
        dots = []
        img = np.zeros((size, size), dtype=np.float64)
        margin = 4.0
        for _ in range(k):
            for _attempt in range(50):
                x = rng.uniform(margin, size - margin)
                y = rng.uniform(margin, size - margin)
                if all((x - dx) ** 2 + (y - dy) ** 2 >= 9.0 for dx, dy in dots):
                    break
            dots.append((x, y))
            amp = rng.uniform(0.6, 1.0)
            bs = rng.uniform(1.2, 2.2)
            img += amp * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * bs * bs))
        img = 0.06 + 0.9 * np.clip(img, 0.0, 1.0)
        peak = 80.0
        img = rng.poisson(img * peak).astype(np.float64) / peak
        img = np.clip(img, 0.0, 1.0)
        target = density_from_dots(dots, size, size, sigma=density_sigma)
        samples.append(Sample(image=img.astype(np.float32)[None, None],
                              target=target,
                              id=f"img_{i:04d}",
                              dots=dots))
    return samples


def synth_segmentation_set(n_images, rng, size=64):
    """Binary-label images: random curvilinear boundaries on textured background."""
    from scipy.ndimage import gaussian_filter

    samples = []
    coord = np.arange(size, dtype=np.float64)
    for i in range(n_images):
        n_waves = 3
        center = np.full(size, size / 2.0)
        for _ in range(n_waves):
            amp = rng.uniform(2.0, size / 5.0)
            freq = rng.uniform(0.5, 2.0) * 2.0 * np.pi / size
            phase = rng.uniform(0.0, 2.0 * np.pi)
            center += amp * np.sin(freq * coord + phase)
        center = np.clip(center, 3, size - 4)
        thickness = rng.uniform(1.2, 2.2)

        rows = coord[:, None]
        dist = np.abs(rows - center[None, :])
        label = (dist <= thickness).astype(np.int64)
        if rng.uniform() < 0.5:                 # half the curves run vertically
            label = label.T
        texture = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 3.0)
        texture = 0.45 + 0.25 * texture / (np.abs(texture).max() + 1e-9)
        img = texture + 0.4 * label
        img += rng.normal(0.0, 0.03, (size, size))
        img = np.clip(img, 0.0, 1.0)
        samples.append(Sample(image=img.astype(np.float32)[None, None],
                              target=label[None, None],
                              id=f"img_{i:04d}"))
    return samples


# -------------------------------------------------------- dataset directories

def write_dataset(samples, root, task):
    """Write samples to root/images plus root/dots (count) or root/labels (segment)."""
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    ann_dir = os.path.join(root, "dots" if task == "count" else "labels")
    os.makedirs(ann_dir, exist_ok=True)
    for s in samples:
        save_image_u8(os.path.join(img_dir, f"{s.id}.png"), s.image[0, 0])
        if task == "count":
            if s.dots is None:
                raise DataError(f"sample {s.id} carries no dot annotations")
            save_dots_csv(os.path.join(ann_dir, f"{s.id}.csv"), s.dots)
        else:
            save_image_u8(os.path.join(ann_dir, f"{s.id}.png"),
                          s.target[0, 0].astype(np.uint8))


def load_dataset(root, task, density_sigma=DENSITY_SIGMA_DEFAULT):
    """Load a dataset directory written by write_dataset (or hand-assembled)."""
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise DataError(f"no images/ directory under {root}")
    samples = []
    for name in sorted(os.listdir(img_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".tif", ".tiff"):
            continue
        image = load_image(os.path.join(img_dir, name))
        h, w = image.shape[2:]
        dots = None
        if task == "count":
            dots = load_dots_csv(os.path.join(root, "dots", stem + ".csv"))
            target = density_from_dots(dots, h, w, sigma=density_sigma)
        elif task == "segment":
            label_img = Image.open(os.path.join(root, "labels", stem + ".png"))
            target = np.asarray(label_img).astype(np.int64)[None, None]
        else:
            raise ConfigError(f"unknown task {task!r}")
        samples.append(Sample(image=image, target=target, id=stem, dots=dots))
    return samples
