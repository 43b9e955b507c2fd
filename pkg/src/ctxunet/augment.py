"""Data augmentation: flips, right-angle rotations, and elastic deformation.

Image and target always receive the same sampled transform. Label maps are
warped nearest-neighbor, density maps bilinearly and then renormalized so
the total mass (the object count) is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .data import Sample


@dataclass
class ElasticSpec:
    grid_spacing: int = 12      # control-point spacing, px
    sigma: float = 2.5          # displacement std, px


@dataclass
class AugmentationSpec:
    flip_horizontal: bool = True
    flip_vertical: bool = True
    rotate90: bool = True
    elastic: ElasticSpec | None = None

    @property
    def any_enabled(self):
        return (self.flip_horizontal or self.flip_vertical or self.rotate90
                or self.elastic is not None)

    def to_dict(self):
        return {
            "flip_horizontal": self.flip_horizontal,
            "flip_vertical": self.flip_vertical,
            "rotate90": self.rotate90,
            "elastic": None if self.elastic is None else {
                "grid_spacing": self.elastic.grid_spacing,
                "sigma": self.elastic.sigma,
            },
        }

    @classmethod
    def from_dict(cls, d):
        el = d.get("elastic")
        return cls(
            flip_horizontal=bool(d.get("flip_horizontal", True)),
            flip_vertical=bool(d.get("flip_vertical", True)),
            rotate90=bool(d.get("rotate90", True)),
            elastic=None if not el else ElasticSpec(
                grid_spacing=int(el.get("grid_spacing", 12)),
                sigma=float(el.get("sigma", 2.5)),
            ),
        )


def _transform(sample, image_fn, target_fn):
    image = np.ascontiguousarray(image_fn(sample.image))
    target = np.ascontiguousarray(target_fn(sample.target))
    return Sample(image=image, target=target, id=sample.id, dots=None)


def flip_horizontal(sample):
    """Mirror left-right; an involution."""
    return _transform(sample, lambda a: a[:, :, :, ::-1], lambda a: a[:, :, :, ::-1])


def flip_vertical(sample):
    """Mirror top-bottom; an involution."""
    return _transform(sample, lambda a: a[:, :, ::-1, :], lambda a: a[:, :, ::-1, :])


def rotate90(sample, k=1):
    """Rotate by k quarter turns counterclockwise."""
    rot = lambda a: np.rot90(a, k=k, axes=(2, 3))
    return _transform(sample, rot, rot)


def _displacement_field(h, w, spec, rng):
    """Random smooth displacement: coarse normal draws, bilinearly upsampled."""
    gh = max(2, h // spec.grid_spacing + 1)
    gw = max(2, w // spec.grid_spacing + 1)
    coarse = rng.normal(0.0, spec.sigma, size=(2, gh, gw))
    ri = np.linspace(0.0, gh - 1.0, h)
    ci = np.linspace(0.0, gw - 1.0, w)
    grid = np.meshgrid(ri, ci, indexing="ij")
    dy = map_coordinates(coarse[0], grid, order=1, mode="reflect")
    dx = map_coordinates(coarse[1], grid, order=1, mode="reflect")
    return dy, dx


def elastic_warp(sample, spec, rng):
    """Elastic deformation by a smooth random displacement field.

    Images and density maps are sampled bilinearly, labels nearest-neighbor.
    Density mass is renormalized to its pre-warp total.
    """
    h, w = sample.image.shape[2:]
    dy, dx = _displacement_field(h, w, spec, rng)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    coords = [rows + dy, cols + dx]

    def warp(plane, order):
        return map_coordinates(plane, coords, order=order, mode="reflect")

    image = np.stack([warp(ch, 1) for ch in sample.image[0]])[None]
    image = image.astype(sample.image.dtype)
    if sample.is_density:
        target = warp(sample.target[0, 0].astype(np.float64), 1)
        before = float(sample.target.sum())
        after = float(target.sum())
        if after > 0.0:
            target *= before / after
        target = target[None, None].astype(sample.target.dtype)
    else:
        target = warp(sample.target[0, 0], 0)[None, None].astype(sample.target.dtype)
    return Sample(image=image, target=target, id=sample.id, dots=None)


def augment(sample, spec, rng):
    """Apply one randomly sampled transform combination from spec."""
    if spec is None or not spec.any_enabled:
        return sample
    out = sample
    if spec.flip_horizontal and rng.uniform() < 0.5:
        out = flip_horizontal(out)
    if spec.flip_vertical and rng.uniform() < 0.5:
        out = flip_vertical(out)
    if spec.rotate90:
        k = int(rng.integers(0, 4))
        if k:
            out = rotate90(out, k=k)
    if spec.elastic is not None:
        out = elastic_warp(out, spec.elastic, rng)
    return out
