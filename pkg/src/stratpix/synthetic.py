"""Synthetic class-labeled lattices with long-tailed class frequencies.

A smooth radius field (concentric super-ellipse rings, optionally with
angular wobble for blob-like shapes) is thresholded at empirical
quantiles, so the requested class fractions are realized exactly up to
single-pixel rounding. Class K-1 is the rarest (the innermost core) and
class 0 the most common background; intermediate fractions double at
each step outward, giving the long-tailed profile.

Payload column 0 is a per-class intensity plus Gaussian noise; column 1
is its 3x3 local mean, giving the toy model a neighborhood statistic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import InvalidInput
from .lattice import PixelLattice, save_lattice
from .rng import _stream_key

FAMILIES = ("rings", "blobs")


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic lattice."""

    dims: tuple[int, ...] = (64, 64)
    num_classes: int = 4
    family: str = "rings"
    smallest_fraction: float = 0.02
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 2 or any(d < 2 for d in self.dims):
            raise InvalidInput("synthetic lattices are 2D with dims >= 2")
        if self.num_classes < 2:
            raise InvalidInput("num_classes must be >= 2 (background + rings)")
        if self.family not in FAMILIES:
            raise InvalidInput(f"family must be one of {FAMILIES}")
        if not 0 < self.smallest_fraction <= 1:
            raise InvalidInput("smallest_fraction must lie in (0, 1]")
        if self.noise < 0:
            raise InvalidInput("noise must be nonnegative")
        fr = class_fractions(self.num_classes, self.smallest_fraction)
        if self.num_classes > 1 and fr[0] < fr[1]:
            raise InvalidInput("smallest_fraction too large for a long tail")


def class_fractions(num_classes: int, smallest: float) -> np.ndarray:
    """Long-tailed target fractions: f_k = smallest * 2^(K-1-k) for k >= 1,
    background takes the rest."""
    if num_classes == 1:
        return np.array([1.0])
    tail = smallest * 2.0 ** np.arange(num_classes - 2, -1, -1)
    background = 1.0 - tail.sum()
    if background <= 0:
        raise InvalidInput("class fractions exceed 1; lower smallest_fraction")
    return np.concatenate([[background], tail])


def _radius_field(spec: SyntheticSpec) -> np.ndarray:
    rows, cols = spec.dims
    gen = np.random.Generator(np.random.Philox(key=_stream_key(spec.seed, "shape", 0)))
    cy = rows / 2 + gen.uniform(-rows / 8, rows / 8)
    cx = cols / 2 + gen.uniform(-cols / 8, cols / 8)
    a = rows / 2
    b = cols / 2
    p = gen.uniform(1.5, 3.0)  # super-ellipse exponent

    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r = ((np.abs(yy - cy) / a) ** p + (np.abs(xx - cx) / b) ** p) ** (1.0 / p)
    if spec.family == "blobs":
        theta = np.arctan2(yy - cy, xx - cx)
        lobes = gen.integers(2, 5)
        phase = gen.uniform(0, 2 * np.pi)
        r = r * (1.0 + 0.3 * np.sin(lobes * theta + phase))
    return r.ravel()


def generate_lattice(spec: SyntheticSpec) -> PixelLattice:
    """Build the class map and payload for a spec; deterministic per seed."""
    n = int(np.prod(spec.dims))
    fractions = class_fractions(spec.num_classes, spec.smallest_fraction)
    radius = _radius_field(spec)

    # Assign the innermost (smallest-radius) pixels to the rarest class,
    # working outward; stable sort makes ties deterministic.
    order = np.argsort(radius, kind="stable")
    counts = np.round(fractions * n).astype(np.int64)
    counts[0] = n - counts[1:].sum()  # background absorbs rounding
    classes = np.empty(n, dtype=np.int64)
    start = 0
    for k in range(spec.num_classes - 1, -1, -1):
        classes[order[start:start + counts[k]]] = k
        start += counts[k]

    gen = np.random.Generator(np.random.Philox(key=_stream_key(spec.seed, "payload", 0)))
    base = classes / max(spec.num_classes - 1, 1)
    intensity = base + spec.noise * gen.standard_normal(n)
    local_mean = uniform_filter(intensity.reshape(spec.dims), size=3,
                                mode="nearest").ravel()
    payload = np.column_stack([intensity, local_mean])
    return PixelLattice(dims=spec.dims, classes=classes,
                        num_classes=spec.num_classes, payload=payload)


def gen_data(spec: SyntheticSpec, json_path) -> tuple[Path, Path]:
    """Generate and write the lattice JSON/CSV pair; byte-stable per seed."""
    lattice = generate_lattice(spec)
    return save_lattice(lattice, json_path)


def realized_fractions(lattice: PixelLattice) -> np.ndarray:
    counts = np.bincount(lattice.classes, minlength=lattice.num_classes)
    return counts / lattice.size
