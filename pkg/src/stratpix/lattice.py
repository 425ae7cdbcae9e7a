"""Pixel lattices with class labels, and their grid/class stratifications.

A lattice is a dense 2D or 3D index space. Pixels are addressed by
row-major linear index everywhere; coordinate vectors are materialized
only where geometry needs them (stratum centers, reflections).

Stratifications partition the pixel set into disjoint strata. Three
schemes are supported: axis-aligned grid cells ("grid"), per-class
regions ("class"), and their nonempty intersections ("grid_class").
Each stratum knows its center (arithmetic mean of member coordinates)
and can reflect member pixels about that center; reflections that land
outside the stratum snap to the nearest member, ties broken by lowest
linear index.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .ioutil import atomic_write_text

SCHEMES = ("grid", "class", "grid_class")

# Strata at least this large use a KD-tree for snapped reflections
# instead of the chunked brute-force distance scan.
_BRUTE_FORCE_MAX = 2048


@dataclass
class PixelLattice:
    """A 2D/3D pixel grid with per-pixel class ids and optional payload.

    ``classes`` is a flat row-major int array of length prod(dims) with
    values in [0, num_classes). ``payload`` is optional per-pixel data,
    stored as a (N, d) float array.
    """

    dims: tuple[int, ...]
    classes: np.ndarray
    num_classes: int
    payload: np.ndarray | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) not in (2, 3) or any(d < 1 for d in self.dims):
            raise InvalidInput(f"dims must be 2 or 3 positive integers, got {self.dims}")
        self.classes = np.asarray(self.classes, dtype=np.int64).ravel()
        n = self.size
        if self.classes.shape != (n,):
            raise InvalidInput(f"expected {n} class entries, got {self.classes.shape}")
        if self.num_classes < 1:
            raise InvalidInput("num_classes must be >= 1")
        if self.classes.min(initial=0) < 0 or self.classes.max(initial=0) >= self.num_classes:
            raise InvalidInput("class ids must lie in [0, num_classes)")
        if self.payload is not None:
            p = np.asarray(self.payload, dtype=np.float64)
            if p.ndim == 1:
                p = p[:, None]
            if p.shape[0] != n:
                raise InvalidInput(f"payload rows ({p.shape[0]}) != pixel count ({n})")
            self.payload = p

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def coords(self, indices) -> np.ndarray:
        """Row-major linear indices -> integer coordinate rows."""
        return np.column_stack(np.unravel_index(np.asarray(indices, dtype=np.int64), self.dims))

    def all_pixels(self) -> np.ndarray:
        return np.arange(self.size, dtype=np.int64)


@dataclass
class Stratum:
    """One member of a stratification: pixel group, center, optional class.

    ``pixels`` is sorted ascending; ``center`` is the arithmetic mean of
    the member coordinates. ``dims`` ties the stratum to its lattice's
    coordinate system.
    """

    id: int
    pixels: np.ndarray
    center: np.ndarray
    dims: tuple[int, ...]
    class_id: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        if self.pixels.size == 0:
            raise InvalidInput("stratum must be nonempty")
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def size(self) -> int:
        return int(self.pixels.size)

    @cached_property
    def coords(self) -> np.ndarray:
        return np.column_stack(np.unravel_index(self.pixels, self.dims))

    @cached_property
    def _reflection_table(self) -> tuple[np.ndarray, np.ndarray]:
        return _build_reflection_table(self)

    @property
    def reflection_positions(self) -> np.ndarray:
        """Position (into ``pixels``) of each member's reflection."""
        return self._reflection_table[0]

    @property
    def reflection_exact(self) -> np.ndarray:
        """True where the mirrored coordinate is itself a member."""
        return self._reflection_table[1]

    def position_of(self, pixel: int) -> int:
        pos = int(np.searchsorted(self.pixels, pixel))
        if pos >= self.size or self.pixels[pos] != pixel:
            raise InvalidInput(f"pixel {pixel} is not in stratum {self.id}")
        return pos


@dataclass
class Stratification:
    """Disjoint strata covering the full pixel set of one lattice."""

    lattice: PixelLattice
    strata: list[Stratum]
    scheme: str

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidInput(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    def __len__(self) -> int:
        return len(self.strata)

    @cached_property
    def weights(self) -> np.ndarray:
        """w_m = |group m| / |all pixels|."""
        sizes = np.array([s.size for s in self.strata], dtype=np.float64)
        return sizes / self.lattice.size

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.strata], dtype=np.int64)

    def is_partition(self) -> bool:
        """Exact set check: strata are disjoint and cover every pixel."""
        cat = np.concatenate([s.pixels for s in self.strata])
        if cat.size != self.lattice.size:
            return False
        return bool(np.array_equal(np.sort(cat), self.lattice.all_pixels()))


def _cell_ranges(dims, cell_shape):
    for cell in cell_shape:
        if cell < 1:
            raise InvalidInput(f"cell extent must be >= 1, got {cell}")
    # Extents beyond the dimension just produce one full-width band.
    return [
        [(a, min(a + cell, dim)) for a in range(0, dim, cell)]
        for dim, cell in zip(dims, cell_shape)
    ]


def _cell_pixels(dims, bounds):
    axes = [np.arange(a, b, dtype=np.int64) for a, b in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.ravel_multi_index([m.ravel() for m in mesh], dims).astype(np.int64)


def build_grid_stratification(lattice: PixelLattice, cell_shape) -> Stratification:
    """Partition into axis-aligned cells; boundary cells may be smaller."""
    cell_shape = tuple(int(c) for c in cell_shape)
    if len(cell_shape) != lattice.ndim:
        raise InvalidInput("cell_shape length must match lattice dimensionality")
    strata = []
    for bounds in itertools.product(*_cell_ranges(lattice.dims, cell_shape)):
        pixels = _cell_pixels(lattice.dims, bounds)
        center = np.array([(a + b - 1) / 2.0 for a, b in bounds])
        strata.append(Stratum(id=len(strata), pixels=pixels, center=center, dims=lattice.dims))
    return Stratification(lattice=lattice, strata=strata, scheme="grid")


def build_class_stratification(lattice: PixelLattice) -> Stratification:
    """One stratum per class id present on the lattice."""
    strata = []
    for k in range(lattice.num_classes):
        pixels = np.flatnonzero(lattice.classes == k)
        if pixels.size == 0:
            continue
        coords = lattice.coords(pixels)
        strata.append(Stratum(id=len(strata), pixels=pixels, center=coords.mean(axis=0),
                              dims=lattice.dims, class_id=k))
    return Stratification(lattice=lattice, strata=strata, scheme="class")


def build_class_grid_stratification(lattice: PixelLattice, cell_shape) -> Stratification:
    """Nonempty intersections of grid cells with class regions, cell-major order."""
    cell_shape = tuple(int(c) for c in cell_shape)
    if len(cell_shape) != lattice.ndim:
        raise InvalidInput("cell_shape length must match lattice dimensionality")
    strata = []
    for bounds in itertools.product(*_cell_ranges(lattice.dims, cell_shape)):
        pixels = _cell_pixels(lattice.dims, bounds)
        cell_classes = lattice.classes[pixels]
        for k in np.unique(cell_classes):
            sub = pixels[cell_classes == k]
            coords = lattice.coords(sub)
            strata.append(Stratum(id=len(strata), pixels=sub, center=coords.mean(axis=0),
                                  dims=lattice.dims, class_id=int(k)))
    return Stratification(lattice=lattice, strata=strata, scheme="grid_class")


def build_stratification(lattice: PixelLattice, scheme: str, cell_shape=None) -> Stratification:
    if scheme == "grid":
        return build_grid_stratification(lattice, cell_shape)
    if scheme == "class":
        return build_class_stratification(lattice)
    if scheme == "grid_class":
        return build_class_grid_stratification(lattice, cell_shape)
    raise InvalidInput(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def _build_reflection_table(stratum: Stratum) -> tuple[np.ndarray, np.ndarray]:
    """Reflection position and exactness for every member pixel.

    The mirrored point of member p about the center c is 2c - p. Written
    over the common denominator S = |stratum|, its numerator is integer:
    t = 2 * sum(coords) - S * p, so the mirror is a lattice point exactly
    when S divides every component. All candidate/membership tests and the
    nearest-member tie-break run in exact integer arithmetic.
    """
    pixels = stratum.pixels
    coords = stratum.coords
    s = stratum.size
    dims = np.asarray(stratum.dims, dtype=np.int64)

    target_num = 2 * coords.sum(axis=0, dtype=np.int64)[None, :] - s * coords
    positions = np.full(s, -1, dtype=np.int64)

    on_lattice = (target_num % s == 0).all(axis=1)
    if on_lattice.any():
        cand = target_num[on_lattice] // s
        in_bounds = ((cand >= 0) & (cand < dims[None, :])).all(axis=1)
        rows = np.flatnonzero(on_lattice)[in_bounds]
        if rows.size:
            cand_lin = np.ravel_multi_index(cand[in_bounds].T, stratum.dims).astype(np.int64)
            pos = np.searchsorted(pixels, cand_lin)
            pos_clip = np.minimum(pos, s - 1)
            hit = pixels[pos_clip] == cand_lin
            positions[rows[hit]] = pos_clip[hit]

    exact = positions >= 0
    misses = np.flatnonzero(~exact)
    if misses.size:
        scaled = s * coords  # member coordinates on the same denominator as target_num
        if s <= _BRUTE_FORCE_MAX:
            chunk = max(1, (1 << 22) // s)
            for lo in range(0, misses.size, chunk):
                rows = misses[lo:lo + chunk]
                d2 = ((scaled[None, :, :] - target_num[rows][:, None, :]) ** 2).sum(axis=2)
                positions[rows] = d2.argmin(axis=1)  # first min = lowest linear index
        else:
            tree = cKDTree(coords.astype(np.float64))
            targets = target_num[misses] / s
            dist, _ = tree.query(targets)
            for row, t_float, t_num, d in zip(misses, targets, target_num[misses], dist):
                ball = tree.query_ball_point(t_float, r=d * (1 + 1e-9) + 1e-9)
                ball = np.sort(np.asarray(ball, dtype=np.int64))
                d2 = ((scaled[ball] - t_num[None, :]) ** 2).sum(axis=1)
                positions[row] = ball[d2.argmin()]
    return positions, exact


def reflect(stratum: Stratum, pixel: int) -> int:
    """Mirror a member pixel about the stratum center.

    Returns 2c - p when that lattice point is a member; otherwise the
    member nearest to it in Euclidean distance (ties by lowest linear
    index). Raises InvalidInput when ``pixel`` is not in the stratum.
    """
    pos = stratum.position_of(pixel)
    return int(stratum.pixels[stratum.reflection_positions[pos]])


# ---------------------------------------------------------------------------
# File format: a JSON header {dims, K} plus a row-major CSV with columns
# class, payload_0..payload_{d-1}.

def save_lattice(lattice: PixelLattice, json_path) -> tuple[Path, Path]:
    json_path = Path(json_path)
    csv_path = json_path.with_suffix(".csv")
    header = {"dims": list(lattice.dims), "K": lattice.num_classes}
    atomic_write_text(json_path, json.dumps(header, sort_keys=True) + "\n")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    d = 0 if lattice.payload is None else lattice.payload.shape[1]
    writer.writerow(["class"] + [f"payload_{j}" for j in range(d)])
    for i in range(lattice.size):
        row = [str(int(lattice.classes[i]))]
        if d:
            row += [repr(float(v)) for v in lattice.payload[i]]
        writer.writerow(row)
    atomic_write_text(csv_path, buf.getvalue())
    return json_path, csv_path


def load_lattice(json_path, csv_path=None) -> PixelLattice:
    json_path = Path(json_path)
    if csv_path is None:
        csv_path = json_path.with_suffix(".csv")
    header = json.loads(json_path.read_text())
    dims = tuple(header["dims"])
    num_classes = int(header["K"])

    classes, payload = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        rows = iter(reader)
        first = next(rows)
        if first and first[0] != "class":  # headerless files are accepted
            rows = itertools.chain([first], rows)
        for row in rows:
            classes.append(int(row[0]))
            if len(row) > 1:
                payload.append([float(v) for v in row[1:]])
    return PixelLattice(
        dims=dims,
        classes=np.array(classes, dtype=np.int64),
        num_classes=num_classes,
        payload=np.array(payload) if payload else None,
    )
