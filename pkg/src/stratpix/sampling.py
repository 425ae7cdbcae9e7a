"""Samplers over pixel lattices: naive, stratified, stratified-antithetic.

All three draw with replacement. Stratified samplers take a per-stratum
allocation (largest-remainder proportional by default) and consume one
independent counter-based random stream per stratum, so a trial's sample
is a pure function of (seed, trial) regardless of evaluation order.

The antithetic sampler pairs each draw with its mirror about the stratum
center: positions [d1, r(d1), d2, r(d2), ...], with one trailing unpaired
draw when the allocation is odd.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .ioutil import atomic_write_text
from .lattice import PixelLattice, Stratification
from .rng import TrialStream, uniforms_to_indices

SAMPLERS = ("ns", "sg", "sag")


@dataclass
class Allocation:
    """Per-stratum sample counts summing to the total budget n."""

    counts: np.ndarray
    method: str = "proportional"

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise InvalidInput("allocation counts must be a 1D nonnegative vector")

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def allocate_proportional(stratification: Stratification, n: int,
                          min_one: bool = True) -> Allocation:
    """Largest-remainder apportionment of n across strata.

    Each stratum gets floor(n * w_m); leftover units go to the largest
    fractional remainders, ties broken by lowest stratum index. With
    ``min_one`` (the default), empty quotas are topped up to 1 by taking
    units from the currently largest counts (ties by lowest index), so
    every stratum is represented. Requires n >= number of strata in that
    mode.
    """
    m = len(stratification)
    if n < 1:
        raise InvalidInput("sample budget n must be >= 1")
    if min_one and n < m:
        raise InvalidInput(f"n={n} cannot cover all {m} strata with min_one=True")

    quotas = n * stratification.weights
    counts = np.floor(quotas).astype(np.int64)
    frac = quotas - counts
    remaining = n - int(counts.sum())
    if remaining > 0:
        order = np.lexsort((np.arange(m), -frac))
        counts[order[:remaining]] += 1

    if min_one:
        while True:
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0:
                break
            donor = int(np.argmax(counts))  # argmax takes the lowest index on ties
            if counts[donor] < 2:
                raise InvalidInput("cannot guarantee one sample per stratum")
            counts[donor] -= 1
            counts[empty[0]] += 1
    return Allocation(counts=counts, method="proportional")


def smallest_exact_proportional_n(stratification: Stratification) -> int:
    """Least n for which n * w_m is an integer for every stratum."""
    total = stratification.lattice.size
    n = 1
    for size in stratification.sizes:
        step = total // np.gcd(int(size), total)
        n = int(np.lcm(n, step))
    return n


@dataclass
class SampleGroup:
    """Pixels drawn for one stratum (or the whole lattice for ns)."""

    stratum: int | None
    pixels: np.ndarray
    provenance: list[str]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64)
        if len(self.provenance) != self.pixels.size:
            raise InvalidInput("provenance must label every pixel")


@dataclass
class SampleSet:
    """One trial's sample: per-group pixels plus how each was obtained."""

    sampler: str
    seed: int
    trial: int
    groups: list[SampleGroup] = field(default_factory=list)

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise InvalidInput(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")

    @property
    def n(self) -> int:
        return int(sum(g.pixels.size for g in self.groups))

    def all_pixels(self) -> np.ndarray:
        if not self.groups:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([g.pixels for g in self.groups])

    def to_wire(self) -> list:
        """The on-disk form: a list of {stratum, pixels, provenance}."""
        return [
            {
                "stratum": g.stratum,
                "pixels": [int(p) for p in g.pixels],
                "provenance": list(g.provenance),
            }
            for g in self.groups
        ]

    @classmethod
    def from_wire(cls, wire: list, sampler: str | None = None,
                  seed: int = 0, trial: int = 0) -> "SampleSet":
        """Rebuild from the wire list; sampler is inferred when omitted.

        A reflect provenance flag implies sag; a null stratum implies ns;
        anything else reads back as sg (an all-odd sag sample carries no
        reflections and is estimator-equivalent to sg).
        """
        groups = [
            SampleGroup(
                stratum=g["stratum"],
                pixels=np.array(g["pixels"], dtype=np.int64),
                provenance=list(g["provenance"]),
            )
            for g in wire
        ]
        if sampler is None:
            if any(g.stratum is None for g in groups):
                sampler = "ns"
            elif any("reflect" in g.provenance for g in groups):
                sampler = "sag"
            else:
                sampler = "sg"
        return cls(sampler=sampler, seed=seed, trial=trial, groups=groups)


def save_sample_set(sample_set: SampleSet, path) -> Path:
    path = Path(path)
    atomic_write_text(path, json.dumps(sample_set.to_wire(), sort_keys=True, indent=2) + "\n")
    return path


def load_sample_set(path, sampler: str | None = None,
                    seed: int = 0, trial: int = 0) -> SampleSet:
    wire = json.loads(Path(path).read_text())
    return SampleSet.from_wire(wire, sampler=sampler, seed=seed, trial=trial)


def draws_per_trial(sampler: str, count: int) -> int:
    """Uniform draws one trial consumes for a group of ``count`` samples."""
    if sampler == "sag":
        return -(-count // 2)  # one draw per antithetic pair, plus odd leftover
    return count


def _check_allocation(stratification: Stratification, allocation: Allocation):
    if allocation.counts.size != len(stratification):
        raise InvalidInput("allocation length does not match stratification")
    if allocation.n < 1:
        raise InvalidInput("allocation assigns no samples")


def sample_ns(lattice: PixelLattice, n: int, seed: int, trial: int = 0) -> SampleSet:
    """n i.i.d. uniform pixels from the whole lattice."""
    if n < 1:
        raise InvalidInput("sample budget n must be >= 1")
    stream = TrialStream(seed, "ns", 0, n)
    pixels = uniforms_to_indices(stream.uniforms(trial), lattice.size)
    group = SampleGroup(stratum=None, pixels=pixels, provenance=["draw"] * n)
    return SampleSet(sampler="ns", seed=seed, trial=trial, groups=[group])


def sample_sg(stratification: Stratification, allocation: Allocation,
              seed: int, trial: int = 0) -> SampleSet:
    """n_m i.i.d. uniform members from each stratum."""
    _check_allocation(stratification, allocation)
    groups = []
    for stratum, n_m in zip(stratification.strata, allocation.counts):
        n_m = int(n_m)
        if n_m == 0:
            continue
        stream = TrialStream(seed, "sg", stratum.id, n_m)
        pos = uniforms_to_indices(stream.uniforms(trial), stratum.size)
        groups.append(SampleGroup(stratum=stratum.id, pixels=stratum.pixels[pos],
                                  provenance=["draw"] * n_m))
    return SampleSet(sampler="sg", seed=seed, trial=trial, groups=groups)


def sample_sag(stratification: Stratification, allocation: Allocation,
               seed: int, trial: int = 0) -> SampleSet:
    """Antithetic pairs per stratum: each draw plus its center mirror."""
    _check_allocation(stratification, allocation)
    groups = []
    for stratum, n_m in zip(stratification.strata, allocation.counts):
        n_m = int(n_m)
        if n_m == 0:
            continue
        draws = draws_per_trial("sag", n_m)
        stream = TrialStream(seed, "sag", stratum.id, draws)
        pos = uniforms_to_indices(stream.uniforms(trial), stratum.size)
        pairs = n_m // 2
        pixels = np.empty(n_m, dtype=np.int64)
        provenance = []
        refl = stratum.reflection_positions
        pixels[0 : 2 * pairs : 2] = stratum.pixels[pos[:pairs]]
        pixels[1 : 2 * pairs : 2] = stratum.pixels[refl[pos[:pairs]]]
        for _ in range(pairs):
            provenance += ["draw", "reflect"]
        if n_m % 2:
            pixels[-1] = stratum.pixels[pos[-1]]
            provenance.append("draw")
        groups.append(SampleGroup(stratum=stratum.id, pixels=pixels, provenance=provenance))
    return SampleSet(sampler="sag", seed=seed, trial=trial, groups=groups)


def draw_sample(sampler: str, lattice: PixelLattice, stratification: Stratification | None,
                allocation: Allocation | None, n: int, seed: int, trial: int = 0) -> SampleSet:
    """Uniform front door over the three samplers."""
    if sampler == "ns":
        return sample_ns(lattice, n, seed, trial)
    if stratification is None:
        raise InvalidInput(f"sampler {sampler!r} requires a stratification")
    if allocation is None:
        allocation = allocate_proportional(stratification, n)
    if sampler == "sg":
        return sample_sg(stratification, allocation, seed, trial)
    if sampler == "sag":
        return sample_sag(stratification, allocation, seed, trial)
    raise InvalidInput(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
