"""Shared fixtures and small lattice builders used across the suite."""

import sys

import numpy as np
import pytest

from stratpix import PixelLattice, Stratification, Stratum


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines where capture cannot hide them."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None) if mod else None
    if lines:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria", sep="-")
        for line in lines:
            terminalreporter.write_line(line)


def make_lattice(dims, classes=None, num_classes=None, payload=None):
    dims = tuple(dims)
    n = int(np.prod(dims))
    if classes is None:
        classes = np.zeros(n, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64).ravel()
    if num_classes is None:
        num_classes = int(classes.max()) + 1
    return PixelLattice(dims=dims, classes=classes, num_classes=num_classes,
                        payload=payload)


def manual_stratification(lattice, groups, class_ids=None):
    """Build a Stratification from explicit pixel index groups."""
    strata = []
    for i, pixels in enumerate(groups):
        pixels = np.sort(np.asarray(pixels, dtype=np.int64))
        coords = np.column_stack(np.unravel_index(pixels, lattice.dims))
        center = coords.mean(axis=0)
        cid = None if class_ids is None else class_ids[i]
        strata.append(Stratum(id=i, pixels=pixels, center=center,
                              dims=lattice.dims, class_id=cid))
    return Stratification(lattice=lattice, strata=strata, scheme="class")


@pytest.fixture
def two_column_lattice():
    """2x2 lattice, classes by column, h = -1 on column 0 and +1 on column 1.

    With class strata and n=2 proportional: var_ns = 0.5, var_sg = 0,
    gap = 0.5.
    """
    classes = np.array([0, 1, 0, 1])
    payload = np.array([-1.0, 1.0, -1.0, 1.0])
    return make_lattice((2, 2), classes, payload=payload)


@pytest.fixture
def line_gap_lattice():
    """1x5 line; the stratum {0,1,3,4} has sigma2 = 2.5 and perfectly
    anticorrelated reflections (paired SAG variance zero)."""
    return make_lattice((1, 5), np.zeros(5), num_classes=1,
                        payload=np.arange(5, dtype=np.float64))


def random_lattice(rng, max_dim=6, num_classes=None, with_payload=True):
    dims = (int(rng.integers(1, max_dim + 1)), int(rng.integers(1, max_dim + 1)))
    n = dims[0] * dims[1]
    k = num_classes or int(rng.integers(1, min(4, n) + 1))
    classes = rng.integers(0, k, size=n)
    payload = rng.normal(size=n) if with_payload else None
    return make_lattice(dims, classes, num_classes=k, payload=payload)
