"""Exhaustive enumeration oracle vs analytic mean/variance formulas.

Every lattice with at most 6 pixels, every class labeling in the sweep,
every total budget n <= 3: the exact outcome-space mean and variance of
each sampler must match the analytic formulas to 1e-12.
"""

import numpy as np
import pytest

from stratpix import (PixelFunction, allocate_proportional, analytic_mean,
                      analytic_variance, build_stratification, estimate)
from stratpix.sampling import Allocation

from conftest import make_lattice
from oracles import (all_small_shapes, enumerate_mean_var,
                     iter_outcome_sample_sets, small_case_assignments)


def _check_case(lattice, strat, alloc, fn, spot_check=False):
    for sampler in ("ns", "sg", "sag"):
        mean, var = enumerate_mean_var(lattice, strat, alloc, fn, sampler)
        got_mean = analytic_mean(strat, fn, alloc, sampler)
        got_var = analytic_variance(strat, fn, alloc, sampler)
        scale = max(abs(mean), abs(var), 1.0)
        assert abs(got_mean - mean) <= 1e-12 * scale, (sampler, "mean")
        assert abs(got_var - var) <= 1e-12 * scale, (sampler, "var")
        if spot_check:
            h = fn.values
            for ss in iter_outcome_sample_sets(lattice, strat, alloc, sampler,
                                               limit=3):
                val = estimate(ss, fn, strat if sampler != "ns" else None)
                # Recompute the estimator definition independently.
                if sampler == "ns":
                    ref = float(np.mean(h[ss.all_pixels()]))
                else:
                    ref = 0.0
                    for g, stratum in zip(ss.groups, strat.strata):
                        w = stratum.size / lattice.size
                        ref += w * float(np.mean(h[np.asarray(g.pixels)]))
                assert val == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_enumeration_all_small_lattices():
    rng = np.random.default_rng(2024)
    checked = 0
    for shape in all_small_shapes(6):
        for classes in small_case_assignments(shape, rng):
            k = int(classes.max()) + 1
            payload = rng.normal(size=classes.size)
            lat = make_lattice(shape, classes, num_classes=k, payload=payload)
            strat = build_stratification(lat, "class")
            fn = PixelFunction.from_payload(lat)
            m = len(strat.strata)
            for n in range(m, 4):
                alloc = allocate_proportional(strat, n)
                _check_case(lat, strat, alloc, fn,
                            spot_check=(checked % 37 == 0))
                checked += 1
    assert checked > 500


def test_enumeration_grid_strata():
    rng = np.random.default_rng(7)
    for shape in ((2, 2), (2, 3), (3, 2)):
        lat = make_lattice(shape, np.zeros(shape[0] * shape[1]),
                           payload=rng.normal(size=shape[0] * shape[1]))
        strat = build_stratification(lat, "grid", (2, 2))
        fn = PixelFunction.from_payload(lat)
        m = len(strat.strata)
        for n in range(m, 4):
            if n < m:
                continue
            alloc = allocate_proportional(strat, n)
            _check_case(lat, strat, alloc, fn, spot_check=True)


def test_enumeration_with_tied_values():
    # Integer-valued h with ties exercises ordering-sensitive paths.
    lat = make_lattice((2, 3), np.array([0, 1, 0, 1, 0, 1]),
                       payload=np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0]))
    strat = build_stratification(lat, "class")
    fn = PixelFunction.from_payload(lat)
    for n in (2, 3):
        _check_case(lat, strat, allocate_proportional(strat, n), fn,
                    spot_check=True)


def test_enumeration_snapped_reflections():
    # L-shaped class stratum: reflection snaps, SAG is biased, and the
    # analytic mean/variance must still match enumeration exactly.
    lat = make_lattice((2, 2), np.array([0, 0, 0, 1]),
                       payload=np.array([0.0, 1.0, 2.0, 5.0]))
    strat = build_stratification(lat, "class")
    fn = PixelFunction.from_payload(lat)
    alloc = Allocation(counts=np.array([2, 1]), method="manual")
    _check_case(lat, strat, alloc, fn, spot_check=True)
    mean_sag = analytic_mean(strat, fn, alloc, "sag")
    oracle_mean, _ = enumerate_mean_var(lat, strat, alloc, fn, "sag")
    assert mean_sag == pytest.approx(oracle_mean, rel=1e-12)


def test_enumeration_manual_uneven_allocation():
    lat = make_lattice((1, 6), np.array([0, 0, 0, 0, 1, 1]),
                       payload=np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0]))
    strat = build_stratification(lat, "class")
    fn = PixelFunction.from_payload(lat)
    for counts in ([1, 2], [2, 1], [3, 1], [1, 1]):
        alloc = Allocation(counts=np.array(counts), method="manual")
        if alloc.n > 4:
            continue
        _check_case(lat, strat, alloc, fn, spot_check=True)
