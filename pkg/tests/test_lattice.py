"""Lattice construction, stratification schemes, reflections, round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratpix import (InvalidInput, PixelLattice, build_stratification,
                      load_lattice, reflect, save_lattice)
from stratpix.lattice import (build_class_grid_stratification,
                              build_class_stratification,
                              build_grid_stratification)

from conftest import make_lattice, manual_stratification


def test_lattice_validation():
    with pytest.raises(InvalidInput):
        make_lattice((4,), np.zeros(4))  # 1D not allowed
    with pytest.raises(InvalidInput):
        make_lattice((2, 2), np.array([0, 0, 0, 5]), num_classes=2)
    with pytest.raises(InvalidInput):
        make_lattice((2, 2), np.zeros(3))
    with pytest.raises(InvalidInput):
        PixelLattice(dims=(2, 2), classes=np.zeros(4), num_classes=0)


def test_coords_row_major():
    lat = make_lattice((2, 3), np.zeros(6))
    np.testing.assert_array_equal(lat.coords([0, 1, 3, 5]),
                                  [[0, 0], [0, 1], [1, 0], [1, 2]])


def test_grid_stratification_5x4_cells_2x2():
    # Frozen fixture: a 5x4 lattice cut into 2x2 cells gives 6 strata
    # with sizes {4, 4, 4, 4, 2, 2} (the last row is a half-height band).
    lat = make_lattice((5, 4), np.zeros(20))
    strat = build_grid_stratification(lat, (2, 2))
    assert len(strat.strata) == 6
    assert sorted(s.size for s in strat.strata) == [2, 2, 4, 4, 4, 4]
    assert strat.is_partition()
    # First cell is rows 0-1, cols 0-1 -> linear indices 0,1,4,5.
    np.testing.assert_array_equal(strat.strata[0].pixels, [0, 1, 4, 5])
    np.testing.assert_allclose(strat.strata[0].center, [0.5, 0.5])


def test_class_stratification_partitions_by_label():
    classes = np.array([0, 1, 1, 0, 2, 2])
    lat = make_lattice((2, 3), classes)
    strat = build_class_stratification(lat)
    assert [s.class_id for s in strat.strata] == [0, 1, 2]
    np.testing.assert_array_equal(strat.strata[0].pixels, [0, 3])
    np.testing.assert_array_equal(strat.strata[2].pixels, [4, 5])
    assert strat.is_partition()


def test_class_grid_stratification_cell_major():
    classes = np.array([0, 1,
                        0, 0])
    lat = make_lattice((2, 2), classes)
    strat = build_class_grid_stratification(lat, (2, 1))
    # Cells are columns; within each cell classes are sorted.
    assert [(s.class_id, list(s.pixels)) for s in strat.strata] == [
        (0, [0, 2]), (0, [3]), (1, [1])]
    assert strat.is_partition()


def test_build_stratification_dispatch():
    lat = make_lattice((4, 4), np.arange(16) % 2, num_classes=2)
    for scheme in ("grid", "class", "grid_class"):
        strat = build_stratification(lat, scheme, (2, 2))
        assert strat.scheme == scheme
        assert strat.is_partition()
    with pytest.raises(InvalidInput):
        build_stratification(lat, "voronoi", (2, 2))


def test_weights_sum_to_one():
    lat = make_lattice((5, 4), np.zeros(20))
    strat = build_grid_stratification(lat, (2, 2))
    assert strat.weights.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(strat.sizes, [s.size for s in strat.strata])


def test_reflection_exact_even_interval():
    # {0,1,3,4} on a line: center 2.0, all reflections exact members.
    lat = make_lattice((1, 5), np.zeros(5))
    strat = manual_stratification(lat, [[0, 1, 3, 4]])
    s = strat.strata[0]
    np.testing.assert_array_equal(s.reflection_positions, [3, 2, 1, 0])
    assert s.reflection_exact.all()
    assert reflect(s, 0) == 4 and reflect(s, 1) == 3


def test_reflection_snaps_L_shape():
    # L-shaped stratum {(0,0),(0,1),(1,0)} in a 2x2 lattice.
    # Center (1/3, 1/3); mirroring (0,1) gives (2/3, -1/3) which is not a
    # member, so it snaps to the nearest member by squared distance:
    # d2 to (0,0) = 5/9, to (0,1) = 20/9, to (1,0) = 2/9 -> (1,0).
    lat = make_lattice((2, 2), np.zeros(4))
    strat = manual_stratification(lat, [[0, 1, 2]])
    s = strat.strata[0]
    assert reflect(s, 1) == 2
    assert not s.reflection_exact[s.position_of(1)]
    # (0,0) mirrors to (2/3, 2/3): d2 to members = 8/9, 5/9, 5/9 -> tie
    # between (0,1) and (1,0), broken toward the lowest linear index.
    assert reflect(s, 0) == 1


def test_reflection_singleton_is_self():
    lat = make_lattice((2, 2), np.zeros(4))
    strat = manual_stratification(lat, [[3]])
    assert reflect(strat.strata[0], 3) == 3


def test_reflection_involution_on_exact_sets():
    # On a full rectangle every reflection is exact and an involution.
    lat = make_lattice((4, 6), np.zeros(24))
    strat = build_grid_stratification(lat, (2, 3))
    for s in strat.strata:
        pos = s.reflection_positions
        assert s.reflection_exact.all()
        np.testing.assert_array_equal(pos[pos], np.arange(s.size))


def test_reflection_table_brute_force_vs_kdtree():
    # The KD-tree path (large strata) must agree with the brute-force
    # scan; build one stratum both ways by monkeypatching the cutoff.
    import stratpix.lattice as mod
    rng = np.random.default_rng(0)
    pixels = np.sort(rng.choice(80 * 80, size=3000, replace=False))
    lat = make_lattice((80, 80), np.zeros(6400))
    strat = manual_stratification(lat, [pixels])
    s = strat.strata[0]
    kd_pos = np.array(s.reflection_positions)
    old = mod._BRUTE_FORCE_MAX
    try:
        mod._BRUTE_FORCE_MAX = 10 ** 9
        brute = mod._build_reflection_table(s)
    finally:
        mod._BRUTE_FORCE_MAX = old
    np.testing.assert_array_equal(kd_pos, brute[0])
    np.testing.assert_array_equal(s.reflection_exact, brute[1])


def test_3d_lattice_and_reflection():
    lat = make_lattice((2, 2, 2), np.zeros(8))
    strat = build_grid_stratification(lat, (2, 2, 2))
    s = strat.strata[0]
    assert s.size == 8
    assert s.reflection_exact.all()
    assert reflect(s, 0) == 7  # (0,0,0) -> (1,1,1)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    lat = make_lattice((4, 5), rng.integers(0, 3, 20), num_classes=3,
                       payload=rng.normal(size=(20, 2)))
    jp, cp = save_lattice(lat, tmp_path / "lat.json")
    back = load_lattice(jp)
    assert back.dims == lat.dims
    assert back.num_classes == lat.num_classes
    np.testing.assert_array_equal(back.classes, lat.classes)
    np.testing.assert_array_equal(back.payload, lat.payload)  # exact, repr round trip


def test_save_load_deterministic_bytes(tmp_path):
    lat = make_lattice((3, 3), np.arange(9) % 2, num_classes=2,
                       payload=np.linspace(0, 1, 9))
    jp1, cp1 = save_lattice(lat, tmp_path / "a.json")
    jp2, cp2 = save_lattice(lat, tmp_path / "b.json")
    assert jp1.read_bytes() == jp2.read_bytes()
    assert cp1.read_bytes() == cp2.read_bytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_partition_property(rows, cols, k, ch, cw, seed):
    rng = np.random.default_rng(seed)
    lat = make_lattice((rows, cols), rng.integers(0, k, rows * cols),
                       num_classes=k)
    for scheme in ("grid", "class", "grid_class"):
        strat = build_stratification(lat, scheme, (ch, cw))
        assert strat.is_partition()
        total = np.concatenate([s.pixels for s in strat.strata])
        assert np.array_equal(np.sort(total), np.arange(lat.size))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 10 ** 6))
def test_reflection_property(rows, cols, seed):
    # Reflections always land inside the stratum and exact flags mean the
    # mirrored integer coordinate is a member.
    rng = np.random.default_rng(seed)
    n = rows * cols
    size = int(rng.integers(1, n + 1))
    pixels = np.sort(rng.choice(n, size=size, replace=False))
    lat = make_lattice((rows, cols), np.zeros(n))
    strat = manual_stratification(lat, [pixels])
    s = strat.strata[0]
    pos = s.reflection_positions
    assert ((0 <= pos) & (pos < s.size)).all()
    mirrored = 2.0 * s.center - s.coords
    for i in range(s.size):
        if s.reflection_exact[i]:
            np.testing.assert_allclose(s.coords[pos[i]], mirrored[i],
                                       atol=1e-9)
