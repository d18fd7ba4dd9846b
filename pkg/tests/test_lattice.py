import itertools

import numpy as np
import pytest

from ildqct.features import FEATURE_NAMES, compute_feature_vector
from ildqct.lattice import (
    EmptyMapError, LatticeConfig, compute_feature_map, extract_window, feature_map_filename,
    lattice_steps, place_lattice, read_feature_map, round_half_up, window_sides, write_feature_map,
)
from ildqct.phantom import PhantomSpec, Region, generate_phantom
from ildqct.volume_io import LungMask, Volume


@pytest.fixture(scope="module")
def small_phantom():
    regions = (Region("normal", 0.5), Region("honeycomb", 0.5))
    return generate_phantom(PhantomSpec(dims=(64, 56, 48), regions=regions, seed=4))


def test_round_half_up():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


def test_steps_and_sides():
    assert lattice_steps((0.5, 0.5, 1.0), 4.0) == (8, 8, 4)
    assert lattice_steps((10.0, 1.0, 1.0), 1.0) == (1, 1, 1)
    assert window_sides((1.0, 1.0, 1.0), 1.0) == (2, 2, 2)
    assert window_sides((0.7, 0.7, 1.25), 8.0) == (11, 11, 6)


def test_full_cube_lattice():
    mask = LungMask(np.ones((10, 10, 10), bool))
    pts = place_lattice(mask, (1, 1, 1), LatticeConfig(10.0, lattice_step_mm=5.0))
    assert sorted(map(tuple, pts)) == sorted(itertools.product((0, 5), repeat=3))


def test_single_voxel_lattice():
    bits = np.zeros((9, 9, 9), bool)
    bits[3, 3, 3] = True
    pts = place_lattice(LungMask(bits), (1, 1, 1), LatticeConfig(4.0, lattice_step_mm=3.0))
    assert len(pts) <= 1
    with pytest.raises(ValueError):
        place_lattice(LungMask(np.zeros((3, 3, 3), bool)), (1, 1, 1), LatticeConfig(4.0))


def test_lattice_matches_triple_loop(small_phantom):
    mask = small_phantom.mask
    cfg = LatticeConfig(8.0)
    pts = place_lattice(mask, (1, 1, 1), cfg)
    nx, ny, nz = mask.dims
    want = [(x, y, z) for z in range(0, nz, 4) for y in range(0, ny, 4) for x in range(0, nx, 4)
            if mask.bits[z, y, x]]
    assert [tuple(p) for p in pts] == want  # also checks (z, y, x) order


def test_refinement_is_superset(small_phantom):
    coarse = {tuple(p) for p in place_lattice(small_phantom.mask, (1, 1, 1), LatticeConfig(8.0, 4.0))}
    fine = {tuple(p) for p in place_lattice(small_phantom.mask, (1, 1, 1), LatticeConfig(8.0, 2.0))}
    assert coarse <= fine


def test_extract_window_corner_and_interior():
    vol = Volume(np.zeros((10, 10, 10), np.int16), (1, 1, 1))
    mask = LungMask(np.ones((10, 10, 10), bool))
    vals, occ, box, _ = extract_window(vol, mask, (0, 0, 0), 4.0)
    assert box.size <= 64 and occ == 1.0
    _, occ, box, _ = extract_window(vol, mask, (5, 5, 5), 4.0)
    assert box.shape == (4, 4, 4) and occ == 1.0
    with pytest.raises(IndexError):
        extract_window(vol, mask, (10, 0, 0), 4.0)


def test_extract_window_half_masked():
    bits = np.zeros((10, 10, 10), bool)
    bits[:, :, :5] = True
    vol = Volume(np.zeros((10, 10, 10), np.int16), (1, 1, 1))
    vals, occ, box, box_mask = extract_window(vol, LungMask(bits), (5, 5, 5), 4.0)
    # x range is [3, 7), of which x=3,4 are masked
    assert occ == box_mask.sum() / box_mask.size == 0.5
    assert len(vals) == 32


def test_constant_phantom_map():
    bits = np.zeros((20, 20, 20), bool)
    bits[4:16, 4:16, 4:16] = True
    vol = Volume(np.where(bits, -850, 30).astype(np.int16), (1, 1, 1))
    fmap = compute_feature_map(vol, LungMask(bits), LatticeConfig(4.0))
    const = compute_feature_vector(np.full((4, 4, 4), -850))
    d = dict(zip(FEATURE_NAMES, fmap.features.T))
    assert np.all(d["Sigma"] == 0) and np.all(d["Energy"] == 1) and np.all(d["Mean"] == -850)
    interior = fmap.occupancy == 1
    assert interior.any()
    assert np.array_equal(fmap.features[interior], np.broadcast_to(const, (interior.sum(), 26)))
    assert np.all(fmap.occupancy >= 0.5)


def test_map_matches_single_windows(small_phantom):
    ph = small_phantom
    fmap = compute_feature_map(ph.volume, ph.mask, LatticeConfig(8.0))
    rng = np.random.default_rng(0)
    for k in rng.choice(len(fmap), size=50, replace=False):
        vals, occ, box, box_mask = extract_window(ph.volume, ph.mask, fmap.points[k], 8.0)
        assert occ == fmap.occupancy[k]
        assert np.array_equal(compute_feature_vector(box, box_mask), fmap.features[k])
        x, y, z = fmap.points[k]
        assert ph.mask.bits[z, y, x]


def test_workers_bit_identical(small_phantom):
    ph = small_phantom
    cfg = LatticeConfig(6.0)
    maps = [compute_feature_map(ph.volume, ph.mask, cfg, workers=w) for w in (1, 3, 8)]
    assert maps[0] == maps[1] == maps[2]


def test_empty_map():
    bits = np.zeros((12, 12, 12), bool)
    bits[6, 6, 6] = True
    vol = Volume(np.full((12, 12, 12), -850, np.int16), (1, 1, 1))
    with pytest.raises(EmptyMapError):
        compute_feature_map(vol, LungMask(bits), LatticeConfig(8.0))


def test_csv_roundtrip(tmp_path, small_phantom):
    ph = small_phantom
    fmap = compute_feature_map(ph.volume, ph.mask, LatticeConfig(10.0))
    path = tmp_path / feature_map_filename("P007", 10.0)
    assert path.name == "P007_W10.csv"
    write_feature_map(fmap, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["x", "y", "z", "occupancy", *FEATURE_NAMES]
    assert read_feature_map(path) == fmap


def test_config_validation():
    with pytest.raises(ValueError):
        LatticeConfig(0.0)
    with pytest.raises(ValueError):
        LatticeConfig(8.0, min_lung_fraction=0.0)
    assert LatticeConfig(8.0).step_mm == 4.0
