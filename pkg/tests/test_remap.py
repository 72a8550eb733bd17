import math

import numpy as np
import pytest

from mapex.geometry import INVALID, LidarIntrinsics, RangeImage
from mapex.grid import FREE, OCCUPIED, OccupancyGrid, first_hit_distances
from mapex.remap import (
    CorruptFile,
    EmptyDataset,
    build_dataset,
    load_dataset,
    load_pair,
    load_scan,
    save_pair,
    save_scan,
    split_dataset,
    voxel_aware_remap,
)

DEG = math.pi / 180.0
S = 0.2
BOUND = S * math.sqrt(3.0)


def room_world():
    # hollow 8 m box with two pillars, sensor-friendly interior
    g = OccupancyGrid.unknown((-4.0, -4.0, -1.0), (40, 40, 12), S)
    g.cells[:] = FREE
    g.cells[0, :, :] = OCCUPIED
    g.cells[-1, :, :] = OCCUPIED
    g.cells[:, 0, :] = OCCUPIED
    g.cells[:, -1, :] = OCCUPIED
    g.cells[:, :, 0] = OCCUPIED
    g.cells[:, :, -1] = OCCUPIED
    g.cells[10:12, 24:26, :] = OCCUPIED
    g.cells[28:30, 8:10, :] = OCCUPIED
    return g


def render(world, origin, intr):
    dirs = intr.ray_directions().reshape(-1, 3)
    d = first_hit_distances(world, origin, dirs, intr.max_range)
    return RangeImage(intr, d.reshape(intr.rows, intr.cols).astype(np.float32))


@pytest.fixture(scope="module")
def intr():
    return LidarIntrinsics(16, 180, -15 * DEG, 15 * DEG, 8.0)


@pytest.fixture(scope="module")
def scene_image(intr):
    img = render(room_world(), np.array([0.31, -0.22, 0.13]), intr)
    assert img.valid_count > 1000
    return img


def test_all_invalid_maps_to_all_invalid(intr):
    out = voxel_aware_remap(RangeImage.empty(intr), S)
    assert out.valid_count == 0


def test_single_pixel_survives_near_original_range():
    intr = LidarIntrinsics(4, 16, -30 * DEG, 30 * DEG, 8.0)
    img = RangeImage.empty(intr)
    img.ranges[2, 5] = 3.0
    out = voxel_aware_remap(img, S)
    assert np.isfinite(out.ranges[2, 5])
    assert abs(float(out.ranges[2, 5]) - 3.0) <= BOUND


def test_valid_values_bounded_by_max_range(scene_image):
    out = voxel_aware_remap(scene_image, S)
    vals = out.ranges[out.valid_mask]
    assert vals.size > 0
    assert np.all(vals > 0.0)
    assert np.all(vals <= scene_image.intrinsics.max_range)


def test_valid_pixels_with_occupied_endpoints_stay_valid(scene_image):
    out = voxel_aware_remap(scene_image, S)
    # scene ranges are comfortably above one voxel, so every original
    # return creates an occupied voxel its own ray must re-hit
    assert np.all(out.valid_mask[scene_image.valid_mask])
    assert np.all(
        out.ranges[scene_image.valid_mask]
        <= scene_image.ranges[scene_image.valid_mask] + 1e-4
    )


def test_remap_is_idempotent_within_voxel_diagonal(scene_image):
    once = voxel_aware_remap(scene_image, S)
    twice = voxel_aware_remap(once, S)
    assert np.all(twice.valid_mask[once.valid_mask])  # mask only grows
    both = once.valid_mask & twice.valid_mask
    diff = np.abs(twice.ranges[both].astype(float) - once.ranges[both].astype(float))
    assert diff.max() <= BOUND + 1e-6


def test_remap_commutes_with_quarter_turn(scene_image):
    intr = scene_image.intrinsics
    k = intr.cols // 4  # 90 degrees; the voxel lattice is invariant
    rolled = RangeImage(intr, np.roll(scene_image.ranges, k, axis=1))
    a = voxel_aware_remap(rolled, S)
    b = RangeImage(intr, np.roll(voxel_aware_remap(scene_image, S).ranges, k, axis=1))
    agree = a.valid_mask & b.valid_mask
    diff = np.abs(a.ranges[agree].astype(float) - b.ranges[agree].astype(float))
    # grazing rays may flip validity or first hit when the lattice rotates
    # under them; everything else must match within a voxel diagonal
    bad = np.count_nonzero(a.valid_mask != b.valid_mask)
    bad += np.count_nonzero(diff > BOUND + 1e-6)
    assert bad <= 0.01 * a.ranges.size


def test_rejects_bad_voxel_size(scene_image):
    with pytest.raises(ValueError):
        voxel_aware_remap(scene_image, 0.0)


# ----------------------------------------------------------------- files


def test_scan_round_trip_bitwise(tmp_path, scene_image):
    p = tmp_path / "a.rim"
    save_scan(p, scene_image)
    back = load_scan(p, scene_image.intrinsics)
    assert back.ranges.tobytes() == scene_image.ranges.tobytes()


def test_pair_round_trip_bitwise(tmp_path, scene_image):
    out = voxel_aware_remap(scene_image, S)
    p = tmp_path / "a.rimg"
    save_pair(p, scene_image, out)
    x, xv = load_pair(p, scene_image.intrinsics)
    assert x.ranges.tobytes() == scene_image.ranges.tobytes()
    assert xv.ranges.tobytes() == out.ranges.tobytes()


def test_pair_file_size_formula(tmp_path, scene_image):
    out = voxel_aware_remap(scene_image, S)
    p = tmp_path / "a.rimg"
    save_pair(p, scene_image, out)
    n = scene_image.ranges.size
    assert p.stat().st_size == 12 + 8 * n  # 4s + u16 + u16 + f32 header


def test_corrupt_files_rejected(tmp_path):
    p = tmp_path / "bad.rim"
    p.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(CorruptFile):
        load_scan(p)
    p.write_bytes(b"RIM0")
    with pytest.raises(CorruptFile):
        load_scan(p)


def test_truncated_pair_rejected(tmp_path, scene_image):
    p = tmp_path / "a.rimg"
    save_pair(p, scene_image, voxel_aware_remap(scene_image, S))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CorruptFile):
        load_pair(p)


# ----------------------------------------------------------------- dataset


def test_build_dataset_matches_recomputation(tmp_path, intr):
    world = room_world()
    rng = np.random.default_rng(71)
    scans = tmp_path / "scans"
    scans.mkdir()
    for i in range(4):
        img = render(world, rng.uniform(-1.0, 1.0, size=3) * [1, 1, 0.3], intr)
        save_scan(scans / f"{i:03d}.rim", img)
    pairs = build_dataset(scans, S, tmp_path / "pairs")
    assert len(pairs) == 4
    for p in pairs:
        x, xv = load_pair(p, intr)
        again = voxel_aware_remap(x, S)
        assert xv.ranges.tobytes() == again.ranges.tobytes()
    assert (tmp_path / "pairs" / "manifest.json").exists()


def test_build_dataset_empty_dir(tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    with pytest.raises(EmptyDataset):
        build_dataset(empty, S, tmp_path / "out")


def test_load_dataset_stacks_in_order(tmp_path, intr, scene_image):
    out = tmp_path / "pairs"
    out.mkdir()
    remapped = voxel_aware_remap(scene_image, S)
    for i in range(3):
        save_pair(out / f"{i:05d}.rimg", scene_image, remapped)
    raws, remaps, got_intr = load_dataset(out, intr)
    assert raws.shape == (3, intr.rows, intr.cols)
    assert remaps.shape == raws.shape
    assert got_intr is intr


def test_split_ninety_ten():
    train, test = split_dataset(10, seed=3)
    assert len(train) == 9 and len(test) == 1
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))


def test_split_deterministic_and_disjoint():
    a = split_dataset(57, seed=9)
    b = split_dataset(57, seed=9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = split_dataset(57, seed=10)
    assert not (np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1]))


def test_split_single_item_all_train():
    train, test = split_dataset(1, seed=0)
    assert train.tolist() == [0] and test.size == 0
