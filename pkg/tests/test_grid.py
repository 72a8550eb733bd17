import numpy as np
import pytest

from mapex.geometry import Pose
from mapex.grid import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    ExtentMismatch,
    OccupancyGrid,
    OriginOutOfBounds,
    ParseError,
    ResolutionMismatch,
    explored_volume,
    first_hit_distances,
    free_component,
    integrate_cloud,
    load_grid,
    merge,
    occupancy_similarity,
    raycast,
    save_grid,
    traverse,
)


def empty_grid(dims=(10, 10, 10), s=0.5, origin=(0.0, 0.0, 0.0)):
    return OccupancyGrid.unknown(origin, dims, s)


# ------------------------------------------------------------- raycast


def test_raycast_single_voxel_when_endpoint_in_origin_voxel():
    g = empty_grid()
    path = raycast(g, [0.6, 0.6, 0.6], [0.9, 0.7, 0.6])
    assert path.tolist() == [[1, 1, 1]]


def test_raycast_axis_aligned():
    g = empty_grid()
    path = raycast(g, [0.25, 0.25, 0.25], [2.25, 0.25, 0.25])
    assert path.tolist() == [[i, 0, 0] for i in range(5)]


def test_raycast_requires_origin_inside():
    g = empty_grid()
    with pytest.raises(OriginOutOfBounds):
        raycast(g, [-1.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def test_raycast_truncates_at_grid_boundary():
    g = empty_grid()
    path = raycast(g, [0.25, 0.25, 0.25], [9.0, 0.25, 0.25])
    # grid is 5 m wide: voxels 0..9 along x, then the segment leaves
    assert path.tolist() == [[i, 0, 0] for i in range(10)]


def test_raycast_against_supersampled_segments():
    # Oracle: dense sampling along the segment gives a subset of the DDA
    # path; the path itself must be face-connected, have Manhattan length,
    # start at the origin voxel, end at the endpoint voxel, and hug the
    # segment within half a voxel diagonal.
    g = empty_grid(dims=(12, 12, 12), s=0.5)
    rng = np.random.default_rng(41)
    for _ in range(300):
        a = rng.uniform(0.3, 5.7, size=3)
        b = rng.uniform(0.3, 5.7, size=3)
        path = raycast(g, a, b)
        va, vb = g.world_to_voxel(a), g.world_to_voxel(b)
        assert path[0].tolist() == va.tolist()
        assert path[-1].tolist() == vb.tolist()
        assert len(path) == 1 + int(np.abs(vb - va).sum())
        steps = np.abs(np.diff(path, axis=0)).sum(axis=1)
        assert np.all(steps == 1)

        ts = np.linspace(0.0, 1.0, int(np.linalg.norm(b - a) / 0.005) + 2)
        sampled = g.world_to_voxel(a[None, :] + ts[:, None] * (b - a)[None, :])
        path_set = {tuple(v) for v in path.tolist()}
        assert {tuple(v) for v in sampled.tolist()} <= path_set

        centers = g.voxel_center(path)
        d = b - a
        t = np.clip(((centers - a) @ d) / (d @ d + 1e-300), 0.0, 1.0)
        dist = np.linalg.norm(centers - (a + t[:, None] * d), axis=1)
        assert np.all(dist <= 0.5 * np.sqrt(3) * g.voxel_size + 1e-9)


def test_traverse_batch_matches_scalar():
    g = empty_grid(dims=(8, 8, 8), s=0.25, origin=(-1.0, -1.0, -1.0))
    rng = np.random.default_rng(43)
    origins = rng.uniform(-0.9, 0.9, size=(64, 3))
    ends = rng.uniform(-2.5, 2.5, size=(64, 3))
    voxels, _, counts, _ = traverse(g, origins, ends)
    for i in range(64):
        single = raycast(g, origins[i], ends[i])
        assert voxels[i, : counts[i]].tolist() == single.tolist()


def test_traverse_entry_fractions_are_monotonic():
    g = empty_grid()
    _, entry_t, counts, reached = traverse(
        g, np.array([[0.25, 0.25, 0.25]]), np.array([[4.9, 4.1, 3.3]])
    )
    assert bool(reached[0])
    t = entry_t[0, : counts[0]]
    assert t[0] == 0.0
    assert np.all(np.diff(t) > 0)
    assert t[-1] <= 1.0


def test_first_hit_distance_matches_analytic_plane():
    g = empty_grid(dims=(20, 20, 20), s=0.5)
    g.cells[10, :, :] = OCCUPIED  # wall spanning x in [5.0, 5.5)
    origin = np.array([1.3, 3.2, 3.2])
    dirs = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    d = first_hit_distances(g, origin, dirs, max_range=9.0)
    assert d[0] == pytest.approx(5.0 - 1.3, abs=1e-9)
    assert np.isnan(d[1])


def test_first_hit_beyond_max_range_is_invalid():
    g = empty_grid(dims=(20, 20, 20), s=0.5)
    g.cells[10, :, :] = OCCUPIED
    d = first_hit_distances(g, [1.3, 3.2, 3.2], [[1.0, 0.0, 0.0]], max_range=3.0)
    assert np.isnan(d[0])


def test_first_hit_diagonal_matches_supersampling():
    g = empty_grid(dims=(16, 16, 16), s=0.5)
    rng = np.random.default_rng(47)
    occ = rng.integers(0, 16, size=(40, 3))
    g.cells[occ[:, 0], occ[:, 1], occ[:, 2]] = OCCUPIED
    origin = np.array([4.01, 4.02, 4.03])
    g.cells[tuple(g.world_to_voxel(origin))] = FREE
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    d = first_hit_distances(g, origin, dirs, max_range=6.0)
    for k in range(50):
        ts = np.arange(0.0, 6.0, 0.002)
        pts = origin[None, :] + ts[:, None] * dirs[k][None, :]
        vox = g.world_to_voxel(pts)
        inb = g.in_bounds(vox)
        states = np.full(len(ts), FREE)
        states[inb] = g.cells[vox[inb, 0], vox[inb, 1], vox[inb, 2]]
        hits = np.nonzero(states == OCCUPIED)[0]
        if len(hits) == 0:
            assert np.isnan(d[k])
        else:
            assert d[k] == pytest.approx(ts[hits[0]], abs=0.003)


# ----------------------------------------------------------- integrate


def test_integrate_marks_endpoint_occupied_and_path_free():
    g = empty_grid()
    # sensor frame point [2.0, 0, 0] -> world (2.25, 0.25, 0.25), voxel (4,0,0)
    integrate_cloud(g, Pose(np.array([0.25, 0.25, 0.25])), [[2.0, 0.0, 0.0]])
    assert g.cells[4, 0, 0] == OCCUPIED
    assert all(g.cells[i, 0, 0] == FREE for i in range(4))
    assert g.cells[5, 0, 0] == UNKNOWN


def test_integrate_is_order_independent():
    rng = np.random.default_rng(53)
    cloud = rng.uniform(-2.0, 2.0, size=(200, 3))
    pose = Pose(np.array([2.5, 2.5, 2.5]))
    g1 = empty_grid()
    integrate_cloud(g1, pose, cloud)
    g2 = empty_grid()
    integrate_cloud(g2, pose, cloud[rng.permutation(200)])
    assert np.array_equal(g1.cells, g2.cells)


def test_endpoint_beats_traversal_within_one_pass():
    g = empty_grid()
    pose = Pose(np.array([0.25, 0.25, 0.25]))
    # first ray ends in voxel (2,0,0); second passes through it
    integrate_cloud(g, pose, [[1.2, 0.0, 0.0], [2.2, 0.0, 0.0]])
    assert g.cells[2, 0, 0] == OCCUPIED
    assert g.cells[4, 0, 0] == OCCUPIED


def test_occupied_never_reverts_across_passes():
    g = empty_grid()
    pose = Pose(np.array([0.25, 0.25, 0.25]))
    integrate_cloud(g, pose, [[1.2, 0.0, 0.0]])
    assert g.cells[2, 0, 0] == OCCUPIED
    integrate_cloud(g, pose, [[2.2, 0.0, 0.0]])
    assert g.cells[2, 0, 0] == OCCUPIED


def test_ray_exiting_grid_frees_but_occupies_nothing():
    g = empty_grid()
    pose = Pose(np.array([0.25, 0.25, 0.25]))
    integrate_cloud(g, pose, [[50.0, 0.0, 0.0]])
    assert np.count_nonzero(g.cells == OCCUPIED) == 0
    assert all(g.cells[i, 0, 0] == FREE for i in range(10))


def test_integrate_requires_sensor_inside():
    g = empty_grid()
    with pytest.raises(OriginOutOfBounds):
        integrate_cloud(g, Pose(np.array([-5.0, 0.0, 0.0])), [[1.0, 1.0, 1.0]])


def test_integrate_applies_sensor_pose():
    g = empty_grid()
    pose = Pose.from_yaw(np.array([2.25, 2.25, 0.25]), np.pi / 2)
    # +x in sensor frame points along +y in world
    integrate_cloud(g, pose, [[1.0, 0.0, 0.0]])
    assert g.cells[4, 6, 0] == OCCUPIED


# ------------------------------------------------- volume / similarity


def test_explored_volume_counts_known_voxels():
    g = empty_grid(dims=(4, 4, 4), s=0.5)
    assert explored_volume(g) == 0.0
    g.cells[0, 0, 0] = FREE
    g.cells[1, 0, 0] = OCCUPIED
    assert explored_volume(g) == pytest.approx(2 * 0.5**3)


def test_similarity_identical_grids_is_one():
    g = empty_grid(dims=(6, 6, 6))
    g.cells[2:4, 2:4, 2:4] = OCCUPIED
    assert occupancy_similarity(g, g.copy()) == 1.0


def test_similarity_empty_cases():
    a, b = empty_grid(), empty_grid()
    assert occupancy_similarity(a, b) == 1.0
    b.cells[1, 1, 1] = OCCUPIED
    assert occupancy_similarity(a, b) == 0.0
    assert occupancy_similarity(b, a) == 0.0


def test_similarity_tolerates_one_voxel_shift():
    a = empty_grid(dims=(8, 8, 8))
    b = empty_grid(dims=(8, 8, 8))
    a.cells[2:5, 3, 3] = OCCUPIED
    b.cells[3:6, 3, 3] = OCCUPIED  # same wall, one voxel over
    assert occupancy_similarity(a, b) == 1.0


def test_similarity_penalizes_larger_shift():
    a = empty_grid(dims=(10, 10, 10))
    b = empty_grid(dims=(10, 10, 10))
    a.cells[2, 3, 3] = OCCUPIED
    b.cells[5, 3, 3] = OCCUPIED
    assert occupancy_similarity(a, b) == 0.0


def test_similarity_matches_brute_force():
    rng = np.random.default_rng(59)
    for _ in range(10):
        a = empty_grid(dims=(7, 7, 7))
        b = empty_grid(dims=(7, 7, 7))
        a.cells[rng.random(a.dims) < 0.1] = OCCUPIED
        b.cells[rng.random(b.dims) < 0.1] = OCCUPIED
        ca, cb = a.occupied_centers(), b.occupied_centers()
        radius = a.voxel_size * (1 + 1e-9)
        dm = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2)
        prec = float(np.count_nonzero(dm.min(axis=0) <= radius)) / len(cb)
        rec = float(np.count_nonzero(dm.min(axis=1) <= radius)) / len(ca)
        want = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert occupancy_similarity(a, b) == pytest.approx(want, abs=1e-12)


def test_similarity_rejects_resolution_mismatch():
    with pytest.raises(ResolutionMismatch):
        occupancy_similarity(empty_grid(s=0.5), empty_grid(s=0.25))


# ----------------------------------------------------------------- merge


def test_merge_state_precedence_table():
    cases = {
        (UNKNOWN, UNKNOWN): UNKNOWN,
        (UNKNOWN, FREE): FREE,
        (UNKNOWN, OCCUPIED): OCCUPIED,
        (FREE, UNKNOWN): FREE,
        (FREE, FREE): FREE,
        (FREE, OCCUPIED): OCCUPIED,
        (OCCUPIED, UNKNOWN): OCCUPIED,
        (OCCUPIED, FREE): OCCUPIED,
        (OCCUPIED, OCCUPIED): OCCUPIED,
    }
    a = empty_grid(dims=(9, 1, 1))
    b = empty_grid(dims=(9, 1, 1))
    pairs = list(cases.items())
    for i, ((sa, sb), _) in enumerate(pairs):
        a.cells[i, 0, 0] = sa
        b.cells[i, 0, 0] = sb
    merged = merge(a, b)
    for i, (_, want) in enumerate(pairs):
        assert merged.cells[i, 0, 0] == want


def test_merge_is_commutative_and_idempotent():
    rng = np.random.default_rng(61)
    a = empty_grid(dims=(6, 6, 6))
    b = empty_grid(dims=(6, 6, 6))
    a.cells[:] = rng.integers(0, 3, size=a.dims)
    b.cells[:] = rng.integers(0, 3, size=b.dims)
    ab, ba = merge(a, b), merge(b, a)
    assert np.array_equal(ab.cells, ba.cells)
    assert np.array_equal(merge(ab, ab).cells, ab.cells)


def test_merge_rejects_layout_mismatch():
    with pytest.raises(ExtentMismatch):
        merge(empty_grid(dims=(4, 4, 4)), empty_grid(dims=(5, 4, 4)))
    with pytest.raises(ResolutionMismatch):
        merge(empty_grid(s=0.5), empty_grid(s=0.2))


# ------------------------------------------------------------ file io


def test_grid_text_round_trip(tmp_path):
    rng = np.random.default_rng(67)
    g = OccupancyGrid(
        np.array([-1.25, 0.5, -3.0]),
        0.2,
        rng.integers(0, 3, size=(5, 4, 3)).astype(np.uint8),
    )
    path = tmp_path / "map.vox"
    save_grid(g, path)
    back = load_grid(path)
    assert np.array_equal(back.cells, g.cells)
    assert np.allclose(back.origin, g.origin, atol=0)
    assert back.voxel_size == g.voxel_size


def test_grid_load_ignores_trailing_lines(tmp_path):
    g = empty_grid(dims=(2, 2, 2))
    path = tmp_path / "map.vox"
    save_grid(g, path)
    with open(path, "a") as fh:
        fh.write("start: 1 2 3 1 0 0 0\nmark: door 0 0 0\n")
    back = load_grid(path)
    assert np.array_equal(back.cells, g.cells)


def test_grid_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.vox"
    p.write_text("not a grid\n")
    with pytest.raises(ParseError):
        load_grid(p)
    p.write_text("VOX1 2 2 2 0.5 0 0 0\n..\n..\n..\n")
    with pytest.raises(ParseError):  # missing one row
        load_grid(p)
    p.write_text("VOX1 2 2 2 0.5 0 0 0\n..\n..\n..\nxx\n")
    with pytest.raises(ParseError):  # bad cell char
        load_grid(p)


# ------------------------------------------------------ free component


def test_free_component_stops_at_walls():
    g = empty_grid(dims=(7, 3, 3))
    g.cells[:] = FREE
    g.cells[3, :, :] = OCCUPIED  # wall splits the box in two
    mask = free_component(g, (0, 0, 0))
    assert mask[:3].all()
    assert not mask[3:].any()


def test_free_component_empty_seed():
    g = empty_grid(dims=(3, 3, 3))  # all unknown
    assert not free_component(g, (1, 1, 1)).any()
