"""Sensor simulation, motion, config parsing, and full-mission invariants."""

import json
import math

import numpy as np
import pytest

from mapex import keyframes as kfmod
from mapex.codec import LosslessCodec
from mapex.geometry import LidarIntrinsics, Pose
from mapex.grid import (FREE, OCCUPIED, OccupancyGrid, load_grid, merge,
                        occupancy_similarity)
from mapex.mission import (ConfigInvalid, Mission, MissionConfig, NoPath,
                           PoseInCollision, parse_mission_config, run_mission,
                           simulate_lidar, step_robot)
from mapex.world import WorldSpec, generate_world, save_world

S = 0.2


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    world = generate_world(WorldSpec(nx=24, ny=20, rooms=2, levels=2,
                                     voxel_size=S), seed=3)
    path = tmp_path_factory.mktemp("worlds") / "two_level.vox"
    save_world(world, path)
    return world, str(path)


@pytest.fixture(scope="module")
def mission_outputs(small_world, tmp_path_factory):
    _, path = small_world
    out = tmp_path_factory.mktemp("mission")
    cfg = MissionConfig(world=path, seed=1, t_b=120.0)
    report, mission = run_mission(cfg, out_dir=str(out))
    return report, mission, out, cfg


# ------------------------------------------------------------------ lidar


def _march_oracle(world, origin, direction, max_range, step):
    """March along the ray and report the first sample in an occupied voxel."""
    g = world.grid
    for k in range(1, int(max_range / step) + 1):
        p = origin + direction * (k * step)
        vox = g.world_to_voxel(p)
        if not g.in_bounds(vox):
            return math.nan
        if g.cells[tuple(vox)] == OCCUPIED:
            return k * step
    return math.nan


def test_lidar_matches_marching_oracle(small_world):
    world, _ = small_world
    intr = LidarIntrinsics(rows=6, cols=24, min_elevation=-0.6,
                           max_elevation=0.6, max_range=8.0)
    img = simulate_lidar(world, world.start, intr)
    dirs = (intr.ray_directions().reshape(-1, 3)
            @ world.start.rotation_matrix().T)
    ranges = img.ranges.reshape(-1)
    tol = S * math.sqrt(3.0)
    for d, r in zip(dirs, ranges):
        oracle = _march_oracle(world, world.start.position, d, 8.0, S / 25.0)
        if math.isnan(oracle):
            assert not np.isfinite(r)
        else:
            assert abs(float(r) - oracle) <= tol


def test_lidar_sealed_room_all_rays_hit(small_world):
    world, _ = small_world
    # the shell is sealed, so with range beyond the world diagonal every
    # ray must terminate on something
    span = np.asarray(world.grid.dims) * S
    intr = LidarIntrinsics(rows=8, cols=36, min_elevation=-1.2,
                           max_elevation=1.2,
                           max_range=float(np.linalg.norm(span)) + 1.0)
    img = simulate_lidar(world, world.start, intr)
    assert img.valid_mask.all()


def test_lidar_bitwise_deterministic(small_world):
    world, _ = small_world
    intr = MissionConfig(world="x").intrinsics("ground")
    a = simulate_lidar(world, world.start, intr)
    b = simulate_lidar(world, world.start, intr)
    assert a.ranges.tobytes() == b.ranges.tobytes()
    na = simulate_lidar(world, world.start, intr, sigma=0.01,
                        rng=np.random.default_rng(7))
    nb = simulate_lidar(world, world.start, intr, sigma=0.01,
                        rng=np.random.default_rng(7))
    assert na.ranges.tobytes() == nb.ranges.tobytes()
    assert na.ranges.tobytes() != a.ranges.tobytes()


def test_lidar_rejects_pose_in_occupied_voxel(small_world):
    world, _ = small_world
    intr = MissionConfig(world="x").intrinsics("ground")
    wall = Pose.from_yaw(np.array([0.1, 0.1, 0.1]), 0.0)  # sealed shell
    with pytest.raises(PoseInCollision):
        simulate_lidar(world, wall, intr)
    with pytest.raises(ValueError):
        simulate_lidar(world, world.start, intr, sigma=0.1, rng=None)


# ----------------------------------------------------------------- motion


class _State:
    def __init__(self, pos, path, v_nom=0.7):
        self.pose = Pose.from_yaw(np.asarray(pos, dtype=np.float64), 0.0)
        self.path = [np.asarray(p, dtype=np.float64) for p in path]
        self.v_nom = v_nom
        self.name = "test"


def test_step_zero_dt_is_identity():
    st = _State([0, 0, 0], [[5, 0, 0]])
    step_robot(st, 0.0)
    assert st.pose.position.tolist() == [0, 0, 0]
    assert st.path is not None


def test_step_traverses_14m_in_20s_at_nominal_speed():
    st = _State([0, 0, 0], [[14.0, 0, 0]], v_nom=0.7)
    for _ in range(200):
        if st.path is None:
            break
        step_robot(st, 0.1)
    assert st.path is None
    assert np.allclose(st.pose.position, [14.0, 0, 0], atol=1e-9)


def test_step_crosses_waypoints_and_faces_travel():
    st = _State([0, 0, 0], [[1.0, 0, 0], [1.0, 1.0, 0]], v_nom=1.0)
    step_robot(st, 1.5)
    assert np.allclose(st.pose.position, [1.0, 0.5, 0])
    # heading now along +y
    q = st.pose.orientation
    yaw = 2.0 * math.atan2(q[3], q[0])
    assert abs(yaw - math.pi / 2) < 1e-9


def test_step_keeps_yaw_on_vertical_travel():
    st = _State([0, 0, 0], [[0, 0, 2.0]], v_nom=1.0)
    st.pose = Pose.from_yaw(np.zeros(3), 0.75)
    step_robot(st, 1.0)
    q = st.pose.orientation
    assert abs(2.0 * math.atan2(q[3], q[0]) - 0.75) < 1e-9
    assert np.allclose(st.pose.position, [0, 0, 1.0])


def test_step_without_path_raises():
    st = _State([0, 0, 0], [[1, 0, 0]])
    st.path = None
    with pytest.raises(NoPath):
        step_robot(st, 0.1)


# ----------------------------------------------------------------- config


def test_config_text_round_trip():
    cfg = MissionConfig(world="w.vox", seed=9, t_b=333.25, n_k=7,
                        bandwidth=2048.0)
    assert parse_mission_config(cfg.to_text()) == cfg


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ConfigInvalid):
        parse_mission_config("world = w.vox\nwarp_speed = 9\n")
    with pytest.raises(ConfigInvalid):
        parse_mission_config("world w.vox\n")
    with pytest.raises(ConfigInvalid):
        parse_mission_config("world = w.vox\nseed = not_an_int\n")


def test_config_comments_and_blanks_ignored():
    cfg = parse_mission_config(
        "# mission setup\n\nworld = w.vox\nseed = 4  # rng\n")
    assert cfg.world == "w.vox" and cfg.seed == 4


def test_config_validation_catches_bad_values():
    with pytest.raises(ConfigInvalid):
        MissionConfig(world="w.vox", dt=0.0).validate()
    with pytest.raises(ConfigInvalid):
        MissionConfig(world="w.vox", n_k=0).validate()
    with pytest.raises(ConfigInvalid):
        MissionConfig(world="").validate()


def test_mission_rejects_voxel_size_mismatch(small_world):
    _, path = small_world
    with pytest.raises(ConfigInvalid):
        Mission(MissionConfig(world=path, seed=1, s_vxl=0.25))


# ------------------------------------------------------ full mission runs


def test_mission_completes_with_full_handshake(mission_outputs):
    report, mission, _, _ = mission_outputs
    assert report["trigger_fired"]
    assert report["deploy_t"] is not None
    assert not report["timed_out"]
    assert report["robots"]["ground"]["complete"]
    assert report["robots"]["aerial"]["complete"]
    assert mission.link.idle and mission.link.conserved()


def test_mission_phases_are_ordered(mission_outputs):
    _, mission, _, _ = mission_outputs
    phases = [row[2] for row in mission.metrics_rows]
    assert set(phases) <= {1, 2, 3}
    assert phases == sorted(phases)
    assert 2 in phases  # the handshake row


def test_aerial_is_cargo_until_deployment(mission_outputs):
    report, mission, _, _ = mission_outputs
    deploy_t = report["deploy_t"]
    assert deploy_t > 0
    for t, name, phase, explored, kfs, tx, rx in mission.metrics_rows:
        if name == "aerial" and t < deploy_t:
            assert explored == 0.0 and kfs == 0 and tx == 0


def test_explored_volume_never_decreases(mission_outputs):
    _, mission, _, _ = mission_outputs
    last = {"ground": 0.0, "aerial": 0.0}
    for t, name, phase, explored, *_ in mission.metrics_rows:
        assert explored >= last[name] - 1e-12
        last[name] = explored


def test_deployment_transfers_latest_keyframes(mission_outputs):
    report, mission, out, cfg = mission_outputs
    deploy_t = report["deploy_t"]
    frames = kfmod.load_keyframe_log(out / "ground_keyframes.kfr")
    existing = sum(1 for kf in frames if kf.timestamp <= deploy_t)
    sends = 0
    for row in (out / "traffic.csv").read_text().splitlines()[1:]:
        t, channel, direction, _, event = row.split(",")
        if (float(t) == deploy_t and channel == "keyframe"
                and direction == "g2a" and event == "send"):
            sends += 1
    assert sends == min(cfg.n_k, existing)


def test_combined_map_is_merge_of_own_maps(mission_outputs):
    _, _, out, _ = mission_outputs
    g = load_grid(out / "ground_map.vox")
    a = load_grid(out / "aerial_map.vox")
    combined = load_grid(out / "combined_map.vox")
    assert (merge(g, a).cells == combined.cells).all()


def test_peer_maps_match_keyframe_log_integration(mission_outputs):
    _, _, out, cfg = mission_outputs
    for sender, sid, receiver in (("ground", 0, "aerial"),
                                  ("aerial", 1, "ground")):
        frames = kfmod.load_keyframe_log(out / f"{sender}_keyframes.kfr")
        decoder = LosslessCodec(cfg.intrinsics(sender))
        own = load_grid(out / f"{sender}_map.vox")
        rebuilt = OccupancyGrid.unknown(tuple(own.origin), own.dims,
                                        own.voxel_size)
        for kf in frames:
            kfmod.integrate_keyframe(rebuilt, kf, decoder,
                                     expected_robot_id=sid)
        peer = load_grid(out / f"{receiver}_peer_map.vox")
        assert (rebuilt.cells == peer.cells).all()
        assert occupancy_similarity(rebuilt, peer) == 1.0


def test_robots_end_at_the_agreed_regroup_point(mission_outputs):
    report, _, _, cfg = mission_outputs
    target = np.asarray(report["regroup_position"])
    for name in ("ground", "aerial"):
        final = np.asarray(report["robots"][name]["final_position"])
        assert np.linalg.norm(final - target) <= 2.0 * cfg.s_vxl + 1e-9


def test_regroup_choices_are_minimax(mission_outputs):
    report, _, _, _ = mission_outputs
    assert report["regroup_events"]
    for ev in report["regroup_events"]:
        tg = [math.inf if v == "inf" else v for v in ev["t_g"]]
        ta = [math.inf if v == "inf" else v for v in ev["t_a"]]
        worst = [max(a, b) for a, b in zip(tg, ta)]
        best = min(range(len(worst)), key=lambda i: worst[i])
        if math.isinf(worst[best]):
            assert ev["chosen"] == -1
        else:
            assert ev["chosen"] == ev["seqs"][best]


def test_mission_is_bitwise_reproducible(mission_outputs, tmp_path):
    _, _, out, cfg = mission_outputs
    rerun = tmp_path / "rerun"
    run_mission(cfg, out_dir=str(rerun))
    for name in ("mission.json", "metrics.csv", "traffic.csv",
                 "ground_map.vox", "aerial_map.vox", "combined_map.vox",
                 "ground_keyframes.kfr", "aerial_keyframes.kfr",
                 "ground_peer_map.vox", "aerial_peer_map.vox"):
        assert (rerun / name).read_bytes() == (out / name).read_bytes(), name


def test_metrics_csv_layout(mission_outputs):
    _, _, out, _ = mission_outputs
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "t,robot,phase,explored_m3,keyframes,bytes_tx,bytes_rx"
    row = lines[1].split(",")
    assert row[1] == "ground" and int(row[2]) == 1
    assert float(row[3]) == 0.0 or float(row[3]) > 0.0


def test_mission_report_json_is_loadable(mission_outputs):
    _, _, out, _ = mission_outputs
    data = json.loads((out / "mission.json").read_text())
    assert data["trigger_fired"] is True
    assert set(data["robots"]) == {"ground", "aerial"}
    total_sent = sum(c["sent"] for c in data["traffic"].values())
    tx = sum(r["bytes_tx"] for r in data["robots"].values())
    assert total_sent == tx
