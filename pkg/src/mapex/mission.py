"""Three-phase collaborative exploration of a carrier/deployable robot pair.

Phase 1: the ground robot explores with the aerial robot as cargo, checking
each planning step whether its own discounted path gain has fallen to a
fraction of what a virtual aerial graph estimates.  Phase 2 (one step): the
deployment handshake — co-localization stub, the latest N_k keyframes, the
dense cloud, and the aerial target all cross the simulated link.  Phase 3:
both robots explore independently, exchange unshared keyframes whenever in
range, agree on a regrouping keyframe by argmin-max travel time, and head
back when the time budget says the next path would not fit.

Everything the robots know comes from their own sensors or the link; maps
decoded from peer keyframes are kept separate from own observations so that
navigation never trusts a lossy reconstruction.  The loop is a fixed-order
discrete-time simulation: ground, aerial, network, bookkeeping — bitwise
reproducible from (config, seed).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import keyframes as kfmod
from .codec import LosslessCodec, load_codec
from .geometry import LidarIntrinsics, Pose, RangeImage, unproject
from .grid import (FREE, OCCUPIED, OccupancyGrid, explored_volume,
                   first_hit_distances, integrate_cloud, merge,
                   occupancy_similarity, save_grid)
from .network import Link, LinkModel, in_range
from .planner import (AERIAL_3D, GROUND_2_5D, PlannerConfig, RobotInCollision,
                      _edge_clear, best_path_and_gain, best_vertex_and_gain,
                      build_local_graph, deployment_trigger, grid_path,
                      knit_graph, select_regroup_point, shortest_paths,
                      should_return, times_to_keyframes, volumetric_gain)
from .world import World, load_world


class PoseInCollision(ValueError):
    pass


class NoPath(RuntimeError):
    pass


class NoProgress(RuntimeError):
    pass


class ConfigInvalid(ValueError):
    pass


@dataclass
class MissionConfig:
    world: str = ""
    seed: int = 0
    dt: float = 0.1
    t_b: float = 240.0  # time budget, seconds
    s_vxl: float = 0.2
    gamma_d: float = 3.5
    tau_t: float = 1.0
    tau_r: float = 1.5707963267948966
    n_k: int = 10
    r_c: float = 10.0
    bandwidth: float = math.inf  # bytes/second
    v_nom_ground: float = 0.7
    v_nom_aerial: float = 1.0
    r_img_max: float = 5.0
    ground_rows: int = 16
    ground_cols: int = 90
    ground_fov_deg: float = 15.0
    aerial_rows: int = 16
    aerial_cols: int = 90
    aerial_fov_deg: float = 45.0
    ground_codec: str = "lossless"  # params file path or "lossless"
    aerial_codec: str = "lossless"
    noise_sigma: float = 0.0
    sense_period: float = 0.2
    plan_period: float = 2.0
    metrics_period: float = 1.0
    local_box: float = 4.0  # horizontal half-extent of the sampling box
    gain_range: float = 3.0
    v_max: int = 48
    k_nn: int = 5
    lam: float = 0.25
    ground_clearance: float = 0.6
    safety_factor: float = 2.0  # hard stop at t_b * safety_factor
    max_global_vertices: int = 600
    survey_radius: float = 1.25  # staging area pre-mapped around the start

    def validate(self) -> None:
        positive = ("dt", "t_b", "s_vxl", "gamma_d", "tau_t", "tau_r", "r_c",
                    "bandwidth", "v_nom_ground", "v_nom_aerial", "r_img_max",
                    "sense_period", "plan_period", "metrics_period",
                    "local_box", "gain_range", "ground_clearance",
                    "safety_factor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be > 0")
        for name in ("n_k", "ground_rows", "ground_cols", "aerial_rows",
                     "aerial_cols", "v_max", "k_nn", "max_global_vertices"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if self.survey_radius < 0:
            raise ConfigInvalid("survey_radius must be >= 0")
        if not self.world:
            raise ConfigInvalid("world path is required")

    def intrinsics(self, robot: str) -> LidarIntrinsics:
        fov = math.radians(getattr(self, f"{robot}_fov_deg"))
        return LidarIntrinsics(
            rows=getattr(self, f"{robot}_rows"),
            cols=getattr(self, f"{robot}_cols"),
            min_elevation=-fov, max_elevation=fov, max_range=self.r_img_max)

    def gain_intrinsics(self, robot: str) -> LidarIntrinsics:
        fov = math.radians(getattr(self, f"{robot}_fov_deg"))
        return LidarIntrinsics(rows=2, cols=8, min_elevation=-fov,
                               max_elevation=fov, max_range=self.gain_range)

    def planner(self) -> PlannerConfig:
        return PlannerConfig(v_max=self.v_max, k_nn=self.k_nn, lam=self.lam,
                             ground_clearance=self.ground_clearance)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float)
                         else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_mission_config(text: str) -> MissionConfig:
    """Line-based `key = value` parser; every key must name a config field."""
    types = {f.name: f.type for f in fields(MissionConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected key = value")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in types:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        try:
            if types[key] == "int":
                kwargs[key] = int(value)
            elif types[key] == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigInvalid(f"line {lineno}: bad value for {key}: {exc}")
    config = MissionConfig(**kwargs)
    config.validate()
    return config


def load_mission_config(path) -> MissionConfig:
    with open(path) as fh:
        return parse_mission_config(fh.read())


# ---------------------------------------------------------------- sensing


def simulate_lidar(world: World, pose: Pose, intr: LidarIntrinsics,
                   sigma: float = 0.0, rng=None) -> RangeImage:
    """Ray-cast every bin-center direction in the ground-truth grid."""
    vox = world.grid.world_to_voxel(pose.position)
    if not world.grid.in_bounds(vox) or world.grid.cells[tuple(vox)] != FREE:
        raise PoseInCollision(f"sensor pose {pose.position} not in free space")
    dirs = intr.ray_directions().reshape(-1, 3) @ pose.rotation_matrix().T
    ranges = first_hit_distances(world.grid, pose.position, dirs,
                                 intr.max_range)
    if sigma > 0.0:
        if rng is None:
            raise ValueError("noise requires a seeded rng")
        valid = np.isfinite(ranges)
        ranges[valid] = np.clip(ranges[valid] + rng.normal(0.0, sigma,
                                                           valid.sum()),
                                1e-6, intr.max_range)
    return RangeImage(intr, ranges.reshape(intr.rows, intr.cols))


# ----------------------------------------------------------------- motion


@dataclass
class _Robot:
    rid: int
    name: str
    pose: Pose
    v_nom: float
    intr: LidarIntrinsics
    gain_intr: LidarIntrinsics
    codec: object
    peer_codec: object
    mode: str
    own_map: OccupancyGrid
    peer_map: OccupancyGrid
    kfs: kfmod.KeyframeSet = None
    path: list = None
    active: bool = True
    returning: bool = False
    regroup: np.ndarray = None
    target: np.ndarray = None  # aerial goal handed over at deployment
    last_plan_t: float = -math.inf
    last_cloud: np.ndarray = None
    global_verts: list = field(default_factory=list)
    received: dict = field(default_factory=dict)  # peer seq -> Keyframe
    stuck_plans: int = 0
    plan_count: int = 0
    kf_raw_bytes: int = 0
    kf_latent_bytes: int = 0
    tx_bytes: int = 0
    rx_bytes: int = 0

    def __post_init__(self):
        if self.kfs is None:
            self.kfs = kfmod.KeyframeSet(self.rid)
        self._seen_keys = set()


def step_robot(state, dt: float):
    """Advance along the waypoint polyline at v_nom, facing travel."""
    if state.path is None:
        raise NoPath(f"robot {state.name} has no path")
    if dt == 0.0:
        return state
    remaining = state.v_nom * dt
    pos = state.pose.position.copy()
    heading = None
    while remaining > 1e-12 and state.path:
        seg = state.path[0] - pos
        dist = float(np.linalg.norm(seg))
        if dist <= remaining:
            pos = state.path.pop(0).copy()
            remaining -= dist
        else:
            pos = pos + seg * (remaining / dist)
            remaining = 0.0
        if dist > 1e-9:
            heading = seg
    if heading is not None and math.hypot(heading[0], heading[1]) > 1e-9:
        yaw = math.atan2(heading[1], heading[0])
    else:
        q = state.pose.orientation
        yaw = 2.0 * math.atan2(q[3], q[0])
    state.pose = Pose.from_yaw(pos, yaw)
    if not state.path:
        state.path = None
    return state


# ---------------------------------------------------------------- mission


GROUND, AERIAL = kfmod.GROUND, kfmod.AERIAL

_COLOC = struct.Struct("<7d")
_TARGET = struct.Struct("<3d")
_REGROUP = struct.Struct("<i")


def _load_codec(spec: str, intr: LidarIntrinsics):
    if spec == "lossless":
        return LosslessCodec(intr)
    return load_codec(spec)


def _jnum(x: float):
    return float(x) if math.isfinite(x) else "inf"


class Mission:
    def __init__(self, config: MissionConfig, world: World | None = None):
        config.validate()
        self.config = config
        self.world = world if world is not None else load_world(config.world)
        if abs(self.world.grid.voxel_size - config.s_vxl) > 1e-12:
            raise ConfigInvalid("s_vxl differs from the world's voxel size")
        g = self.world.grid
        start_vox = g.world_to_voxel(self.world.start.position)
        if g.cells[start_vox[0], start_vox[1], max(start_vox[2] - 1, 0)] != \
                OCCUPIED:
            raise ConfigInvalid("start pose has no ground support")

        ground_codec = _load_codec(config.ground_codec,
                                   config.intrinsics("ground"))
        aerial_codec = _load_codec(config.aerial_codec,
                                   config.intrinsics("aerial"))
        for name, cdc in (("ground", ground_codec), ("aerial", aerial_codec)):
            want = config.intrinsics(name)
            have = cdc.intrinsics
            if (have.rows, have.cols) != (want.rows, want.cols):
                raise ConfigInvalid(
                    f"{name} codec was trained for {have.rows}x{have.cols} "
                    f"images but the sensor is {want.rows}x{want.cols}")

        def blank():
            return OccupancyGrid.unknown(tuple(g.origin), g.dims, g.voxel_size)

        self.ground = _Robot(
            GROUND, "ground", self.world.start, config.v_nom_ground,
            config.intrinsics("ground"), config.gain_intrinsics("ground"),
            ground_codec, aerial_codec, GROUND_2_5D, blank(), blank())
        self.aerial = _Robot(
            AERIAL, "aerial", self.world.start, config.v_nom_aerial,
            config.intrinsics("aerial"), config.gain_intrinsics("aerial"),
            aerial_codec, ground_codec, AERIAL_3D, blank(), blank(),
            active=False)
        self.link = Link(LinkModel(r_c=config.r_c, bandwidth=config.bandwidth))
        self.pcfg = config.planner()
        self.phase = 1
        self.deploy_t = None
        self.deploy_pos = None
        self.trigger_fired = False
        self.timed_out = False
        self.end_t = None
        self.regroup_events = []
        self.metrics_rows = []
        self.t = 0.0
        self._step = 0
        self._sense_every = max(1, round(config.sense_period / config.dt))
        self._retry_backoff = min(5.0 * config.dt, config.plan_period)
        self._survey(self.ground)

    def _survey(self, r: _Robot) -> None:
        """Seed the staging area around the start pose from ground truth.

        A sensor with a narrow vertical field of view can never observe the
        headroom directly around its own footprint, so without a pre-mapped
        launch pad no edge out of the start pose would ever validate.
        """
        if self.config.survey_radius == 0.0:
            return
        g = self.world.grid
        sv = g.world_to_voxel(self.world.start.position)
        rad = int(math.ceil(self.config.survey_radius / g.voxel_size))
        height = self.pcfg.clearance_voxels(self.config.s_vxl) + 1
        x0, x1 = max(sv[0] - rad, 0), min(sv[0] + rad, g.dims[0] - 1)
        y0, y1 = max(sv[1] - rad, 0), min(sv[1] + rad, g.dims[1] - 1)
        z0, z1 = max(sv[2] - 1, 0), min(sv[2] + height, g.dims[2] - 1)
        patch = (slice(x0, x1 + 1), slice(y0, y1 + 1), slice(z0, z1 + 1))
        r.own_map.cells[patch] = g.cells[patch]

    # ------------------------------------------------------------ helpers

    def _other(self, r: _Robot) -> _Robot:
        return self.aerial if r is self.ground else self.ground

    def _seed(self, r: _Robot, salt: int) -> int:
        return (self.config.seed * 1000003 + r.rid * 65537 + salt) % (2 ** 63)

    def _send(self, channel: str, sender: _Robot, payload: bytes) -> bool:
        peer = self._other(sender)
        direction = "g2a" if sender.rid == GROUND else "a2g"
        ok = self.link.send(channel, direction, payload, self.t,
                            sender.pose.position, peer.pose.position)
        sender.tx_bytes += len(payload)
        return ok

    def _box(self, r: _Robot):
        g = self.world.grid
        b = self.config.local_box
        p = r.pose.position
        lo = np.array([p[0] - b, p[1] - b, g.origin[2]])
        hi = np.array([p[0] + b, p[1] + b,
                       g.origin[2] + g.dims[2] * g.voxel_size])
        return lo, hi

    def _remember(self, r: _Robot, positions) -> None:
        for p in positions:
            key = tuple(np.round(p, 6))
            if key not in r._seen_keys:
                r._seen_keys.add(key)
                r.global_verts.append(np.asarray(p, dtype=np.float64))
        overflow = len(r.global_verts) - self.config.max_global_vertices
        if overflow > 0:
            for p in r.global_verts[:overflow]:
                r._seen_keys.discard(tuple(np.round(p, 6)))
            del r.global_verts[:overflow]

    def _global_graph(self, r: _Robot):
        positions = [r.pose.position] + r.global_verts
        return knit_graph(r.own_map, positions, r.mode, self.pcfg,
                          chain=True)

    def _regroup_pos(self, r: _Robot):
        return r.regroup if r.regroup is not None else self.deploy_pos

    def _at_regroup(self, r: _Robot) -> bool:
        target = self._regroup_pos(r)
        if target is None:
            return False
        return (float(np.linalg.norm(r.pose.position - target))
                <= 2.0 * self.config.s_vxl)

    # ------------------------------------------------------------ sensing

    def _sense(self, r: _Robot) -> None:
        rng = None
        if self.config.noise_sigma > 0.0:
            rng = np.random.default_rng(
                [self.config.seed, r.rid, self._step])
        img = simulate_lidar(self.world, r.pose, r.intr,
                             self.config.noise_sigma, rng)
        cloud = unproject(img)
        integrate_cloud(r.own_map, r.pose, cloud)
        r.last_cloud = cloud
        kf = r.kfs.maybe_create(r.pose, cloud, self.t, self.config.tau_t,
                                self.config.tau_r, r.codec)
        if kf is not None:
            r.kf_raw_bytes += cloud.shape[0] * 12
            r.kf_latent_bytes += kf.wire_size
        if r.path is not None:
            # own observations can invalidate a previously free corridor
            clearance = self.pcfg.clearance_voxels(self.config.s_vxl)
            waypoints = [r.pose.position] + list(r.path)
            for a, b in zip(waypoints, waypoints[1:]):
                if not _edge_clear(r.own_map, a, b, r.mode, clearance):
                    r.path = None
                    break

    # ----------------------------------------------------------- planning

    def _plan(self, r: _Robot) -> None:
        cfg = self.config
        r.last_plan_t = self.t
        r.plan_count += 1
        self._remember(r, [r.pose.position])  # breadcrumb for return routing
        belief = merge(r.own_map, r.peer_map)
        try:
            graph = build_local_graph(r.own_map, r.pose, r.mode, self._box(r),
                                      self._seed(r, r.plan_count), self.pcfg)
        except RobotInCollision:
            r.stuck_plans += 1
            self._check_stuck(r)
            return
        best = best_path_and_gain(graph, belief, r.gain_intr, cfg.lam)
        self._remember(r, [graph.vertices[i] for i in best.path[1:]])
        # a root-only graph means sampling starved, not that the map is
        # exhausted -- keep sensing and try again shortly
        starved = graph.n < 2

        if self.phase == 1 and r is self.ground:
            if starved:
                r.path = None
                r.stuck_plans += 1
                self._check_stuck(r)
                return
            virtual = build_local_graph(r.own_map, r.pose, AERIAL_3D,
                                        self._box(r),
                                        self._seed(r, 10 ** 6 + r.plan_count),
                                        self.pcfg)
            _, phi_a = best_vertex_and_gain(
                virtual, belief, cfg.gain_intrinsics("aerial"))
            if deployment_trigger(best.gain, phi_a, cfg.gamma_d):
                self._deploy(virtual, belief)
                return
            self._follow(r, graph, best)
            return

        # phase 3: exchange, time-budget bookkeeping, regroup routing
        if in_range(r.pose.position, self._other(r).pose.position, cfg.r_c):
            self._exchange_keyframes(r)
            if r is self.ground and not r.returning:
                self._send_times(r)
        ggraph = self._global_graph(r)
        target = self._regroup_pos(r)
        t_home = times_to_keyframes(ggraph, [target], r.v_nom,
                                    2.0 * cfg.s_vxl)[0]
        homeward = t_home if math.isfinite(t_home) else 0.0
        if (r.returning
                or should_return(best.length / r.v_nom, homeward, self.t,
                                 cfg.t_b)):
            r.returning = True
            self._go_home(r, ggraph, target)
            return
        if starved:
            r.path = None
            r.stuck_plans += 1
            self._check_stuck(r)
            return
        if best.gain <= 0.0:
            # the local pocket is mapped out: hop to the best remaining
            # frontier along the global graph, or call the mission done
            if self._relocate(r, ggraph, belief):
                return
            r.returning = True
            self._go_home(r, ggraph, target)
            return
        if r.target is not None:
            if self._steer_to(r, graph, r.target):
                r.target = None
                return
            r.target = None
        self._follow(r, graph, best)

    def _follow(self, r: _Robot, graph, best) -> None:
        if len(best.path) > 1:
            r.path = [graph.vertices[i].copy() for i in best.path[1:]]
            r.stuck_plans = 0
        else:
            r.path = None

    def _relocate(self, r: _Robot, ggraph, belief) -> bool:
        """Route to the highest discounted-gain previously visited vertex."""
        if ggraph.n < 2:
            return False
        sp = shortest_paths(ggraph)
        best_v, best_score = -1, 0.0
        for v in range(1, ggraph.n):
            if not math.isfinite(sp.dist[v]) or sp.dist[v] <= 0.0:
                continue
            gain = volumetric_gain(belief, ggraph.vertices[v], r.gain_intr)
            score = gain * math.exp(-self.config.lam * sp.dist[v])
            if score > best_score:
                best_v, best_score = v, score
        if best_v < 0:
            return False
        r.path = [ggraph.vertices[i].copy() for i in sp.path_to(best_v)[1:]]
        r.stuck_plans = 0
        return True

    def _steer_to(self, r: _Robot, graph, goal) -> bool:
        """Route to the graph vertex nearest the goal; False when that is
        where the robot already stands."""
        sp = shortest_paths(graph)
        d = np.linalg.norm(graph.vertices - np.asarray(goal)[None, :], axis=1)
        d[~np.isfinite(sp.dist)] = np.inf
        j = int(np.argmin(d))
        if j == 0 or not math.isfinite(d[j]):
            return False
        r.path = [graph.vertices[i].copy() for i in sp.path_to(j)[1:]]
        return True

    def _go_home(self, r: _Robot, ggraph, target) -> None:
        if target is None or self._at_regroup(r):
            r.path = None
            r.stuck_plans = 0
            return
        if self._steer_to(r, ggraph, target):
            r.stuck_plans = 0
            return
        # no graph vertex beats standing still; try walking straight there
        clearance = self.pcfg.clearance_voxels(self.config.s_vxl)
        if _edge_clear(r.own_map, r.pose.position, np.asarray(target),
                       r.mode, clearance):
            r.path = [np.asarray(target, dtype=np.float64).copy()]
            r.stuck_plans = 0
            return
        # the knit graph can prune a whole region once newer scans break a
        # breadcrumb link; the map itself still knows the corridor, so fall
        # back to a lattice route before declaring ourselves stuck
        lattice = grid_path(r.own_map, r.pose.position, target, r.mode,
                            self.pcfg)
        if lattice is not None:
            r.path = lattice
            r.stuck_plans = 0
            return
        r.path = None
        r.stuck_plans += 1
        self._check_stuck(r)

    def _check_stuck(self, r: _Robot) -> None:
        if r.stuck_plans >= 20:
            raise NoProgress(
                f"robot {r.name} found no informative or homeward path "
                f"in {r.stuck_plans} consecutive plans at t={self.t:.1f}")

    # --------------------------------------------------------- deployment

    def _deploy(self, virtual, belief) -> None:
        cfg = self.config
        g, a = self.ground, self.aerial
        self.phase = 2
        self.trigger_fired = True
        self.deploy_t = self.t
        self.deploy_pos = g.pose.position.copy()
        a.pose = g.pose
        a.active = True
        target, _ = best_vertex_and_gain(virtual, belief,
                                         cfg.gain_intrinsics("aerial"))
        self._send("coloc", g, _COLOC.pack(0, 0, 0, 1, 0, 0, 0))
        if g.last_cloud is not None and g.last_cloud.size:
            self._send("dense_map", g,
                       np.ascontiguousarray(g.last_cloud,
                                            dtype="<f4").tobytes())
        for kf in g.kfs.latest(cfg.n_k):
            if self._send("keyframe", g, kfmod.serialize(kf)):
                g.kfs.mark_acked([kf.seq])
        self._send("target", g, _TARGET.pack(*target))
        self._log_metrics()  # one handshake row so the phase shows up
        self.phase = 3
        g.path = None  # replan next tick under phase-3 rules

    # ------------------------------------------------------- phase 3 comms

    def _exchange_keyframes(self, r: _Robot) -> None:
        for kf in r.kfs.unshared():
            if self._send("keyframe", r, kfmod.serialize(kf)):
                r.kfs.mark_acked([kf.seq])

    def _send_times(self, ground: _Robot) -> None:
        unshared = {kf.seq for kf in ground.kfs.unshared()}
        shared = [kf for kf in ground.kfs.frames if kf.seq not in unshared]
        if not shared:
            return
        graph = self._global_graph(ground)
        times = times_to_keyframes(graph,
                                   [kf.pose.position for kf in shared],
                                   ground.v_nom, 2.0 * self.config.s_vxl)
        seqs = [kf.seq for kf in shared]
        payload = struct.pack(f"<I{len(seqs)}I{len(seqs)}d", len(seqs),
                              *seqs, *times)
        self._send("times", ground, payload)

    def _handle(self, msg) -> None:
        receiver = self.aerial if msg.direction == "g2a" else self.ground
        sender = self._other(receiver)
        receiver.rx_bytes += len(msg.payload)
        if msg.channel == "keyframe":
            kf = kfmod.deserialize(msg.payload)
            kfmod.integrate_keyframe(receiver.peer_map, kf,
                                     receiver.peer_codec,
                                     expected_robot_id=sender.rid)
            receiver.received[kf.seq] = kf
        elif msg.channel == "target":
            receiver.target = np.array(_TARGET.unpack(msg.payload))
        elif msg.channel == "times":
            self._select_regroup(receiver, msg.payload)
        elif msg.channel == "regroup":
            (seq,) = _REGROUP.unpack(msg.payload)
            if seq >= 0:
                match = [kf for kf in receiver.kfs.frames if kf.seq == seq]
                if match:
                    receiver.regroup = match[0].pose.position
            else:
                receiver.regroup = None  # deployment-point fallback
        # coloc and dense_map are accounted stubs: frames already coincide

    def _select_regroup(self, aerial: _Robot, payload: bytes) -> None:
        if aerial.returning:
            return  # keep the agreed point stable once heading home
        (n,) = struct.unpack_from("<I", payload)
        seqs = list(struct.unpack_from(f"<{n}I", payload, 4))
        t_g = list(struct.unpack_from(f"<{n}d", payload, 4 + 4 * n))
        if any(seq not in aerial.received for seq in seqs):
            return  # keyframes still in flight; wait for the next offer
        frames = [aerial.received[seq] for seq in seqs]
        graph = self._global_graph(aerial)
        t_a = times_to_keyframes(graph, [kf.pose.position for kf in frames],
                                 aerial.v_nom, 2.0 * self.config.s_vxl)
        choice = select_regroup_point(t_g, t_a, frames)
        chosen_seq = choice.seq if choice is not None else -1
        aerial.regroup = (choice.pose.position if choice is not None
                          else None)
        self.regroup_events.append({
            "t": self.t,
            "seqs": seqs,
            "t_g": [_jnum(v) for v in t_g],
            "t_a": [_jnum(v) for v in t_a],
            "chosen": chosen_seq,
        })
        self._send("regroup", aerial, _REGROUP.pack(chosen_seq))

    # --------------------------------------------------------------- loop

    def _act(self, r: _Robot) -> None:
        if not r.active:
            return
        if self._step % self._sense_every == 0:
            self._sense(r)
        since = self.t - r.last_plan_t
        due = ((r.path is None and since >= self._retry_backoff - 1e-9)
               or since >= self.config.plan_period - 1e-9)
        if due:
            self._plan(r)
        if r.path is not None:
            step_robot(r, self.config.dt)

    def _log_metrics(self) -> None:
        for r in (self.ground, self.aerial):
            self.metrics_rows.append(
                (self.t, r.name, self.phase,
                 explored_volume(r.own_map), len(r.kfs),
                 r.tx_bytes, r.rx_bytes))

    def run(self):
        cfg = self.config
        metrics_every = max(1, round(cfg.metrics_period / cfg.dt))
        max_steps = int(math.ceil(cfg.t_b * cfg.safety_factor / cfg.dt))
        for step in range(max_steps + 1):
            self._step = step
            self.t = step * cfg.dt
            self._act(self.ground)
            if self.phase == 1:
                self.aerial.pose = self.ground.pose
            else:
                self._act(self.aerial)
            for msg in self.link.poll(self.t):
                self._handle(msg)
            if step % metrics_every == 0:
                self._log_metrics()
            if self.phase == 1 and self.t >= cfg.t_b:
                break  # trigger never fired: ground-only mission
            if self.phase == 3 and self._finished():
                break
        else:
            self.timed_out = True
        self.end_t = self.t
        self._log_metrics()
        return self._report()

    def _finished(self) -> bool:
        g, a = self.ground, self.aerial
        if not (g.returning and a.returning):
            return False
        if not (self._at_regroup(g) and self._at_regroup(a)):
            return False
        # final exchange at the regroup point until both watermarks close
        if in_range(g.pose.position, a.pose.position, self.config.r_c):
            self._exchange_keyframes(g)
            self._exchange_keyframes(a)
        return g.kfs.complete and a.kfs.complete and self.link.idle

    # ------------------------------------------------------------ outputs

    def _report(self) -> dict:
        g, a = self.ground, self.aerial
        combined = merge(g.own_map, a.own_map)
        channels = sorted(self.link.log.sent_bytes)
        report = {
            "config": {f.name: (v if isinstance(v, (str, int)) else _jnum(v))
                       for f in fields(self.config)
                       for v in (getattr(self.config, f.name),)},
            "seed": self.config.seed,
            "duration": self.end_t,
            "dt": self.config.dt,
            "trigger_fired": self.trigger_fired,
            "deploy_t": self.deploy_t,
            "timed_out": self.timed_out,
            "regroup_position": (None if self._regroup_pos(g) is None
                                 else [float(v) for v in self._regroup_pos(g)]),
            "regroup_events": self.regroup_events,
            "merged_similarity_vs_truth": occupancy_similarity(
                combined, self.world.grid),
            "traffic": {
                c: {
                    "sent": self.link.log.sent_bytes.get(c, 0),
                    "delivered": self.link.log.delivered_bytes.get(c, 0),
                    "dropped": self.link.log.dropped_bytes.get(c, 0),
                    "messages": self.link.log.sent_msgs.get(c, 0),
                } for c in channels
            },
            "robots": {},
        }
        for r in (g, a):
            report["robots"][r.name] = {
                "explored_m3": explored_volume(r.own_map),
                "keyframes": len(r.kfs),
                "watermark": r.kfs.watermark,
                "complete": r.kfs.complete,
                "received_keyframes": len(r.received),
                "kf_raw_bytes": r.kf_raw_bytes,
                "kf_latent_bytes": r.kf_latent_bytes,
                "bytes_tx": r.tx_bytes,
                "bytes_rx": r.rx_bytes,
                "final_position": [float(v) for v in r.pose.position],
            }
        return report

    def write_outputs(self, out_dir) -> None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        join = lambda name: os.path.join(out_dir, name)
        with open(join("mission.json"), "w") as fh:
            json.dump(self._report(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(join("metrics.csv"), "w") as fh:
            fh.write("t,robot,phase,explored_m3,keyframes,bytes_tx,bytes_rx\n")
            for t, name, phase, vol, nkf, tx, rx in self.metrics_rows:
                fh.write(f"{t!r},{name},{phase},{vol!r},{nkf},{tx},{rx}\n")
        self.link.log.write_csv(join("traffic.csv"))
        for r in (self.ground, self.aerial):
            kfmod.save_keyframe_log(join(f"{r.name}_keyframes.kfr"),
                                    r.kfs.frames)
            save_grid(r.own_map, join(f"{r.name}_map.vox"))
            save_grid(r.peer_map, join(f"{r.name}_peer_map.vox"))
        save_grid(merge(self.ground.own_map, self.aerial.own_map),
                  join("combined_map.vox"))


def run_mission(config: MissionConfig, out_dir=None,
                world: World | None = None):
    """Execute a full mission; returns the report dict (and writes the
    output tree when out_dir is given)."""
    mission = Mission(config, world=world)
    report = mission.run()
    if out_dir is not None:
        mission.write_outputs(out_dir)
    return report, mission
