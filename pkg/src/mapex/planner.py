"""Graph-based exploration planning over occupancy grids.

Local graphs are rejection-sampled and k-nn wired inside a moving box; the
ground variant projects samples onto supported, clearance-checked floor
voxels and limits edges to one-voxel steps.  Exploration gain counts unknown
voxels visible from a vertex; paths are scored with a distance-discounted
sum of vertex gains.  Deployment, regrouping, and return decisions are the
small closed-form rules layered on top.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import LidarIntrinsics, Pose
from .grid import FREE, OCCUPIED, UNKNOWN, OccupancyGrid, raycast, traverse

GROUND_2_5D = "ground"
AERIAL_3D = "aerial"


class RobotInCollision(ValueError):
    pass


class EmptyKeyframeSet(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    v_max: int = 200
    k_nn: int = 5
    lam: float = 0.25  # 1/m path-distance discount
    ground_clearance: float = 0.6  # column that must be free above support
    sample_attempts: int = 30  # rejection attempts per requested vertex

    def clearance_voxels(self, s_vxl: float) -> int:
        return max(1, int(round(self.ground_clearance / s_vxl)))


@dataclass
class PlanGraph:
    vertices: np.ndarray  # (N, 3), vertex 0 is the robot
    edges: list  # (a, b, length)
    mode: str

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    def adjacency(self):
        adj = [[] for _ in range(self.n)]
        for a, b, w in self.edges:
            adj[a].append((b, w))
            adj[b].append((a, w))
        for lst in adj:
            lst.sort()
        return adj


@dataclass
class ShortestPaths:
    dist: np.ndarray
    parent: np.ndarray

    def path_to(self, v: int) -> list:
        if not np.isfinite(self.dist[v]):
            return []
        path = [v]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]


@dataclass
class GainedPath:
    path: list
    length: float
    gain: float


# -------------------------------------------------------------- building


def _support_voxel(grid: OccupancyGrid, ix: int, iy: int, iz: int,
                   clearance: int):
    """Walk down a column to the free voxel resting on occupied ground.

    Returns the support voxel z index, or None when the column has no
    verified floor below (unknown underfoot rejects the sample) or the
    clearance stack above the support is not fully free.
    """
    nz = grid.dims[2]
    for k in range(iz, -1, -1):
        state = grid.cells[ix, iy, k]
        if state == OCCUPIED:
            top = k + clearance
            if k + 1 >= nz or top >= nz:
                return None
            column = grid.cells[ix, iy, k + 1:top + 1]
            if np.all(column == FREE):
                return k + 1
            return None
        if state == UNKNOWN:
            return None
    return None


def _edges_clear_batch(grid: OccupancyGrid, a, b, mode: str,
                       clearance: int) -> np.ndarray:
    """Vectorized _edge_clear over row-aligned segment endpoints."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    ok = np.ones(len(a), dtype=bool)
    if mode == GROUND_2_5D:
        ok &= np.abs(a[:, 2] - b[:, 2]) <= grid.voxel_size + 1e-9
    rows = np.nonzero(ok)[0]
    if rows.size == 0:
        return ok
    voxels, _, counts, reached = traverse(grid, a[rows], b[rows])
    lanes = np.arange(voxels.shape[1])[None, :] < counts[:, None]
    dims = np.asarray(grid.dims)
    clipped = np.clip(voxels, 0, dims - 1)  # garbage lanes are masked out
    cells = grid.cells
    states = cells[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    good = reached & np.all((states == FREE) | ~lanes, axis=1)
    if mode == GROUND_2_5D and clearance > 1:
        nz = grid.dims[2]
        x, y = clipped[..., 0], clipped[..., 1]
        for dz in range(1, clearance):
            z = voxels[..., 2] + dz
            st = cells[x, y, np.clip(z, 0, nz - 1)]
            bad = ((z >= nz) | (st != FREE)) & lanes
            good &= ~bad.any(axis=1)
    ok[rows] = good
    return ok


def _edge_clear(grid: OccupancyGrid, a, b, mode: str, clearance: int) -> bool:
    """Straight segment stays in free space (plus headroom for ground)."""
    return bool(_edges_clear_batch(grid, a, b, mode, clearance)[0])


def path_is_free(graph: PlanGraph, grid: OccupancyGrid, path,
                 config: PlannerConfig) -> bool:
    """Re-check a vertex path voxel-by-voxel against the grid."""
    clearance = config.clearance_voxels(grid.voxel_size)
    for a, b in zip(path, path[1:]):
        if not _edge_clear(grid, graph.vertices[a], graph.vertices[b],
                           graph.mode, clearance):
            return False
    return True


def build_local_graph(grid: OccupancyGrid, pose: Pose, mode: str,
                      local_bounds, seed: int,
                      config: PlannerConfig = PlannerConfig()) -> PlanGraph:
    """Sample a dense collision-free graph around the robot.

    local_bounds is ((xlo, ylo, zlo), (xhi, yhi, zhi)) in world coordinates.
    Vertices are accepted only in free voxels (ground mode: projected to a
    supported voxel with clearance); each vertex is wired to at most k_nn
    nearest neighbors whose connecting segments are collision-free, and only
    the component containing the robot is kept.
    """
    root = np.asarray(pose.position, dtype=np.float64)
    root_vox = grid.world_to_voxel(root)
    if not grid.in_bounds(root_vox) or grid.cells[tuple(root_vox)] != FREE:
        raise RobotInCollision(f"robot voxel at {root} is not free")

    lo = np.asarray(local_bounds[0], dtype=np.float64)
    hi = np.asarray(local_bounds[1], dtype=np.float64)
    clearance = config.clearance_voxels(grid.voxel_size)
    rng = np.random.default_rng(seed)

    verts = [root]
    attempts = config.v_max * config.sample_attempts
    for _ in range(attempts):
        if len(verts) - 1 >= config.v_max:
            break
        p = rng.uniform(lo, hi)
        vox = grid.world_to_voxel(p)
        if not grid.in_bounds(vox):
            continue
        if grid.cells[tuple(vox)] != FREE:
            continue
        if mode == GROUND_2_5D:
            kz = _support_voxel(grid, vox[0], vox[1], vox[2], clearance)
            if kz is None:
                continue
            p = np.array([p[0], p[1], grid.origin[2] + (kz + 0.5) * grid.voxel_size])
        verts.append(p)

    vertices = np.asarray(verts)
    edges = _knn_edges(grid, vertices, mode, config)
    return _root_component(PlanGraph(vertices, edges, mode))


def _knn_edges(grid: OccupancyGrid, vertices: np.ndarray, mode: str,
               config: PlannerConfig) -> list:
    clearance = config.clearance_voxels(grid.voxel_size)
    n = len(vertices)
    edges = []
    seen = set()
    if n > 1:
        delta = vertices[:, None, :] - vertices[None, :, :]
        dmat = np.linalg.norm(delta, axis=2)
        # which neighbors get attempted never depends on check outcomes,
        # so all candidate segments go through one batched collision pass
        attempts = []
        for i in range(n):
            order = np.lexsort((np.arange(n), dmat[i]))
            js = [j for j in order if j != i][: config.k_nn]
            attempts.extend((i, j) for j in js)
        pairs = np.asarray(attempts, dtype=np.int64).reshape(-1, 2)
        clear = _edges_clear_batch(grid, vertices[pairs[:, 0]],
                                   vertices[pairs[:, 1]], mode, clearance)
        for (i, j), passed in zip(attempts, clear):
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            if passed:
                seen.add(key)
                edges.append((key[0], key[1], float(dmat[i, j])))
    return edges


def knit_graph(grid: OccupancyGrid, positions, mode: str,
               config: PlannerConfig = PlannerConfig(),
               chain: bool = False) -> PlanGraph:
    """Wire explicit vertex positions (vertex 0 = the robot) into a k-nn
    collision-checked graph, keeping the robot's component.

    This builds the accumulated global graph over previously accepted path
    vertices: no sampling, no free-voxel requirement — edges are re-checked
    against the current grid, so stale vertices simply end up disconnected.
    With chain=True consecutive positions are additionally attempted as
    edges, preserving a traversed trajectory even where k-nn would crowd
    out its long links.
    """
    vertices = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    edges = _knn_edges(grid, vertices, mode, config)
    if chain and len(vertices) > 2:
        seen = {(a, b) for a, b, _ in edges}
        clearance = config.clearance_voxels(grid.voxel_size)
        pairs = [(i, i + 1) for i in range(1, len(vertices) - 1)
                 if (i, i + 1) not in seen]
        if pairs:
            idx = np.asarray(pairs, dtype=np.int64)
            clear = _edges_clear_batch(grid, vertices[idx[:, 0]],
                                       vertices[idx[:, 1]], mode, clearance)
            for (a, b), passed in zip(pairs, clear):
                if passed:
                    edges.append((a, b, float(
                        np.linalg.norm(vertices[a] - vertices[b]))))
    return _root_component(PlanGraph(vertices, edges, mode))


def _root_component(graph: PlanGraph) -> PlanGraph:
    adj = graph.adjacency()
    keep = np.zeros(graph.n, dtype=bool)
    stack = [0]
    keep[0] = True
    while stack:
        v = stack.pop()
        for u, _ in adj[v]:
            if not keep[u]:
                keep[u] = True
                stack.append(u)
    if keep.all():
        return graph
    remap = -np.ones(graph.n, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    edges = [(int(remap[a]), int(remap[b]), w) for a, b, w in graph.edges
             if keep[a] and keep[b]]
    return PlanGraph(graph.vertices[keep], edges, graph.mode)


def grid_path(grid: OccupancyGrid, start, goal, mode: str,
              config: PlannerConfig = PlannerConfig()):
    """Breadth-first route over the voxel lattice from start to goal.

    Fallback for when the sparse graphs lose connectivity to a known-free
    goal: stale vertices pruned from a knit graph can orphan a whole region
    even though the map itself still holds a corridor.  Every lattice step
    is validated with the same segment rules as graph edges (ground steps
    additionally require resting on occupied support), so a returned route
    is traversable under the ordinary motion constraints.

    Returns world waypoints starting at the start voxel's center and ending
    at the exact goal point, or None when no free corridor exists.
    """
    clearance = config.clearance_voxels(grid.voxel_size)
    dims = np.asarray(grid.dims, dtype=np.int64)
    sv = grid.world_to_voxel(start)
    gv = grid.world_to_voxel(goal)
    if not (bool(grid.in_bounds(sv)) and bool(grid.in_bounds(gv))):
        return None
    goal_pt = np.asarray(goal, dtype=np.float64).copy()
    if np.array_equal(sv, gv):
        # pose and goal share a voxel; both legs stay inside it
        return [grid.voxel_center(sv), goal_pt]
    if mode == GROUND_2_5D:
        steps = np.asarray([(dx, dy, dz)
                            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                            for dz in (-1, 0, 1)], dtype=np.int64)
    else:
        steps = np.asarray([(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                            (0, -1, 0), (0, 0, 1), (0, 0, -1)],
                           dtype=np.int64)

    def flat(idx):
        return (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]

    s_flat, g_flat = int(flat(sv)), int(flat(gv))
    parent = np.full(int(dims.prod()), -1, dtype=np.int64)
    visited = np.zeros(int(dims.prod()), dtype=bool)
    visited[s_flat] = True
    frontier = sv.reshape(1, 3)
    while frontier.size and not visited[g_flat]:
        cand = (frontier[:, None, :] + steps[None, :, :]).reshape(-1, 3)
        src = np.repeat(frontier, len(steps), axis=0)
        ok = np.all((cand >= 0) & (cand < dims[None, :]), axis=1)
        cand, src = cand[ok], src[ok]
        cf = flat(cand)
        fresh = ~visited[cf]
        cand, src, cf = cand[fresh], src[fresh], cf[fresh]
        if mode == GROUND_2_5D and cand.size:
            grounded = cand[:, 2] >= 1
            below = np.maximum(cand[:, 2] - 1, 0)
            grounded &= (grid.cells[cand[:, 0], cand[:, 1], below]
                         == OCCUPIED)
            cand, src, cf = cand[grounded], src[grounded], cf[grounded]
        if cf.size == 0:
            break
        clear = _edges_clear_batch(grid, grid.voxel_center(src),
                                   grid.voxel_center(cand), mode, clearance)
        cand, src, cf = cand[clear], src[clear], cf[clear]
        if cf.size == 0:
            break
        uniq, first = np.unique(cf, return_index=True)
        visited[uniq] = True
        parent[uniq] = flat(src[first])
        frontier = cand[first]
    if not visited[g_flat]:
        return None
    chain = [g_flat]
    while chain[-1] != s_flat:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    idx = np.asarray(chain, dtype=np.int64)
    vox = np.stack([idx // (dims[1] * dims[2]),
                    (idx // dims[2]) % dims[1],
                    idx % dims[2]], axis=1)
    path = [grid.voxel_center(v) for v in vox]
    path.append(goal_pt)  # last center and goal share the goal voxel
    return path


# --------------------------------------------------------------- routing


def shortest_paths(graph: PlanGraph, source: int = 0) -> ShortestPaths:
    """Dijkstra tree from the source; ties settle the smaller vertex first."""
    n = graph.n
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    adj = graph.adjacency()
    done = np.zeros(n, dtype=bool)
    heap = [(0.0, source)]
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for u, w in adj[v]:
            nd = d + w
            if nd < dist[u]:
                dist[u] = nd
                parent[u] = v
                heapq.heappush(heap, (nd, u))
    return ShortestPaths(dist, parent)


# ------------------------------------------------------------------ gain


_GAIN_TABLES: dict = {}


def _gain_tables(range_vox: float, min_elev: float, max_elev: float):
    """Candidate voxel offsets within range/FoV plus, per candidate, the
    offsets of the voxels a center-to-center ray crosses first (padded
    matrix + per-row length).  Built once per (range, FoV) by tracing rays
    on a canonical grid so the geometry is exactly the scalar raycast's."""
    key = (round(range_vox, 9), round(min_elev, 9), round(max_elev, 9))
    cached = _GAIN_TABLES.get(key)
    if cached is not None:
        return cached

    n = int(math.floor(range_vox))
    offsets = []
    for dx in range(-n, n + 1):
        for dy in range(-n, n + 1):
            for dz in range(-n, n + 1):
                if dx == dy == dz == 0:
                    continue
                r = math.sqrt(dx * dx + dy * dy + dz * dz)
                if r > range_vox:
                    continue
                elev = math.asin(dz / r)
                if not (min_elev <= elev <= max_elev):
                    continue
                offsets.append((dx, dy, dz))
    offsets.sort()
    off = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)

    probe = OccupancyGrid.unknown((0.0, 0.0, 0.0), (2 * n + 3,) * 3, 1.0)
    center = np.full((max(len(offsets), 1), 3), n + 1.5)
    voxels, _, counts, _ = traverse(probe, center,
                                    center + off.astype(np.float64))
    plen = np.maximum(counts - 2, 0)  # strip the vertex and candidate voxels
    lmax = int(plen.max()) if len(offsets) else 0
    prefix = np.zeros((len(offsets), lmax, 3), dtype=np.int64)
    lanes = np.arange(lmax)[None, :] < plen[:, None]
    prefix[lanes] = voxels[:, 1:lmax + 1][lanes] - (n + 1)

    tables = (off, prefix, plen)
    _GAIN_TABLES[key] = tables
    return tables


def volumetric_gain(grid: OccupancyGrid, vertex, sensor: LidarIntrinsics) -> int:
    """Unknown voxels within sensor range/FoV seen from the vertex's voxel.

    A candidate counts when the straight voxel path from the vertex's voxel
    center to the candidate's center crosses no occupied voxel first.
    """
    offsets, prefix, plen = _gain_tables(
        sensor.max_range / grid.voxel_size,
        sensor.min_elevation, sensor.max_elevation)
    if offsets.shape[0] == 0:
        return 0
    v = grid.world_to_voxel(vertex)
    dims = np.asarray(grid.dims)

    cand = v[None, :] + offsets
    inb = np.all((cand >= 0) & (cand < dims), axis=1)
    unknown = np.zeros(len(offsets), dtype=bool)
    c = cand[inb]
    unknown[inb] = grid.cells[c[:, 0], c[:, 1], c[:, 2]] == UNKNOWN

    rows = np.nonzero(unknown)[0]  # occlusion only decides unknown candidates
    if rows.size == 0:
        return 0
    pref = v[None, None, :] + prefix[rows]
    live = np.arange(prefix.shape[1])[None, :] < plen[rows, None]
    live &= np.all((pref >= 0) & (pref < dims), axis=2)
    clipped = np.clip(pref, 0, dims - 1)
    occ = grid.cells[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    blocked = ((occ == OCCUPIED) & live).any(axis=1)

    return int(rows.size - np.count_nonzero(blocked))


def best_tree_path(graph: PlanGraph, sp: ShortestPaths, gains,
                   lam: float) -> GainedPath:
    """Pick the Dijkstra-tree path maximizing discounted cumulative gain.

    Ties prefer the shorter path, then the smaller end-vertex index.
    """
    gains = np.asarray(gains, dtype=np.float64)
    n = graph.n
    phi = np.zeros(n)
    reachable = np.isfinite(sp.dist)
    order = sorted(np.nonzero(reachable)[0], key=lambda v: (sp.dist[v], v))
    for v in order:
        base = phi[sp.parent[v]] if sp.parent[v] >= 0 else 0.0
        phi[v] = base + gains[v] * math.exp(-lam * sp.dist[v])
    best = min(order, key=lambda v: (-phi[v], sp.dist[v], v))
    return GainedPath(sp.path_to(best), float(sp.dist[best]), float(phi[best]))


def best_path_and_gain(graph: PlanGraph, grid: OccupancyGrid,
                       sensor: LidarIntrinsics, lam: float) -> GainedPath:
    gains = [volumetric_gain(grid, graph.vertices[i], sensor)
             for i in range(graph.n)]
    return best_tree_path(graph, shortest_paths(graph), gains, lam)


def best_vertex_and_gain(graph: PlanGraph, grid: OccupancyGrid,
                         sensor: LidarIntrinsics):
    """Single vertex with the highest raw gain (no path discount)."""
    gains = [volumetric_gain(grid, graph.vertices[i], sensor)
             for i in range(graph.n)]
    best = min(range(graph.n), key=lambda v: (-gains[v], v))
    return graph.vertices[best].copy(), float(gains[best])


# ------------------------------------------------------------- decisions


def deployment_trigger(phi_g: float, phi_a: float, gamma_d: float) -> bool:
    """Deploy when the ground gain falls to e^-gamma of the aerial estimate."""
    if phi_g < 0 or phi_a < 0:
        raise ValueError("gains must be >= 0")
    if gamma_d <= 0:
        raise ValueError("gamma_d must be > 0")
    return phi_g <= math.exp(-gamma_d) * phi_a


def times_to_keyframes(graph: PlanGraph, keyframe_positions, v_nom: float,
                       attach_radius: float) -> np.ndarray:
    """Travel time from the robot (vertex 0) to each keyframe's pose.

    A keyframe is served by the graph vertex nearest its pose, provided
    that vertex lies within attach_radius; the time is the shortest-path
    distance to it over v_nom, +inf when no vertex is near or the nearest
    one is unreachable.
    """
    if v_nom <= 0:
        raise ValueError("v_nom must be > 0")
    positions = np.asarray(keyframe_positions, dtype=np.float64).reshape(-1, 3)
    sp = shortest_paths(graph)
    out = np.full(positions.shape[0], np.inf)
    for i, p in enumerate(positions):
        d = np.linalg.norm(graph.vertices - p[None, :], axis=1)
        j = int(np.argmin(d))
        if d[j] <= attach_radius:
            out[i] = float(sp.dist[j]) / v_nom
    return out


def select_regroup_point(times_ground, times_aerial, keyframes):
    """Keyframe minimizing the later arrival of the two robots (Eq.-style
    argmin of pairwise max); ties take the smaller index.  Returns None when
    either robot can reach no keyframe (callers fall back to the deployment
    point)."""
    tg = np.asarray(times_ground, dtype=np.float64).reshape(-1)
    ta = np.asarray(times_aerial, dtype=np.float64).reshape(-1)
    if len(keyframes) == 0:
        raise EmptyKeyframeSet("no keyframes to regroup at")
    if not (len(tg) == len(ta) == len(keyframes)):
        raise ValueError("times and keyframes must align")
    if np.all(np.isinf(tg)) or np.all(np.isinf(ta)):
        return None
    worst = np.maximum(tg, ta)
    k = int(np.argmin(worst))
    if not np.isfinite(worst[k]):
        return None  # no keyframe both robots can reach
    return keyframes[k]


def should_return(next_path_time: float, return_time: float, elapsed: float,
                  t_b: float) -> bool:
    """Head home when finishing the next path would blow the time budget."""
    if min(next_path_time, return_time, elapsed, t_b) < 0:
        raise ValueError("times must be >= 0")
    return elapsed + next_path_time + return_time > t_b


# ------------------------------------------------------------------ dump


def save_graph_csv(graph: PlanGraph, gains, vertices_path, edges_path) -> None:
    gains = np.asarray(gains, dtype=np.float64).reshape(-1)
    with open(vertices_path, "w") as fh:
        fh.write("id,x,y,z,gain\n")
        for i, (x, y, z) in enumerate(graph.vertices):
            fh.write(f"{i},{float(x)!r},{float(y)!r},{float(z)!r},"
                     f"{float(gains[i])!r}\n")
    with open(edges_path, "w") as fh:
        fh.write("a,b,length\n")
        for a, b, w in graph.edges:
            fh.write(f"{a},{b},{float(w)!r}\n")
