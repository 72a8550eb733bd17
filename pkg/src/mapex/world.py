"""Ground-truth worlds: file format, procedural generator, reachability audits.

A world is a FREE/OCCUPIED voxel grid (no unknowns) plus a start pose and
named marks, stored as a layered-text grid with trailing annotation lines.
The generator emits sealed buildings: BSP-partitioned rooms per level joined
by doorways, levels joined only by a vertical shaft, so any upper level is
reachable by the aerial robot alone (a ground robot cannot climb more than
one voxel per step).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .grid import (FREE, OCCUPIED, UNKNOWN, OccupancyGrid, ParseError,
                   load_grid, save_grid)


@dataclass
class World:
    grid: OccupancyGrid  # ground truth: FREE/OCCUPIED only
    start: Pose
    marks: dict = field(default_factory=dict)  # name -> (3,) world point


@dataclass(frozen=True)
class WorldSpec:
    nx: int = 36
    ny: int = 30
    rooms: int = 3  # per level
    levels: int = 1
    level_height: int = 5  # free voxels per level
    voxel_size: float = 0.2
    door_width: int = 2
    shaft_size: int = 2
    min_room_side: int = 6
    with_steps: bool = False

    def __post_init__(self):
        if self.levels not in (1, 2):
            raise ValueError("levels must be 1 or 2")
        if self.rooms < 1 or self.nx < 10 or self.ny < 10:
            raise ValueError("world too small")
        if self.level_height < 4:
            raise ValueError("level_height must be >= 4")


# -------------------------------------------------------------------- I/O


def save_world(world: World, path) -> None:
    save_grid(world.grid, path)
    x, y, z = (float(v) for v in world.start.position)
    yaw = 2.0 * math.atan2(float(world.start.orientation[3]),
                           float(world.start.orientation[0]))
    with open(path, "a") as fh:
        fh.write(f"start: {x!r} {y!r} {z!r} {yaw!r}\n")
        for name, point in sorted(world.marks.items()):
            px, py, pz = (float(v) for v in point)
            fh.write(f"mark: {name} {px!r} {py!r} {pz!r}\n")


def load_world(path) -> World:
    grid = load_grid(path)
    if np.any(grid.cells == UNKNOWN):
        raise ParseError("world files must not contain unknown voxels")
    start = None
    marks = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("start:"):
                x, y, z, yaw = (float(v) for v in line.split()[1:5])
                start = Pose.from_yaw(np.array([x, y, z]), yaw)
            elif line.startswith("mark:"):
                parts = line.split()
                marks[parts[1]] = np.array([float(v) for v in parts[2:5]])
    if start is None:
        raise ParseError("world file has no start annotation")
    vox = grid.world_to_voxel(start.position)
    if not grid.in_bounds(vox) or grid.cells[tuple(vox)] != FREE:
        raise ParseError("start voxel is not free")
    return World(grid, start, marks)


# -------------------------------------------------------------- generator


def _partition(rng, x0, x1, y0, y1, rooms, min_side, door_width):
    """BSP split of [x0,x1)x[y0,y1) into rooms; walls are 1-voxel lines.

    Returns (leaves, walls); each wall is (axis, pos, olo, ohi, dlo, dhi)
    with a door gap [dlo, dhi) carved along the orthogonal axis.
    """
    leaves = [(x0, x1, y0, y1)]
    walls = []
    while len(leaves) < rooms:
        order = sorted(range(len(leaves)),
                       key=lambda i: (-(leaves[i][1] - leaves[i][0])
                                      * (leaves[i][3] - leaves[i][2]), i))
        split = None
        for i in order:
            lx0, lx1, ly0, ly1 = leaves[i]
            spans = [(lx1 - lx0, 0), (ly1 - ly0, 1)]
            spans.sort(reverse=True)
            for span, axis in spans:
                if span >= 2 * min_side + 1:
                    split = (i, axis)
                    break
            if split:
                break
        if split is None:
            break  # nothing splittable; fewer rooms than asked
        i, axis = split
        lx0, lx1, ly0, ly1 = leaves.pop(i)
        if axis == 0:
            pos = int(rng.integers(lx0 + min_side, lx1 - min_side))
            olo, ohi = ly0, ly1
            leaves.insert(i, (lx0, pos, ly0, ly1))
            leaves.append((pos + 1, lx1, ly0, ly1))
        else:
            pos = int(rng.integers(ly0 + min_side, ly1 - min_side))
            olo, ohi = lx0, lx1
            leaves.insert(i, (lx0, lx1, ly0, pos))
            leaves.append((lx0, lx1, pos + 1, ly1))
        dlo = int(rng.integers(olo, ohi - door_width + 1))
        walls.append((axis, pos, olo, ohi, dlo, dlo + door_width))
    return leaves, walls


def generate_world(spec: WorldSpec, seed: int) -> World:
    rng = np.random.default_rng(seed)
    s = spec.voxel_size
    h = spec.level_height
    nz = 1 + h + (1 + h if spec.levels == 2 else 0) + 1
    grid = OccupancyGrid.unknown((0.0, 0.0, 0.0), (spec.nx, spec.ny, nz), s)
    cells = grid.cells
    cells[:] = OCCUPIED  # carve free space out of solid rock
    zlo = {0: 1}
    if spec.levels == 2:
        zlo[1] = 1 + h + 1

    level_leaves = {}
    for lvl in range(spec.levels):
        z0 = zlo[lvl]
        cells[1:-1, 1:-1, z0:z0 + h] = FREE
        leaves, inner = _partition(rng, 1, spec.nx - 1, 1, spec.ny - 1,
                                   spec.rooms, spec.min_room_side,
                                   spec.door_width)
        level_leaves[lvl] = leaves
        for axis, pos, olo, ohi, dlo, dhi in inner:
            if axis == 0:
                cells[pos, olo:ohi, z0:z0 + h] = OCCUPIED
                cells[pos, dlo:dhi, z0:z0 + h] = FREE
            else:
                cells[olo:ohi, pos, z0:z0 + h] = OCCUPIED
                cells[dlo:dhi, pos, z0:z0 + h] = FREE

    marks = {}
    if spec.levels == 2:
        # the only inter-level opening: a vertical shaft the ground robot
        # cannot climb, punched through whatever walls cross its column
        lx0, lx1, ly0, ly1 = max(level_leaves[0],
                                 key=lambda r: (r[1] - r[0]) * (r[3] - r[2]))
        sx = int(rng.integers(lx0 + 1, lx1 - spec.shaft_size))
        sy = int(rng.integers(ly0 + 1, ly1 - spec.shaft_size))
        cells[sx:sx + spec.shaft_size, sy:sy + spec.shaft_size,
              1:zlo[1] + h] = FREE
        marks["shaft"] = grid.voxel_center(
            np.array([sx, sy, 1 + h])) + (spec.shaft_size - 1) * s / 2.0 * np.array([1, 1, 0])

    if spec.with_steps and h >= 5:
        # two one-voxel steps up to a platform along a ground-floor wall
        lx0, lx1, ly0, ly1 = min(level_leaves[0],
                                 key=lambda r: (r[1] - r[0]) * (r[3] - r[2]))
        if lx1 - lx0 >= 8:
            cells[lx0:lx0 + 2, ly0:ly0 + 3, 1:3] = OCCUPIED  # platform, 2 high
            cells[lx0 + 2:lx0 + 3, ly0:ly0 + 3, 1:2] = OCCUPIED  # step, 1 high
            marks["platform"] = grid.voxel_center(np.array([lx0, ly0 + 1, 3]))

    # start: center of the largest ground-floor room
    lx0, lx1, ly0, ly1 = max(level_leaves[0],
                             key=lambda r: (r[1] - r[0]) * (r[3] - r[2]))
    sx, sy = (lx0 + lx1) // 2, (ly0 + ly1) // 2
    if cells[sx, sy, 1] != FREE:  # may collide with the shaft walls' gap
        free = np.argwhere(cells[lx0:lx1, ly0:ly1, 1] == FREE)
        sx, sy = free[0][0] + lx0, free[0][1] + ly0
    start = Pose.from_yaw(grid.voxel_center(np.array([sx, sy, 1])), 0.0)

    world = World(grid, start, marks)
    reach = aerial_reachable(world)
    if not np.array_equal(reach, cells == FREE):
        raise AssertionError("generated world is not fully aerial-connected")
    return world


# ----------------------------------------------------------------- audits


def aerial_reachable(world: World) -> np.ndarray:
    """Free voxels 6-connected to the start voxel."""
    from scipy import ndimage

    free = world.grid.cells == FREE
    labels, _ = ndimage.label(free, structure=ndimage.generate_binary_structure(3, 1))
    seed = tuple(world.grid.world_to_voxel(world.start.position))
    return labels == labels[seed]


def ground_reachable(world: World, clearance: int = 3) -> np.ndarray:
    """Support voxels a walking robot can reach with one-voxel steps.

    A support voxel is free, sits on an occupied voxel, and has `clearance`
    free voxels of headroom (itself included).  Moves go to 4-neighbor
    columns whose support differs by at most one voxel.
    """
    cells = world.grid.cells
    nx, ny, nz = world.grid.dims
    free = cells == FREE
    below_occ = np.zeros_like(free)
    below_occ[:, :, 1:] = cells[:, :, :-1] == OCCUPIED
    head = np.ones_like(free)
    for dz in range(clearance):
        shifted = np.zeros_like(free)
        shifted[:, :, : nz - dz] = free[:, :, dz:]
        head &= shifted
    support = free & below_occ & head

    start = world.grid.world_to_voxel(world.start.position)
    reach = np.zeros_like(support)
    if not support[tuple(start)]:
        return reach
    reach[tuple(start)] = True
    todo = deque([tuple(start)])
    while todo:
        x, y, z = todo.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            cx, cy = x + dx, y + dy
            if not (0 <= cx < nx and 0 <= cy < ny):
                continue
            for dz in (0, 1, -1):
                cz = z + dz
                if 0 <= cz < nz and support[cx, cy, cz] and not reach[cx, cy, cz]:
                    reach[cx, cy, cz] = True
                    todo.append((cx, cy, cz))
    return reach


def aerial_only_free_count(world: World, clearance: int = 3) -> int:
    """Free voxels only the aerial robot can get near: reachable by air but
    standing over no column the ground robot can walk."""
    walk = ground_reachable(world, clearance)
    covered_col = walk.any(axis=2)
    fly = aerial_reachable(world)
    return int(np.count_nonzero(fly & ~covered_col[:, :, None]))
