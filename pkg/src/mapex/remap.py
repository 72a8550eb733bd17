"""Voxel-aware range image generation and dataset construction.

A raw range image is pushed through a throwaway occupancy grid centered on
the sensor and re-rendered: every pixel ray reports the distance to the entry
point of the first occupied voxel, or goes invalid when it reaches nothing.
The remapped image is what the compressor is trained to reproduce, so the
codec spends no capacity on detail the downstream voxel map cannot retain.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .geometry import LidarIntrinsics, Pose, RangeImage, unproject
from .grid import OccupancyGrid, first_hit_distances, integrate_cloud

SCAN_MAGIC = b"RIM0"
PAIR_MAGIC = b"RIMG"
SCAN_SUFFIX = ".rim"
PAIR_SUFFIX = ".rimg"


class EmptyDataset(ValueError):
    pass


class CorruptFile(ValueError):
    pass


def local_grid(intr_max_range: float, s_vxl: float) -> OccupancyGrid:
    # Sensor sits exactly at the center voxel's center so results do not
    # depend on where the sensor falls within some global lattice phase.
    n = math.ceil((intr_max_range + s_vxl) / s_vxl)
    origin = np.full(3, -(n + 0.5) * s_vxl)
    return OccupancyGrid.unknown(origin, (2 * n + 1,) * 3, s_vxl)


def voxel_aware_remap(img: RangeImage, s_vxl: float) -> RangeImage:
    """Re-render a range image as distances to first occupied voxel entry.

    All pixel rays are re-traced, including originally invalid ones: a ray
    that returned nothing can still cross voxels occupied by neighboring
    returns, and reporting those only adds true occupancy information.

    Reported distances are nudged a hair past the entry face; a point at the
    exact face distance voxelizes into the neighbor voxel for half the
    crossing directions, which would let a second remap drift by whole
    voxels instead of staying put.
    """
    if s_vxl <= 0:
        raise ValueError("s_vxl must be > 0")
    intr = img.intrinsics
    grid = local_grid(intr.max_range, s_vxl)
    cloud = unproject(img)
    if cloud.shape[0]:
        integrate_cloud(grid, Pose.identity(), cloud)
    dirs = intr.ray_directions().reshape(-1, 3)
    dist = first_hit_distances(grid, np.zeros(3), dirs, intr.max_range)
    dist = np.minimum(dist + 1e-4 * s_vxl, intr.max_range)
    return RangeImage(intr, dist.reshape(intr.rows, intr.cols).astype(np.float32))


# ----------------------------------------------------------------- file io

# pair files: magic, H, W, max_range — the codec needs no angles
_PAIR_HEAD = struct.Struct("<4sHHf")
# scan logs additionally carry the vertical FoV so they can be remapped;
# elevations are f64 so reloaded ray directions are bit-identical
_SCAN_HEAD = struct.Struct("<4sHHddf")


def _check_shape(base: LidarIntrinsics, rows, cols):
    if (base.rows, base.cols) != (rows, cols):
        raise CorruptFile(
            f"stored image is {rows}x{cols}, expected {base.rows}x{base.cols}"
        )
    return base


def save_scan(path, img: RangeImage) -> None:
    intr = img.intrinsics
    with open(path, "wb") as fh:
        fh.write(_SCAN_HEAD.pack(SCAN_MAGIC, intr.rows, intr.cols,
                                 intr.min_elevation, intr.max_elevation,
                                 intr.max_range))
        fh.write(img.ranges.astype("<f4").tobytes())


def load_scan(path, intrinsics: LidarIntrinsics | None = None) -> RangeImage:
    raw = Path(path).read_bytes()
    if len(raw) < _SCAN_HEAD.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, rows, cols, lo, hi, max_range = _SCAN_HEAD.unpack_from(raw)
    if magic != SCAN_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    want = _SCAN_HEAD.size + 4 * rows * cols
    if len(raw) != want:
        raise CorruptFile(f"{path}: expected {want} bytes, got {len(raw)}")
    if intrinsics is None:
        intr = LidarIntrinsics(rows, cols, lo, hi, max_range)
    else:
        intr = _check_shape(intrinsics, rows, cols)
    ranges = np.frombuffer(raw, dtype="<f4", offset=_SCAN_HEAD.size)
    return RangeImage(intr, ranges.reshape(rows, cols))


def save_pair(path, raw_img: RangeImage, remapped: RangeImage) -> None:
    intr = raw_img.intrinsics
    if remapped.ranges.shape != raw_img.ranges.shape:
        raise ValueError("raw and remapped images differ in shape")
    with open(path, "wb") as fh:
        fh.write(_PAIR_HEAD.pack(PAIR_MAGIC, intr.rows, intr.cols,
                                 intr.max_range))
        fh.write(raw_img.ranges.astype("<f4").tobytes())
        fh.write(remapped.ranges.astype("<f4").tobytes())


def load_pair(path, intrinsics: LidarIntrinsics | None = None):
    raw = Path(path).read_bytes()
    if len(raw) < _PAIR_HEAD.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, rows, cols, max_range = _PAIR_HEAD.unpack_from(raw)
    if magic != PAIR_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    n = rows * cols
    want = _PAIR_HEAD.size + 8 * n
    if len(raw) != want:
        raise CorruptFile(f"{path}: expected {want} bytes, got {len(raw)}")
    if intrinsics is None:
        # angles are not stored; a symmetric stand-in keeps the pair usable
        # for codec work, which never looks at directions
        intr = LidarIntrinsics(rows, cols, -math.pi / 4, math.pi / 4, max_range)
    else:
        intr = _check_shape(intrinsics, rows, cols)
    flat = np.frombuffer(raw, dtype="<f4", offset=_PAIR_HEAD.size)
    x = RangeImage(intr, flat[:n].reshape(rows, cols))
    xv = RangeImage(intr, flat[n:].reshape(rows, cols))
    return x, xv


# ----------------------------------------------------------------- dataset


def build_dataset(scan_dir, s_vxl: float, out_dir) -> list[Path]:
    """Remap every logged scan in scan_dir into (raw, remapped) pair files.

    Scans are processed in lexicographic filename order so the resulting
    dataset is independent of filesystem enumeration order.
    """
    scan_dir, out_dir = Path(scan_dir), Path(out_dir)
    scans = sorted(p for p in scan_dir.iterdir() if p.suffix == SCAN_SUFFIX)
    if not scans:
        raise EmptyDataset(f"no {SCAN_SUFFIX} scans under {scan_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scan_path in enumerate(scans):
        img = load_scan(scan_path)
        pair_path = out_dir / f"{i:05d}{PAIR_SUFFIX}"
        save_pair(pair_path, img, voxel_aware_remap(img, s_vxl))
        written.append(pair_path)
    manifest = {
        "count": len(written),
        "s_vxl": s_vxl,
        "sources": [p.name for p in scans],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written


def list_pairs(dataset_dir) -> list[Path]:
    paths = sorted(p for p in Path(dataset_dir).iterdir()
                   if p.suffix == PAIR_SUFFIX)
    if not paths:
        raise EmptyDataset(f"no {PAIR_SUFFIX} pairs under {dataset_dir}")
    return paths


def load_dataset(dataset_dir, intrinsics: LidarIntrinsics | None = None):
    """Stack a pair directory into (raw, remapped) float32 arrays (N, H, W)."""
    paths = list_pairs(dataset_dir)
    raws, remaps = [], []
    intr = intrinsics
    for p in paths:
        x, xv = load_pair(p, intr)
        intr = x.intrinsics
        raws.append(x.ranges)
        remaps.append(xv.ranges)
    return np.stack(raws), np.stack(remaps), intr


def split_dataset(count: int, seed: int, test_fraction: float = 0.1):
    """Deterministic shuffled train/test index split (at least one test item
    whenever there are two or more examples)."""
    if count < 1:
        raise EmptyDataset("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(count)
    n_test = min(count - 1, max(1, int(round(count * test_fraction)))) if count > 1 else 0
    return np.sort(order[n_test:]), np.sort(order[:n_test])
