"""Rigid-body poses, LiDAR intrinsics, and point cloud <-> range image conversion.

Everything here is a pure function over immutable inputs; angles are radians,
distances are meters.  Range images use float32 storage with NaN marking
pixels that produced no return, while all intermediate geometry is computed
in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INVALID = np.float32(np.nan)


def _as_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError("quaternion must be (w, x, y, z)")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > 1e-9:
        raise ValueError(f"quaternion norm {n} deviates from 1 by more than 1e-9")
    return q


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (unit quaternion, w-first) then translation."""

    position: np.ndarray
    orientation: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0])
    )

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("position must be a finite 3-vector")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", _as_unit_quat(self.orientation))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3))

    @staticmethod
    def from_yaw(position, yaw: float) -> "Pose":
        h = 0.5 * yaw
        return Pose(np.asarray(position, dtype=np.float64),
                    np.array([math.cos(h), 0.0, 0.0, math.sin(h)]))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other)(p) = self(other(p))."""
        q = quat_multiply(self.orientation, other.orientation)
        q /= np.linalg.norm(q)
        return Pose(self.apply(other.position), q)

    def inverse(self) -> "Pose":
        qi = np.array([self.orientation[0], *(-self.orientation[1:])])
        return Pose(-(self.rotation_matrix().T @ self.position), qi)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.position

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dt, dr = pose_difference(self, other)
        return dt <= tol and dr <= tol


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def pose_difference(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation distance and relative rotation angle between two poses."""
    dt = float(np.linalg.norm(a.position - b.position))
    dot = abs(float(np.dot(a.orientation, b.orientation)))
    dr = 2.0 * math.acos(min(1.0, dot))
    return dt, dr


def transform_cloud(pose: Pose, cloud) -> np.ndarray:
    """Rotate then translate an (N, 3) cloud into the pose's target frame."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.shape[0] == 0:
        return cloud
    return pose.apply(cloud)


@dataclass(frozen=True)
class LidarIntrinsics:
    """Spinning LiDAR model: rows cover the vertical FoV, columns a full turn."""

    rows: int
    cols: int
    min_elevation: float
    max_elevation: float
    max_range: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.min_elevation < self.max_elevation:
            raise ValueError("min_elevation must be < max_elevation")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")

    @property
    def elevation_step(self) -> float:
        return (self.max_elevation - self.min_elevation) / self.rows

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.cols

    def ray_directions(self) -> np.ndarray:
        """Unit bin-center directions, shape (rows, cols, 3), sensor frame."""
        i = np.arange(self.rows, dtype=np.float64)
        j = np.arange(self.cols, dtype=np.float64)
        elev = self.min_elevation + (i + 0.5) * self.elevation_step
        azim = -math.pi + (j + 0.5) * self.azimuth_step
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(azim), np.sin(azim)
        d = np.empty((self.rows, self.cols, 3))
        d[:, :, 0] = ce[:, None] * ca[None, :]
        d[:, :, 1] = ce[:, None] * sa[None, :]
        d[:, :, 2] = se[:, None] * np.ones_like(ca)[None, :]
        return d


@dataclass
class RangeImage:
    """H x W grid of ray ranges in meters; NaN marks pixels with no return."""

    intrinsics: LidarIntrinsics
    ranges: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float32)
        if r.shape != (self.intrinsics.rows, self.intrinsics.cols):
            raise ValueError("ranges shape does not match intrinsics")
        self.ranges = r

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.ranges)

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())

    def copy(self) -> "RangeImage":
        return RangeImage(self.intrinsics, self.ranges.copy())

    @staticmethod
    def empty(intrinsics: LidarIntrinsics) -> "RangeImage":
        return RangeImage(
            intrinsics,
            np.full((intrinsics.rows, intrinsics.cols), INVALID, dtype=np.float32),
        )


def spherical_project(cloud, intr: LidarIntrinsics) -> RangeImage:
    """Bin a sensor-frame cloud into a range image, keeping the closest return.

    A point maps to azimuth bin floor(W * (atan2(y, x) + pi) / 2pi) mod W and
    to the uniform elevation bin containing asin(z / r).  Points outside the
    vertical FoV or with range outside (0, max_range] are dropped.
    """
    img = RangeImage.empty(intr)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return img
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite points")

    r = np.linalg.norm(pts, axis=1)
    keep = (r > 0.0) & (r <= intr.max_range)
    pts, r = pts[keep], r[keep]
    if r.size == 0:
        return img

    elev = np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0))
    keep = (elev >= intr.min_elevation) & (elev <= intr.max_elevation)
    pts, r, elev = pts[keep], r[keep], elev[keep]
    if r.size == 0:
        return img

    row = np.minimum(
        intr.rows - 1,
        np.floor((elev - intr.min_elevation) / intr.elevation_step).astype(np.int64),
    )
    azim = np.arctan2(pts[:, 1], pts[:, 0])
    col = np.floor(intr.cols * (azim + math.pi) / (2.0 * math.pi)).astype(np.int64)
    col %= intr.cols

    # np.minimum.at keeps the smallest range when several points share a bin.
    acc = np.full((intr.rows, intr.cols), np.inf)
    np.minimum.at(acc, (row, col), r)
    hit = np.isfinite(acc)
    img.ranges[hit] = acc[hit].astype(np.float32)
    return img


def unproject(img: RangeImage) -> np.ndarray:
    """One sensor-frame point per valid pixel, along the bin-center ray."""
    mask = img.valid_mask
    if not mask.any():
        return np.zeros((0, 3))
    dirs = img.intrinsics.ray_directions()[mask]
    return dirs * img.ranges[mask].astype(np.float64)[:, None]
