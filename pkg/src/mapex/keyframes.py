"""Keyframe policy, wire format, and integration of received keyframes.

A keyframe pairs a compressed scan (latent vector) with the pose it was
taken from.  Poses are quantized to float32 at creation so that the wire
round trip is bit-exact and sender and receiver integrate the identical
pose.  Sharing state tracks the exact set of acknowledged sequence numbers:
deployment ships only the latest N_k frames, so the acknowledged set is not
a prefix and a single high-water number cannot represent it.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import Pose, pose_difference, spherical_project, unproject
from .grid import OccupancyGrid, integrate_cloud

GROUND = 0
AERIAL = 1

MAGIC = b"KFR1"
_FIXED = struct.Struct("<4sBId7fH")  # magic, robot, seq, t, pose, latent count
HEADER_BYTES = _FIXED.size  # 47


class BadMagic(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class DecoderMismatch(ValueError):
    pass


class Keyframe:
    """Immutable (robot, seq, timestamp, pose, latent) record."""

    __slots__ = ("robot_id", "seq", "timestamp", "position", "orientation",
                 "latent")

    def __init__(self, robot_id: int, seq: int, timestamp: float,
                 position, orientation, latent):
        self.robot_id = int(robot_id)
        self.seq = int(seq)
        self.timestamp = float(timestamp)
        self.position = np.asarray(position, dtype=np.float32).reshape(3)
        self.orientation = np.asarray(orientation, dtype=np.float32).reshape(4)
        self.latent = np.asarray(latent, dtype=np.float32).reshape(-1)
        for a in (self.position, self.orientation, self.latent):
            a.setflags(write=False)

    @staticmethod
    def create(robot_id: int, seq: int, timestamp: float, pose: Pose,
               latent) -> "Keyframe":
        return Keyframe(robot_id, seq, timestamp, pose.position,
                        pose.orientation, latent)

    @property
    def pose(self) -> Pose:
        q = self.orientation.astype(np.float64)
        return Pose(self.position.astype(np.float64), q / np.linalg.norm(q))

    @property
    def wire_size(self) -> int:
        return HEADER_BYTES + 4 * self.latent.size

    def __eq__(self, other):
        return (
            isinstance(other, Keyframe)
            and self.robot_id == other.robot_id
            and self.seq == other.seq
            and self.timestamp == other.timestamp
            and self.position.tobytes() == other.position.tobytes()
            and self.orientation.tobytes() == other.orientation.tobytes()
            and self.latent.tobytes() == other.latent.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return (f"Keyframe(robot={self.robot_id}, seq={self.seq}, "
                f"t={self.timestamp}, n_latent={self.latent.size})")


def serialize(kf: Keyframe) -> bytes:
    head = _FIXED.pack(
        MAGIC, kf.robot_id, kf.seq, kf.timestamp,
        *kf.position.tolist(), *kf.orientation.tolist(), kf.latent.size)
    return head + kf.latent.astype("<f4").tobytes()


def deserialize(data: bytes) -> Keyframe:
    if len(data) < HEADER_BYTES:
        raise LengthMismatch(f"record of {len(data)} bytes is shorter than "
                             f"the {HEADER_BYTES}-byte header")
    magic, robot_id, seq, t, *pose7, count = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    want = HEADER_BYTES + 4 * count
    if len(data) != want:
        raise LengthMismatch(f"expected {want} bytes for {count} latents, "
                             f"got {len(data)}")
    latent = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER_BYTES)
    return Keyframe(robot_id, seq, t, pose7[:3], pose7[3:], latent)


def save_keyframe_log(path, frames) -> None:
    with open(path, "wb") as fh:
        for kf in frames:
            fh.write(serialize(kf))


def load_keyframe_log(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    frames, offset = [], 0
    while offset < len(data):
        if len(data) - offset < HEADER_BYTES:
            raise LengthMismatch("trailing bytes do not form a record")
        (count,) = struct.unpack_from("<H", data, offset + HEADER_BYTES - 2)
        end = offset + HEADER_BYTES + 4 * count
        frames.append(deserialize(data[offset:end]))
        offset = end
    return frames


def should_create(current: Pose, last: Pose | None, tau_t: float,
                  tau_r: float) -> bool:
    """Keyframe predicate: strict threshold on translation OR rotation."""
    if tau_t <= 0 or tau_r <= 0:
        raise ValueError("thresholds must be > 0")
    if last is None:
        return True
    dt, dr = pose_difference(current, last)
    return dt > tau_t or dr > tau_r


class KeyframeSet:
    """One robot's keyframes plus which of them the peer has acknowledged."""

    def __init__(self, robot_id: int):
        self.robot_id = robot_id
        self.frames: list[Keyframe] = []
        self._acked: set[int] = set()
        self._last_pose: Pose | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def maybe_create(self, pose: Pose, cloud, timestamp: float, tau_t: float,
                     tau_r: float, encoder) -> Keyframe | None:
        """Create a keyframe when the pose moved past either threshold.

        The latent is the encoder's deterministic code for the scan
        projected with the encoder's own intrinsics.
        """
        if not should_create(pose, self._last_pose, tau_t, tau_r):
            return None
        img = spherical_project(cloud, encoder.intrinsics)
        latent = encoder.encode_latent(img)
        kf = Keyframe.create(self.robot_id, len(self.frames) + 1, timestamp,
                             pose, latent)
        self.frames.append(kf)
        self._last_pose = kf.pose  # compare against the quantized pose
        return kf

    def latest(self, n: int) -> list:
        return self.frames[-n:] if n > 0 else []

    def mark_acked(self, seqs) -> None:
        seqs = {int(s) for s in seqs}
        known = {kf.seq for kf in self.frames}
        if not seqs <= known:
            raise LengthMismatch(f"unknown seqs acked: {sorted(seqs - known)}")
        self._acked |= seqs

    def unshared(self) -> list:
        return [kf for kf in self.frames if kf.seq not in self._acked]

    @property
    def watermark(self) -> int:
        return max(self._acked, default=0)

    @property
    def complete(self) -> bool:
        return len(self._acked) == len(self.frames)


def integrate_keyframe(grid: OccupancyGrid, kf: Keyframe, decoder,
                       expected_robot_id: int | None = None) -> None:
    """Decode a received keyframe and fuse it into the local map."""
    if expected_robot_id is not None and kf.robot_id != expected_robot_id:
        raise DecoderMismatch(
            f"keyframe from robot {kf.robot_id}, decoder expects "
            f"{expected_robot_id}")
    if decoder.latent_dim is not None and decoder.latent_dim != kf.latent.size:
        raise DecoderMismatch(
            f"latent size {kf.latent.size} != decoder {decoder.latent_dim}")
    img = decoder.decode_latent(kf.latent)
    integrate_cloud(grid, kf.pose, unproject(img))
