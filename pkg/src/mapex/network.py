"""Range-limited robot-to-robot link with byte-exact traffic accounting.

Messages sent in range are delivered after size/bandwidth seconds; out of
range they are dropped and the sender is told (retransmission is the
protocol layer's job).  Range is evaluated at send time only — there are no
partial deliveries.  A single seeded-free event queue keeps everything
deterministic: ties deliver in send order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

SEND = "send"
DELIVER = "deliver"
DROP = "drop"


@dataclass(frozen=True)
class LinkModel:
    r_c: float  # communication range, meters
    bandwidth: float = math.inf  # bytes/second
    per_message_overhead: int = 0  # framing bytes counted per message

    def __post_init__(self):
        if not self.r_c > 0:
            raise ValueError(f"r_c must be > 0, got {self.r_c}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")
        if self.per_message_overhead < 0:
            raise ValueError("per_message_overhead must be >= 0")


def in_range(pos_a, pos_b, r_c: float) -> bool:
    """Euclidean separation at most r_c (boundary inclusive)."""
    a = np.asarray(getattr(pos_a, "position", pos_a), dtype=np.float64)
    b = np.asarray(getattr(pos_b, "position", pos_b), dtype=np.float64)
    return float(np.linalg.norm(a - b)) <= r_c


@dataclass(frozen=True)
class Message:
    channel: str
    direction: str  # "g2a" or "a2g"
    payload: bytes
    sent_t: float
    deliver_t: float
    seq: int


class TrafficLog:
    """Per-channel byte/message counters plus the raw event rows.

    Conservation (sent == delivered + dropped + queued) is checkable after
    every step; `queued` is derived so it cannot drift from the counters.
    """

    def __init__(self):
        self.rows = []  # (t, channel, direction, bytes, event)
        self.sent_bytes = {}
        self.delivered_bytes = {}
        self.dropped_bytes = {}
        self.sent_msgs = {}
        self.delivered_msgs = {}
        self.dropped_msgs = {}
        self.per_second = {}  # (direction, int(t)) -> bytes sent

    def _event(self, t, channel, direction, nbytes, event):
        self.rows.append((float(t), channel, direction, int(nbytes), event))
        if event == SEND:
            self.sent_bytes[channel] = self.sent_bytes.get(channel, 0) + nbytes
            self.sent_msgs[channel] = self.sent_msgs.get(channel, 0) + 1
            key = (direction, int(math.floor(t)))
            self.per_second[key] = self.per_second.get(key, 0) + nbytes
        elif event == DELIVER:
            self.delivered_bytes[channel] = (
                self.delivered_bytes.get(channel, 0) + nbytes)
            self.delivered_msgs[channel] = self.delivered_msgs.get(channel, 0) + 1
        elif event == DROP:
            self.dropped_bytes[channel] = self.dropped_bytes.get(channel, 0) + nbytes
            self.dropped_msgs[channel] = self.dropped_msgs.get(channel, 0) + 1
        else:
            raise ValueError(f"unknown event {event!r}")

    def queued_bytes(self, channel: str) -> int:
        return (self.sent_bytes.get(channel, 0)
                - self.delivered_bytes.get(channel, 0)
                - self.dropped_bytes.get(channel, 0))

    def total(self, counter: str) -> int:
        return sum(getattr(self, counter).values())

    def write_csv(self, path) -> None:
        # stable time sort: delivery rows are stamped with their (earlier)
        # due time even though they are recorded when polled
        ordered = sorted(self.rows, key=lambda row: row[0])
        with open(path, "w") as fh:
            fh.write("t,channel,direction,bytes,event\n")
            for t, channel, direction, nbytes, event in ordered:
                fh.write(f"{t!r},{channel},{direction},{nbytes},{event}\n")


class Link:
    """The single logical channel pair between the two robots."""

    def __init__(self, model: LinkModel):
        self.model = model
        self.log = TrafficLog()
        self._queue = []  # heap of (deliver_t, seq, Message)
        self._seq = 0

    def send(self, channel: str, direction: str, payload: bytes, t_now: float,
             sender_pos, receiver_pos) -> bool:
        """Returns True when the message was accepted for delivery."""
        if len(payload) == 0:
            raise ValueError("payload must be non-empty")
        size = len(payload) + self.model.per_message_overhead
        self.log._event(t_now, channel, direction, size, SEND)
        if not in_range(sender_pos, receiver_pos, self.model.r_c):
            self.log._event(t_now, channel, direction, size, DROP)
            return False
        delay = 0.0 if math.isinf(self.model.bandwidth) else size / self.model.bandwidth
        msg = Message(channel, direction, payload, t_now, t_now + delay,
                      self._seq)
        self._seq += 1
        heapq.heappush(self._queue, (msg.deliver_t, msg.seq, msg))
        return True

    def poll(self, t_now: float):
        """Pop every message due by t_now, in delivery order."""
        out = []
        while self._queue and self._queue[0][0] <= t_now + 1e-12:
            _, _, msg = heapq.heappop(self._queue)
            size = len(msg.payload) + self.model.per_message_overhead
            self.log._event(msg.deliver_t, msg.channel, msg.direction, size,
                            DELIVER)
            out.append(msg)
        return out

    @property
    def idle(self) -> bool:
        return not self._queue

    def conserved(self) -> bool:
        queued = sum(len(m.payload) + self.model.per_message_overhead
                     for _, _, m in self._queue)
        channels = set(self.log.sent_bytes)
        return queued == sum(self.log.queued_bytes(c) for c in channels)


def rate_table(intr, n_z: int, keyframed_raw_bytes: int,
               keyframed_latent_bytes: int, duration: float):
    """Four transmission-rate rows in KiB/s.

    Streaming rows assume 10 Hz scans of 12-byte points (one per pixel) or
    4-byte latent floats; keyframed rows divide the bytes actually tied to
    keyframes over the mission duration.
    """
    if duration <= 0:
        raise ValueError("duration must be > 0")
    return [
        ("raw_10hz", intr.rows * intr.cols * 12 * 10 / 1024),
        ("keyframed_raw", keyframed_raw_bytes / duration / 1024),
        ("latent_10hz", n_z * 4 * 10 / 1024),
        ("keyframed_latent", keyframed_latent_bytes / duration / 1024),
    ]
