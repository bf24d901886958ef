"""Constant-rate frame emission per peer.

Each peer link emits exactly MTU-sized frames on a fixed grid: one
frame costs mtu * 8 * 1e9 bit-nanoseconds, and with burst depth 1
emission k opens at ceil(k * frame_cost / rate_bps). All accounting is
exact integer arithmetic, so the grid never drifts, for any integer
rate. A wider burst lets that many frames share the front of the grid
(the bucket starts full).

When a slot opens the shaper sends the oldest queued payload if there
is one; otherwise it sends a padding frame. Outside observers see the
same cadence either way. Slots that pass while the caller never ticks
are forfeited, not banked: after a stall the grid restarts at the
stall's end rather than bursting to catch up. Queued payloads beyond
the queue cap raise backpressure to the caller rather than silently
stretching memory.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .channel import PeerSession, max_payload
from .errors import BackpressureError, ParameterError, SizeError

NS_PER_S = 1_000_000_000


@dataclass(frozen=True)
class ShapingClass:
    rate_bps: int = 200_000_000
    burst_frames: int = 1
    queue_frames: int = 4096

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ParameterError("rate_bps must be positive")
        if self.burst_frames < 1:
            raise ParameterError("burst must allow at least one frame")
        if self.queue_frames < 1:
            raise ParameterError("queue must hold at least one frame")


class PeerShaper:
    """Emission grid in bit-nanoseconds feeding one session."""

    def __init__(self, shaping: ShapingClass, session: PeerSession, start_ns: int = 0):
        self.shaping = shaping
        self.session = session
        self.frame_cost = session.mtu * 8 * NS_PER_S
        self.last_tick_ns = start_ns
        self._epoch_ns = start_ns
        self._next_k = 0
        self.queue: deque[bytes] = deque()
        self.emitted = 0

    def enqueue(self, payload: bytes) -> None:
        if len(payload) > max_payload(self.session.mtu):
            raise SizeError("payload exceeds one frame")
        if len(self.queue) >= self.shaping.queue_frames:
            raise BackpressureError("send queue is full")
        self.queue.append(payload)

    @property
    def backlog(self) -> int:
        return len(self.queue)

    def next_due_ns(self) -> int:
        """Time at which the next emission slot opens.

        Emission k sits at epoch + ceil((k - burst + 1) * cost / rate);
        the first ``burst`` emissions are all due at the epoch itself.
        """
        over = self._next_k - (self.shaping.burst_frames - 1)
        if over <= 0:
            return self._epoch_ns
        rate = self.shaping.rate_bps
        return self._epoch_ns + (over * self.frame_cost + rate - 1) // rate

    def _emit(self) -> tuple[bytes, bool]:
        self.emitted += 1
        if self.queue:
            return self.session.seal_packet(self.queue.popleft()), True
        return self.session.seal_dummy(), False

    def tick(self, now_ns: int) -> list[tuple[bytes, bool]]:
        """Emit every slot due by ``now_ns``.

        Returns (frame, real) pairs; the flag is ground truth for the
        caller's bookkeeping and is invisible on the wire.
        """
        if now_ns < self.last_tick_ns:
            raise ParameterError("shaper clock moved backwards")
        self.last_tick_ns = now_ns
        burst = self.shaping.burst_frames
        q = (now_ns - self._epoch_ns) * self.shaping.rate_bps // self.frame_cost
        available = burst + q - self._next_k
        if available <= 0:
            return []
        if available > burst:
            # Slots were skipped while nobody ticked; forfeit them and
            # restart the grid here instead of bursting to catch up.
            self._epoch_ns = now_ns
            self._next_k = burst
            return [self._emit() for _ in range(burst)]
        self._next_k += available
        return [self._emit() for _ in range(available)]
