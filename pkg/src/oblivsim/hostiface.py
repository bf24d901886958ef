"""The seven-call host boundary.

The trusted side may touch untrusted state through exactly seven calls:
disk_read, disk_write, net_read, net_write, net_poll, time_read and
forward_signal. ``Host`` holds the untrusted state (image bytes, frame
queues, raw clocks) plus fault-injection hooks for tests that play an
actively hostile host. ``HostInterface`` is the trusted shim: it
validates arguments, records one trace event per completed crossing,
and sanitizes what comes back (clock clamping, signal address rules).

Events record completed transfers only; a call rejected before any
host state changed (bad alignment, would-block) leaves no event, which
keeps the trace an exact record of backend mutations and observable
reads.
"""

from __future__ import annotations

import contextlib
import enum
import hashlib as _hashlib
import time as _time
from collections import deque
from dataclasses import dataclass

from .errors import (
    AlignmentError,
    BoundsError,
    ParameterError,
    SizeError,
    WouldBlock,
)
from .trace import CallKind, HostCallEvent, HostTrace

BLOCK_SIZE = 4096
DEFAULT_MTU = 1500

# Signal numbers follow the usual Linux layout.
SIG_MEMORY_FAULT = frozenset({7, 11})  # SIGBUS, SIGSEGV: address must be plausible
SIG_INSTRUCTION_FAULT = frozenset({4, 8})  # SIGILL, SIGFPE: address is replaced
SIG_USER_CONTROLLED = frozenset({1, 2, 15, 10, 12})  # HUP, INT, TERM, USR1, USR2


class ClockId(enum.Enum):
    MONOTONIC = "monotonic"
    REALTIME = "realtime"


class SimClock:
    """Deterministic time base the engine advances explicitly."""

    def __init__(self, start_ns: int = 0):
        self.now_ns = start_ns

    def now(self) -> int:
        return self.now_ns

    def advance_to(self, ts_ns: int) -> None:
        if ts_ns < self.now_ns:
            raise ParameterError("simulated clock cannot move backwards")
        self.now_ns = ts_ns


class WallClock:
    """Real time base for benchmark runs."""

    def now(self) -> int:
        return _time.monotonic_ns()

    def advance_to(self, ts_ns: int) -> None:
        # Nothing to do; real time advances on its own.
        return


@dataclass(frozen=True)
class SignalInfo:
    number: int
    code: int
    addr: int


class SignalDisposition(enum.Enum):
    DELIVERED = "delivered"
    REJECTED = "rejected"


@dataclass(frozen=True)
class SignalOutcome:
    disposition: SignalDisposition
    info: SignalInfo | None = None
    reason: str = ""


class Host:
    """Untrusted host state. Mutated only through HostInterface calls
    and the environment helpers (frame arrival / wire pickup), which
    model the network itself rather than the enclave."""

    def __init__(
        self,
        image: bytearray,
        clock=None,
        mtu: int = DEFAULT_MTU,
        enclave_range: tuple[int, int] = (0x7000_0000_0000, 0x7100_0000_0000),
    ):
        if len(image) % BLOCK_SIZE != 0:
            raise SizeError("image length must be a multiple of the block size")
        self.image = image
        self.clock = clock if clock is not None else SimClock()
        self.mtu = mtu
        self.enclave_range = enclave_range
        self.current_instruction = enclave_range[0] + 0x1000
        self.realtime_epoch_ns = 1_700_000_000 * 1_000_000_000
        self.ingress: deque[tuple[int, bytes]] = deque()
        self.egress: deque[tuple[int, bytes]] = deque()
        self.boundary_mutations = 0
        # Fault injection knobs (an adversarial host):
        self.poll_script: list[tuple[bool, bool]] = []
        self.clock_script: dict[ClockId, list[int]] = {}
        self.ingress_corrupter = None  # callable bytes -> bytes

    # Environment actions (the network side, not the enclave):

    def deliver_frame(self, endpoint: int, frame: bytes) -> None:
        frame = bytes(frame)
        if len(frame) != self.mtu:
            raise SizeError("delivered frame must be MTU-sized")
        self.ingress.append((endpoint, frame))

    def pop_egress(self) -> tuple[int, bytes]:
        return self.egress.popleft()

    def raw_time(self, clock_id: ClockId) -> int:
        script = self.clock_script.get(clock_id)
        if script:
            return script.pop(0)
        base = self.clock.now()
        if clock_id is ClockId.REALTIME:
            return base + self.realtime_epoch_ns
        return base

    def state_digest(self) -> tuple:
        return (
            _hashlib.sha256(self.image).hexdigest(),
            len(self.ingress),
            len(self.egress),
        )


class HostInterface:
    """Trusted entry points. One method per host call, nothing else."""

    def __init__(self, host: Host, trace: HostTrace | None = None,
                 ignore_user_signals: bool = False):
        self.host = host
        self.trace = trace if trace is not None else HostTrace()
        self.ignore_user_signals = ignore_user_signals
        self._last_monotonic: int | None = None
        self._ts_override: int | None = None

    # Timestamping ----------------------------------------------------

    def _now(self) -> int:
        if self._ts_override is not None:
            return self._ts_override
        return self.host.clock.now()

    @contextlib.contextmanager
    def scheduled_time(self, ts_ns: int):
        """Stamp events at the scheduled instant (batched rounds use
        this so trace timestamps stay exact even under wall clocks)."""
        prev = self._ts_override
        self._ts_override = ts_ns
        try:
            yield
        finally:
            self._ts_override = prev

    def _record(self, kind: CallKind, offset: int, length: int, dummy: bool) -> None:
        self.trace.record(HostCallEvent(self._now(), kind, offset, length, dummy))

    # Disk ------------------------------------------------------------

    def disk_read(self, offset: int, dummy: bool = False) -> bytes:
        if offset % BLOCK_SIZE != 0:
            raise AlignmentError(f"read offset {offset} not block-aligned")
        if offset < 0 or offset + BLOCK_SIZE > len(self.host.image):
            raise BoundsError(f"read offset {offset} outside image")
        data = bytes(self.host.image[offset:offset + BLOCK_SIZE])
        self._record(CallKind.DISK_READ, offset, BLOCK_SIZE, dummy)
        return data

    def disk_write(self, offset: int, block: bytes, dummy: bool = False) -> None:
        if offset % BLOCK_SIZE != 0:
            raise AlignmentError(f"write offset {offset} not block-aligned")
        if offset < 0 or offset + BLOCK_SIZE > len(self.host.image):
            raise BoundsError(f"write offset {offset} outside image")
        if len(block) != BLOCK_SIZE:
            raise SizeError("disk writes must be exactly one block")
        self.host.image[offset:offset + BLOCK_SIZE] = block
        self.host.boundary_mutations += 1
        self._record(CallKind.DISK_WRITE, offset, BLOCK_SIZE, dummy)

    # Network ---------------------------------------------------------

    def net_write(self, endpoint: int, frame: bytes, dummy: bool = False) -> None:
        if len(frame) != self.host.mtu:
            raise SizeError("frames on the wire are exactly MTU-sized")
        self.host.egress.append((endpoint, bytes(frame)))
        self.host.boundary_mutations += 1
        self._record(CallKind.NET_WRITE, endpoint, self.host.mtu, dummy)

    def net_read(self) -> tuple[int, bytes]:
        if not self.host.ingress:
            raise WouldBlock("no frame queued")
        endpoint, frame = self.host.ingress.popleft()
        if self.host.ingress_corrupter is not None:
            frame = self.host.ingress_corrupter(frame)
            if len(frame) != self.host.mtu:
                frame = (frame + b"\x00" * self.host.mtu)[:self.host.mtu]
        self.host.boundary_mutations += 1
        self._record(CallKind.NET_READ, endpoint, self.host.mtu, False)
        return endpoint, frame

    def net_poll(self) -> tuple[bool, bool]:
        if self.host.poll_script:
            readable, writable = self.host.poll_script.pop(0)
        else:
            readable, writable = bool(self.host.ingress), True
        self._record(CallKind.NET_POLL, 0, 0, False)
        return readable, writable

    # Time ------------------------------------------------------------

    def time_read(self, clock_id: ClockId) -> int:
        if not isinstance(clock_id, ClockId):
            raise ParameterError(f"unknown clock {clock_id!r}")
        raw = self.host.raw_time(clock_id)
        self._record(CallKind.TIME_READ, 0, 0, False)
        if clock_id is ClockId.MONOTONIC:
            # The host may lie; never let time run backwards.
            if self._last_monotonic is not None and raw < self._last_monotonic:
                raw = self._last_monotonic
            self._last_monotonic = raw
        return raw

    # Signals ---------------------------------------------------------

    def forward_signal(self, info: SignalInfo) -> SignalOutcome:
        if not (1 <= info.number <= 64):
            raise ParameterError(f"signal number {info.number} out of range")
        self._record(CallKind.FORWARD_SIGNAL, 0, 0, False)
        lo, hi = self.host.enclave_range
        if info.number in SIG_MEMORY_FAULT:
            if not (lo <= info.addr < hi):
                return SignalOutcome(
                    SignalDisposition.REJECTED, None,
                    "fault address outside enclave range")
            return SignalOutcome(SignalDisposition.DELIVERED, info)
        if info.number in SIG_INSTRUCTION_FAULT:
            # The host-supplied address is meaningless for these; use
            # the point of execution instead.
            fixed = SignalInfo(info.number, info.code, self.host.current_instruction)
            return SignalOutcome(SignalDisposition.DELIVERED, fixed)
        if info.number in SIG_USER_CONTROLLED and self.ignore_user_signals:
            return SignalOutcome(
                SignalDisposition.REJECTED, None, "user-controlled signal ignored")
        return SignalOutcome(SignalDisposition.DELIVERED, info)
