"""Host-call trace: the adversary's view of the enclave.

Every crossing of the host boundary appends one event. An event carries
only what an observer on the untrusted side can see: when the call
happened, which of the seven calls it was, the disk offset (or peer
endpoint index for network calls), and the payload length. The
``dummy`` flag is ground truth for tests and is never considered part
of the observable record; export omits it unless explicitly asked.

Export format (one event per line, fixed field order)::

    ts,kind,offset,len

With ground truth enabled a fifth field ``dummy`` (0/1) is appended.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class CallKind(enum.Enum):
    DISK_READ = "disk_read"
    DISK_WRITE = "disk_write"
    NET_READ = "net_read"
    NET_WRITE = "net_write"
    NET_POLL = "net_poll"
    TIME_READ = "time_read"
    FORWARD_SIGNAL = "forward_signal"


_KIND_BY_NAME = {k.value: k for k in CallKind}


@dataclass(frozen=True)
class HostCallEvent:
    ts: int  # simulated nanoseconds
    kind: CallKind
    offset: int  # disk byte offset; peer endpoint index for net calls
    payload_len: int
    dummy: bool = False  # ground truth only, not observable

    def line(self, ground_truth: bool = False) -> str:
        base = f"{self.ts},{self.kind.value},{self.offset},{self.payload_len}"
        if ground_truth:
            return base + f",{int(self.dummy)}"
        return base


@dataclass
class HostTrace:
    """Append-only event log with metadata describing the recording run.

    ``meta`` holds the run configuration fingerprint (round interval,
    reads/writes per round, MTU, ...). Comparing traces recorded under
    different configurations is refused by the analyzer.
    """

    meta: dict = field(default_factory=dict)
    events: list[HostCallEvent] = field(default_factory=list)
    recording: bool = True

    def record(self, event: HostCallEvent) -> None:
        if self.recording:
            self.events.append(event)

    def reset(self) -> None:
        """Drop everything recorded so far (e.g. after image setup)."""
        self.events.clear()

    def stop(self) -> None:
        self.recording = False

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, *kinds: CallKind) -> list[HostCallEvent]:
        want = set(kinds)
        return [e for e in self.events if e.kind in want]

    def shape(self) -> list[tuple[int, str, int]]:
        """The observable projection compared for obliviousness."""
        return [(e.ts, e.kind.value, e.payload_len) for e in self.events]

    def export(self, ground_truth: bool = False) -> str:
        return "".join(e.line(ground_truth) + "\n" for e in self.events)


def parse_trace(text: str, meta: dict | None = None) -> HostTrace:
    """Parse an exported trace back into a HostTrace.

    Accepts both the plain and the ground-truth form.
    """
    trace = HostTrace(meta=dict(meta or {}))
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) not in (4, 5):
            raise ValueError(f"trace line {lineno}: expected 4 or 5 fields")
        kind = _KIND_BY_NAME.get(parts[1])
        if kind is None:
            raise ValueError(f"trace line {lineno}: unknown call kind {parts[1]!r}")
        dummy = len(parts) == 5 and parts[4] == "1"
        trace.events.append(
            HostCallEvent(int(parts[0]), kind, int(parts[2]), int(parts[3]), dummy)
        )
    return trace
