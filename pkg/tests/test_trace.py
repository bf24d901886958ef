from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from oblivsim import CallKind, HostCallEvent, HostTrace, parse_trace

kinds = st.sampled_from(list(CallKind))
events = st.builds(
    HostCallEvent,
    ts=st.integers(min_value=0, max_value=10**15),
    kind=kinds,
    offset=st.integers(min_value=0, max_value=10**12),
    payload_len=st.integers(min_value=0, max_value=10**6),
    dummy=st.booleans(),
)


def test_line_format():
    e = HostCallEvent(100_000, CallKind.DISK_READ, 8192, 4096, dummy=True)
    assert e.line() == "100000,disk_read,8192,4096"
    assert e.line(ground_truth=True) == "100000,disk_read,8192,4096,1"


def test_record_respects_stop_and_reset():
    t = HostTrace()
    t.record(HostCallEvent(0, CallKind.NET_POLL, 0, 0))
    t.record(HostCallEvent(1, CallKind.NET_POLL, 0, 0))
    assert len(t) == 2
    t.stop()
    t.record(HostCallEvent(2, CallKind.NET_POLL, 0, 0))
    assert len(t) == 2
    t.reset()
    assert len(t) == 0


def test_of_kind_filters():
    t = HostTrace()
    t.record(HostCallEvent(0, CallKind.DISK_READ, 0, 4096))
    t.record(HostCallEvent(0, CallKind.DISK_WRITE, 0, 4096))
    t.record(HostCallEvent(1, CallKind.NET_WRITE, 3, 1500))
    assert [e.kind for e in t.of_kind(CallKind.DISK_READ)] == [CallKind.DISK_READ]
    assert len(t.of_kind(CallKind.DISK_READ, CallKind.DISK_WRITE)) == 2


def test_shape_excludes_offset_and_dummy():
    # Offsets are judged statistically, not by equality; shape carries
    # only what must match event-for-event.
    a = HostCallEvent(5, CallKind.DISK_READ, 4096, 4096, dummy=False)
    b = HostCallEvent(5, CallKind.DISK_READ, 8192, 4096, dummy=True)
    t = HostTrace(events=[a, b])
    assert t.shape() == [(5, "disk_read", 4096), (5, "disk_read", 4096)]


@given(st.lists(events, max_size=50))
def test_export_parse_roundtrip_with_ground_truth(evs):
    t = HostTrace(events=list(evs))
    back = parse_trace(t.export(ground_truth=True))
    assert back.events == t.events


@given(st.lists(events, max_size=50))
def test_plain_export_drops_dummy_flag(evs):
    t = HostTrace(events=list(evs))
    back = parse_trace(t.export())
    assert [
        (e.ts, e.kind, e.offset, e.payload_len) for e in back.events
    ] == [(e.ts, e.kind, e.offset, e.payload_len) for e in evs]
    assert all(not e.dummy for e in back.events)


def test_parse_skips_blank_lines_and_keeps_meta():
    t = parse_trace("\n0,net_poll,0,0\n\n", meta={"mtu": 1500})
    assert len(t.events) == 1
    assert t.meta == {"mtu": 1500}


def test_parse_rejects_malformed_lines():
    with pytest.raises(ValueError):
        parse_trace("0,disk_read,0\n")
    with pytest.raises(ValueError):
        parse_trace("0,disk_levitate,0,4096\n")
    with pytest.raises(ValueError):
        parse_trace("0,disk_read,0,4096,1,9\n")
