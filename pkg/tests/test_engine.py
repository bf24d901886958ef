"""Engine behavior: image building, the cached protected path, shuffle
triggers, the shaped net loop, and whole-run determinism."""

from __future__ import annotations

import pytest

from conftest import DEFAULT_KEY, mount
from oblivsim import (
    BLOCK_SIZE,
    CallKind,
    DescriptorError,
    EchoPeer,
    EngineConfig,
    ModeError,
    ParameterError,
    PeerIdentity,
    ProtectionMode,
    ShapingClass,
    StaticIdentity,
    build_image,
    establish,
    parse_workload,
    run_workload,
)

FILE_A = bytes(range(256)) * 16 * 8
FILE_B = b"\xab" * 4096 * 3


def net_pair(mtu=1500):
    """Enclave-side and remote-side sessions over the same link."""
    a = StaticIdentity.from_private_bytes(bytes(range(32)))
    b = StaticIdentity.from_private_bytes(bytes(range(32, 64)))
    enclave = establish(a, PeerIdentity(b.public_bytes), mtu)
    remote = establish(b, PeerIdentity(a.public_bytes), mtu)
    return enclave, remote


# --- build_image -----------------------------------------------------------


def test_files_read_back_on_the_protected_path(small_bundle):
    eng = mount(small_bundle).engine
    assert eng.read_file(eng.regular_fd(0), 0, len(FILE_A)) == FILE_A
    assert eng.read_file(eng.regular_fd(1), 0, len(FILE_B)) == FILE_B


def test_files_read_back_on_the_passthrough_path(small_bundle):
    eng = mount(small_bundle, oblivious=False).engine
    assert eng.read_file(eng.regular_fd(0), 0, len(FILE_A)) == FILE_A
    assert eng.read_file(eng.regular_fd(1), 0, len(FILE_B)) == FILE_B


def test_key_generated_when_encrypted_and_absent():
    bundle = build_image(32, ProtectionMode.CRYPT_INTEGRITY, [b"x" * 100])
    assert isinstance(bundle.key, bytes) and len(bundle.key) == 32
    eng = mount(bundle, oblivious=False).engine
    assert eng.read_file(eng.regular_fd(0), 0, 100) == b"x" * 100


def test_plain_image_has_no_key_and_builds_identically():
    kw = dict(files=[b"p" * 5000], seed=3)
    one = build_image(32, ProtectionMode.PLAIN, **kw)
    two = build_image(32, ProtectionMode.PLAIN, **kw)
    assert one.key is None and one.verity_root is None
    assert one.image == two.image


def test_verity_image_is_sealed_read_only():
    kw = dict(files=[b"v" * 4096], seed=1)
    one = build_image(32, ProtectionMode.VERITY, **kw)
    two = build_image(32, ProtectionMode.VERITY, **kw)
    assert one.verity_root is not None and one.verity_root == two.verity_root
    eng = mount(one, oblivious=False).engine
    assert eng.read_file(eng.regular_fd(0), 0, 4096) == b"v" * 4096
    with pytest.raises(ModeError):
        eng.write_file(eng.regular_fd(0), 0, b"!")


def test_encrypted_image_leaves_no_unsealed_blocks(small_bundle):
    # Blocks never touched by a file must be indistinguishable noise,
    # not zeroes the host could use to map the layout offline.
    m = mount(small_bundle, oblivious=False)
    assert all(v is not None for v in m.store.slots)
    pages = [m.store.read_block(p) for p in range(64)]
    assert all(len(p) == BLOCK_SIZE for p in pages)
    assert sum(1 for p in pages if p == bytes(BLOCK_SIZE)) == 0


def test_same_seed_same_layout_fresh_ciphertext():
    kw = dict(files=[b"d" * 9000], seed=11, key=DEFAULT_KEY)
    one = build_image(32, ProtectionMode.CRYPT_INTEGRITY, **kw)
    two = build_image(32, ProtectionMode.CRYPT_INTEGRITY, **kw)
    fs1, fs2 = mount(one).fs, mount(two).fs
    assert [fs1.phys_of(one.data_fds[0], i) for i in range(3)] == \
           [fs2.phys_of(two.data_fds[0], i) for i in range(3)]
    assert fs1.dummy_blocks() == fs2.dummy_blocks()
    assert one.image != two.image


def test_regular_fd_skips_internal_files(small_bundle):
    eng = mount(small_bundle).engine
    assert (eng.regular_fd(0), eng.regular_fd(1)) == small_bundle.data_fds
    with pytest.raises(DescriptorError):
        eng.regular_fd(2)
    with pytest.raises(DescriptorError):
        eng.regular_fd(-1)


# --- rounds and the cache --------------------------------------------------


def test_idle_rounds_sit_on_the_interval_grid(small_bundle):
    m = mount(small_bundle)
    m.engine.start_observation()
    m.engine.run_rounds(10)
    disk = m.trace.of_kind(CallKind.DISK_READ, CallKind.DISK_WRITE)
    assert len(disk) == 20
    assert all(e.dummy for e in disk)
    for i in range(10):
        read, write = disk[2 * i], disk[2 * i + 1]
        assert read.kind is CallKind.DISK_READ
        assert write.kind is CallKind.DISK_WRITE
        assert read.ts == write.ts == i * 100_000


def test_queued_write_serves_a_later_read(small_bundle):
    m = mount(small_bundle, config=EngineConfig(cache_capacity=1))
    eng = m.engine
    fd = eng.regular_fd(0)
    eng.write_file(fd, 0, b"Q" * BLOCK_SIZE)
    eng.write_file(fd, BLOCK_SIZE, b"R" * BLOCK_SIZE)  # evicts block 0
    assert eng.sched.pending_writes == 1

    # The freshest block 0 lives in the write queue; reading it back must
    # not touch the disk, which still holds the stale bytes.
    assert eng.read_file(fd, 0, 16) == b"Q" * 16
    assert eng.sched.real_reads == 0

    while eng.sched.pending_writes:
        eng.run_one_round()
    assert m.store.read_block(m.fs.phys_of(fd, 0)) == b"Q" * BLOCK_SIZE
    assert m.store.read_block(m.fs.phys_of(fd, 1)) == b"R" * BLOCK_SIZE


def test_refetch_after_evict_forces_a_shuffle(small_bundle):
    m = mount(small_bundle, config=EngineConfig(cache_capacity=1))
    eng = m.engine
    fd = eng.regular_fd(0)
    before = m.fs.phys_of(fd, 0)
    assert eng.read_file(fd, 0, 1) == b"\x00"
    eng.read_file(fd, BLOCK_SIZE, 1)  # evicts block 0 within the epoch
    assert eng.shuffles == 0
    assert eng.read_file(fd, 0, 1) == b"\x00"
    assert eng.shuffles == 1
    assert m.fs.phys_of(fd, 0) != before


def test_eager_shuffle_threshold(small_bundle):
    m = mount(small_bundle, config=EngineConfig(eager_shuffle_at=2))
    eng = m.engine
    fd = eng.regular_fd(0)
    eng.read_file(fd, 0, 1)
    assert eng.shuffles == 0
    eng.read_file(fd, BLOCK_SIZE, 1)
    assert eng.shuffles == 1
    assert len(eng.cache.epoch_fetched) == 0


def test_passthrough_refuses_protected_operations(small_bundle):
    eng = mount(small_bundle, oblivious=False).engine
    with pytest.raises(ModeError):
        eng.run_one_round()
    with pytest.raises(ModeError):
        eng.shuffle_now()


def test_passthrough_charges_fixed_latency(small_bundle):
    m = mount(small_bundle, oblivious=False)
    eng = m.engine
    eng.read_file(eng.regular_fd(0), 0, 1)
    assert eng.elapsed_ns == 10_000
    eng.write_file(eng.regular_fd(0), 0, b"y" * BLOCK_SIZE)
    assert eng.elapsed_ns == 20_000


def test_trace_records_every_boundary_mutation(small_bundle):
    m = mount(small_bundle)
    enclave, remote = net_pair()
    m.engine.add_link(3, enclave)
    m.engine.add_external_pump(EchoPeer(m.host, 3, remote, ShapingClass()))

    m.engine.start_observation()
    fd = m.engine.regular_fd(0)
    m.engine.write_file(fd, 0, b"z" * BLOCK_SIZE)
    m.engine.net_send(3, b"hello")
    m.engine.read_file(fd, 2 * BLOCK_SIZE, 64)
    m.engine.run_rounds(4)
    m.engine.cache.flush()
    while m.engine.sched.pending_writes or m.engine.sched.pending_reads:
        m.engine.run_one_round()

    mutations = m.trace.of_kind(
        CallKind.DISK_WRITE, CallKind.NET_WRITE, CallKind.NET_READ)
    assert m.host.boundary_mutations == len(mutations) > 8


# --- net links ---------------------------------------------------------------


def test_echo_peer_roundtrip(small_bundle):
    m = mount(small_bundle)
    enclave, remote = net_pair()
    link = m.engine.add_link(7, enclave)
    peer = EchoPeer(m.host, 7, remote, ShapingClass())
    m.engine.add_external_pump(peer)

    m.engine.net_send(7, b"ping")
    m.engine.run_rounds(2)

    assert peer.received_real == 1
    assert list(link.inbox) == [b"ping"]
    assert link.rx_payload_bytes == 4
    assert link.rx_errors == 0
    assert m.engine.counters()["net_real"] >= 1
    assert m.engine.counters()["net_dummy"] >= 1


def test_net_writes_stay_on_the_shaper_grid(small_bundle):
    m = mount(small_bundle)
    enclave, remote = net_pair()
    m.engine.add_link(7, enclave)
    m.engine.add_external_pump(EchoPeer(m.host, 7, remote, ShapingClass()))
    m.engine.start_observation()
    m.engine.run_rounds(6)
    writes = m.trace.of_kind(CallKind.NET_WRITE)
    assert len(writes) >= 9  # 200 Mbps puts a frame every 60 us
    assert all(e.payload_len == m.host.mtu for e in writes)
    assert all(e.ts % 60_000 == 0 for e in writes)
    deltas = [b.ts - a.ts for a, b in zip(writes, writes[1:])]
    assert all(d == 60_000 for d in deltas)


def test_duplicate_endpoint_rejected(small_bundle):
    m = mount(small_bundle)
    enclave, _remote = net_pair()
    m.engine.add_link(7, enclave)
    with pytest.raises(ParameterError):
        m.engine.add_link(7, enclave)


def test_send_to_unlinked_endpoint_rejected(small_bundle):
    m = mount(small_bundle)
    with pytest.raises(ParameterError):
        m.engine.net_send(9, b"lost")
    with pytest.raises(ParameterError):
        m.engine.link(9)


def test_frame_for_unknown_endpoint_is_counted_and_dropped(small_bundle):
    m = mount(small_bundle)
    enclave, _remote = net_pair()
    m.engine.add_link(7, enclave)
    m.host.deliver_frame(99, bytes(1500))
    m.engine.run_rounds(1)
    assert m.engine.unknown_frames == 1
    assert m.engine.link(7).rx_errors == 0


def test_undecryptable_frame_counts_as_rx_error(small_bundle):
    m = mount(small_bundle)
    enclave, remote = net_pair()
    link = m.engine.add_link(7, enclave)
    frame = bytearray(remote.seal_packet(b"flip me"))
    frame[40] ^= 0x01
    m.host.deliver_frame(7, bytes(frame))
    m.engine.run_rounds(1)
    assert link.rx_errors == 1
    assert list(link.inbox) == []


# --- run_workload ------------------------------------------------------------


def test_round_budget_truncates_a_long_workload(small_bundle):
    eng = mount(small_bundle).engine
    done = run_workload(eng, parse_workload("seqread(0,0)"), target_rounds=3)
    assert done is False
    assert eng.rounds_done == 3
    assert eng.round_target is None


def test_short_workload_padded_to_the_target(small_bundle):
    eng = mount(small_bundle).engine
    done = run_workload(eng, parse_workload("idle(2)"), target_rounds=6)
    assert done is True
    assert eng.rounds_done == 6


def test_same_seed_same_trace(small_bundle):
    exports = []
    for _ in range(2):
        m = mount(small_bundle, seed=5)
        run_workload(m.engine, parse_workload("randread(0,40)"),
                     target_rounds=60)
        exports.append(m.trace.export(ground_truth=True))
    assert exports[0] == exports[1]


def test_counters_shape(small_bundle):
    keys = {"rounds", "real_reads", "dummy_reads", "real_writes",
            "dummy_writes", "shuffles", "cache_hits", "net_real", "net_dummy"}
    protected = mount(small_bundle).engine
    protected.run_rounds(2)
    c = protected.counters()
    assert set(c) == keys
    assert c["rounds"] == 2 and c["dummy_reads"] == 2

    plain = mount(small_bundle, oblivious=False).engine
    plain.read_file(plain.regular_fd(0), 0, 1)
    c = plain.counters()
    assert set(c) == keys
    assert c["rounds"] == 0 and c["real_reads"] == 0
