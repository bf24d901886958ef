"""Run orchestration: one engine owns the clock, the disk cadence, the
page cache, the shuffle and the shaped network links.

Two I/O personalities implement the filesystem's block interface:

* ``CachedIo`` is the protected path. Reads and writes go through the
  page cache; misses become scheduler submissions and the engine pumps
  batched rounds until the data lands. When the cache reports that a
  block would need a repeat host read this epoch, the engine runs a
  layout shuffle and retries.
* ``DirectIo`` is the passthrough path. Every block operation is a
  single immediate host call with a small fixed latency, no padding,
  no batching. It exists as the unprotected baseline.

Time is the simulated clock. Each call to ``run_one_round`` first
processes every network emission instant due before the round's
scheduled time (peers deliver, links emit, ingress is drained), then
fires the disk round itself. Network instants live on their own exact
grid derived from the token bucket, so round interval and link rate
need not divide each other.

``EchoPeer`` models the remote end of a link: it is environment code,
touches the untrusted ``Host`` directly, emits on the same constant
grid as the enclave side, and echoes real payloads back. Runs that
compare trace shapes attach the same peers to both runs; the peer's
cadence, like ours, is workload-independent.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

from .blockcrypto import (
    BLOCK_SIZE,
    BlockStore,
    ProtectionMode,
    layout_for,
    new_image,
)
from .blockfs import FLAG_REGULAR, BlockFs
from .channel import PeerSession
from .errors import (
    DescriptorError,
    IntegrityError,
    ModeError,
    ParameterError,
    ReplayError,
    RoundBudgetExhausted,
    SizeError,
    StaleCounterError,
    WouldBlock,
)
from .hostiface import Host, HostInterface, SimClock
from .pagecache import Intent, Outcome, PageCache, default_capacity
from .rng import RngTree
from .sched import RoundConfig, RoundScheduler
from .shaper import PeerShaper, ShapingClass
from .shuffle import ShuffleStats, oblivious_shuffle

DEFAULT_PASSTHROUGH_LATENCY_NS = 10_000


def trace_fingerprint(round_cfg: RoundConfig, mtu: int) -> dict:
    """Recording configuration stored in trace metadata; traces with
    different fingerprints are never shape-compared."""
    return {
        "interval_ns": round_cfg.interval_ns,
        "reads_per_round": round_cfg.reads_per_round,
        "writes_per_round": round_cfg.writes_per_round,
        "mtu": mtu,
    }


@dataclass(frozen=True)
class EngineConfig:
    round: RoundConfig = field(default_factory=RoundConfig)
    cache_capacity: int | None = None  # None: ceil(sqrt(data blocks))
    eager_shuffle_at: int | None = None  # epoch fetches that trigger an early shuffle
    passthrough_latency_ns: int = DEFAULT_PASSTHROUGH_LATENCY_NS


class CachedIo:
    """Block path through the page cache and the batched rounds."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def read_block(self, fd: int, lblk: int) -> bytes:
        return self._get(fd, lblk, Intent.READ)

    def write_block(self, fd: int, lblk: int, data: bytes) -> None:
        # Whole-page install; never needs the old content.
        self.engine.cache.put_block(fd, lblk, data)

    def _get(self, fd: int, lblk: int, intent: Intent) -> bytes:
        engine = self.engine
        while True:
            data, outcome = engine.cache.get_block(fd, lblk, intent)
            if outcome is Outcome.SHUFFLE_REQUIRED:
                engine.shuffle_now()
                continue
            if outcome is Outcome.FETCHED:
                engine.maybe_eager_shuffle()
            return data


class DirectIo:
    """Unprotected baseline: immediate host calls, fixed latency each."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def _tick(self) -> None:
        clock = self.engine.clock
        clock.advance_to(clock.now() + self.engine.config.passthrough_latency_ns)

    def read_block(self, fd: int, lblk: int) -> bytes:
        self._tick()
        return self.engine.store.read_block(self.engine.fs.phys_of(fd, lblk))

    def write_block(self, fd: int, lblk: int, data: bytes) -> None:
        self._tick()
        self.engine.store.write_block(self.engine.fs.phys_of(fd, lblk), data)


class _ShuffleIo:
    """Routes shuffle traffic through the scheduler. Writes are queued
    so the following read slot's round carries them; the shuffle's own
    pumping keeps the queue depth at one."""

    def __init__(self, engine: "Engine"):
        self.engine = engine

    def read_phys(self, phys: int) -> bytes:
        comp = self.engine.sched.submit_read(phys)
        while not comp.done:
            self.engine.run_one_round()
        return comp.data

    def write_phys(self, phys: int, data: bytes) -> None:
        self.engine.sched.submit_write(phys, data)

    def pump_dummy_read(self) -> None:
        self.engine.run_one_round()

    def peek_cache(self, fd: int, lblk: int) -> bytes | None:
        return self.engine.cache.peek(fd, lblk)


@dataclass
class NetLink:
    """Enclave-side state for one peer link."""

    endpoint: int
    session: PeerSession
    shaper: PeerShaper
    inbox: deque = field(default_factory=deque)
    rx_payload_bytes: int = 0
    rx_errors: int = 0


class EchoPeer:
    """Environment-side remote service for tests and self-contained
    runs. Shaped exactly like an enclave link; echoes real payloads."""

    def __init__(self, host, endpoint: int, session: PeerSession,
                 shaping: ShapingClass, start_ns: int = 0):
        self.host = host
        self.endpoint = endpoint
        self.session = session
        self.shaper = PeerShaper(shaping, session, start_ns)
        self.received_real = 0
        self.received_dummy = 0
        self.rx_errors = 0
        self.dropped = 0

    def next_due_ns(self) -> int:
        return self.shaper.next_due_ns()

    def pump(self, now_ns: int) -> None:
        self._collect_egress()
        for frame, _real in self.shaper.tick(now_ns):
            self.host.deliver_frame(self.endpoint, frame)

    def _collect_egress(self) -> None:
        rest = deque()
        while self.host.egress:
            ep, frame = self.host.egress.popleft()
            if ep != self.endpoint:
                rest.append((ep, frame))
                continue
            try:
                payload = self.session.open_packet(frame)
            except (IntegrityError, ReplayError, StaleCounterError, SizeError):
                self.rx_errors += 1
                continue
            if not payload:
                self.received_dummy += 1
                continue
            self.received_real += 1
            try:
                self.shaper.enqueue(payload)
            except Exception:
                # A real network would drop under overload; so do we.
                self.dropped += 1
        self.host.egress.extend(rest)


class Engine:
    """One mounted image, one workload run."""

    def __init__(self, iface: HostInterface, store: BlockStore, fs: BlockFs,
                 rng: RngTree, config: EngineConfig | None = None,
                 oblivious: bool = True):
        self.iface = iface
        self.store = store
        self.fs = fs
        self.rng = rng
        self.config = config if config is not None else EngineConfig()
        self.oblivious = oblivious
        self.clock = iface.host.clock
        self.round_target: int | None = None
        self.shuffles = 0
        self.last_shuffle: ShuffleStats | None = None
        self.payload_bytes = 0
        self.links: list[NetLink] = []
        self._links_by_endpoint: dict[int, NetLink] = {}
        self.external_pumps: list = []
        self.unknown_frames = 0

        if oblivious:
            self.sched = RoundScheduler(
                store, fs.dummy_blocks(), rng.stream("dummy"), self.config.round)
            capacity = self.config.cache_capacity
            if capacity is None:
                capacity = default_capacity(store.n_blocks)
            self.cache = PageCache(
                capacity,
                phys_of=fs.phys_of,
                fetch=self._fetch_phys,
                writeback=self._queue_writeback,
            )
            self.io = CachedIo(self)
            self._shuffle_io = _ShuffleIo(self)
        else:
            self.sched = None
            self.cache = None
            self.io = DirectIo(self)

    # Observation window ----------------------------------------------

    def start_observation(self) -> None:
        """Drop setup traffic; trace and mutation counts restart
        together so completeness stays checkable."""
        self.iface.trace.reset()
        self.iface.host.boundary_mutations = 0

    @property
    def rounds_done(self) -> int:
        return self.sched.rounds if self.sched is not None else 0

    @property
    def elapsed_ns(self) -> int:
        if self.oblivious:
            return self.rounds_done * self.config.round.interval_ns
        return self.clock.now()

    # Cache plumbing ----------------------------------------------------

    def _fetch_phys(self, phys: int) -> bytes:
        queued = self.sched.pending_write_for(phys)
        if queued is not None:
            # The freshest content is still in the write queue; rounds
            # run reads before writes, so a host read now would return
            # stale bytes. Serve from the queue and spend no read.
            return queued
        comp = self.sched.submit_read(phys)
        while not comp.done:
            self.run_one_round()
        return comp.data

    def _queue_writeback(self, phys: int, data: bytes) -> None:
        self.sched.submit_write(phys, data)

    # Rounds -------------------------------------------------------------

    def run_one_round(self) -> None:
        if self.sched is None:
            raise ModeError("batched rounds exist only on the protected path")
        if self.round_target is not None and self.rounds_done >= self.round_target:
            raise RoundBudgetExhausted(f"round budget of {self.round_target} spent")
        t = self.rounds_done * self.config.round.interval_ns
        self._run_net_until(t)
        self.clock.advance_to(t)
        self.sched.run_round(t)

    def run_rounds(self, n: int) -> None:
        for _ in range(n):
            self.run_one_round()

    def _drain(self) -> None:
        while self.sched.pending_reads > 0 or self.sched.pending_writes > 0:
            self.run_one_round()

    # Shuffle ------------------------------------------------------------

    def shuffle_now(self, fds=None) -> ShuffleStats:
        if not self.oblivious:
            raise ModeError("the passthrough path never shuffles")
        self.cache.flush()
        self._drain()
        stats = oblivious_shuffle(self.fs, self._shuffle_io,
                                  self.rng.stream("shuffle"), fds)
        self._drain()
        self.cache.end_epoch()
        self.shuffles += 1
        self.last_shuffle = stats
        return stats

    def maybe_eager_shuffle(self) -> None:
        at = self.config.eager_shuffle_at
        if at is not None and len(self.cache.epoch_fetched) >= at:
            self.shuffle_now()

    # Network ------------------------------------------------------------

    def add_link(self, endpoint: int, session: PeerSession,
                 shaping: ShapingClass | None = None, start_ns: int = 0) -> NetLink:
        if endpoint in self._links_by_endpoint:
            raise ParameterError(f"endpoint {endpoint} already linked")
        shaping = shaping if shaping is not None else ShapingClass()
        link = NetLink(endpoint, session, PeerShaper(shaping, session, start_ns))
        self.links.append(link)
        self._links_by_endpoint[endpoint] = link
        return link

    def add_external_pump(self, pump) -> None:
        """Environment actors (peers) advanced on their own grid."""
        self.external_pumps.append(pump)

    def net_send(self, endpoint: int, payload: bytes) -> None:
        self.link(endpoint).shaper.enqueue(payload)

    def link(self, endpoint: int) -> NetLink:
        try:
            return self._links_by_endpoint[endpoint]
        except KeyError:
            raise ParameterError(f"no link at endpoint {endpoint}") from None

    def _run_net_until(self, t_ns: int) -> None:
        if not self.links and not self.external_pumps:
            return
        while True:
            due = None
            for pump in self.external_pumps:
                d = pump.next_due_ns()
                if d is not None and (due is None or d < due):
                    due = d
            for link in self.links:
                d = link.shaper.next_due_ns()
                if due is None or d < due:
                    due = d
            if due is None or due > t_ns:
                return
            self.clock.advance_to(due)
            for pump in self.external_pumps:
                if pump.next_due_ns() == due:
                    pump.pump(due)
            emitted = False
            for link in self.links:
                if link.shaper.next_due_ns() == due:
                    for frame, real in link.shaper.tick(due):
                        self.iface.net_write(link.endpoint, frame, dummy=not real)
                    emitted = True
            if emitted:
                self._service_ingress()

    def _service_ingress(self) -> None:
        while True:
            readable, _writable = self.iface.net_poll()
            if not readable:
                return
            try:
                endpoint, frame = self.iface.net_read()
            except WouldBlock:
                return
            self._dispatch(endpoint, frame)

    def _dispatch(self, endpoint: int, frame: bytes) -> None:
        link = self._links_by_endpoint.get(endpoint)
        if link is None:
            self.unknown_frames += 1
            return
        try:
            payload = link.session.open_packet(frame)
        except (IntegrityError, ReplayError, StaleCounterError, SizeError):
            link.rx_errors += 1
            return
        if payload:
            link.inbox.append(payload)
            link.rx_payload_bytes += len(payload)

    # File-level helpers ---------------------------------------------------

    def regular_fd(self, index: int) -> int:
        """Workloads address data files by position, skipping the
        dummy-pad and donor files that share the descriptor space."""
        fds = self.fs.files_with_flag(FLAG_REGULAR)
        if not 0 <= index < len(fds):
            raise DescriptorError(
                f"data file {index} does not exist ({len(fds)} present)")
        return fds[index]

    def read_file(self, fd: int, offset: int, length: int) -> bytes:
        data = self.fs.file_read(self.io, fd, offset, length)
        self.payload_bytes += len(data)
        return data

    def write_file(self, fd: int, offset: int, data: bytes) -> None:
        self.fs.file_write(self.io, fd, offset, data)
        self.payload_bytes += len(data)

    # Reporting -------------------------------------------------------------

    def counters(self) -> dict:
        out = {
            "rounds": self.rounds_done,
            "real_reads": 0,
            "dummy_reads": 0,
            "real_writes": 0,
            "dummy_writes": 0,
            "shuffles": self.shuffles,
            "cache_hits": self.cache.hits if self.cache is not None else 0,
            "net_real": sum(l.session.sent_real for l in self.links),
            "net_dummy": sum(l.session.sent_dummy for l in self.links),
        }
        if self.sched is not None:
            out.update(
                real_reads=self.sched.real_reads,
                dummy_reads=self.sched.dummy_reads,
                real_writes=self.sched.real_writes,
                dummy_writes=self.sched.dummy_writes,
            )
        return out


@dataclass(frozen=True)
class ImageBundle:
    """A freshly built image plus everything needed to mount it."""

    image: bytes
    key: bytes | None
    verity_root: bytes | None
    data_fds: tuple[int, ...]


def build_image(n_blocks: int, mode: ProtectionMode, files=(), *,
                seed: int = 0, key: bytes | None = None,
                dummy_fraction: float = 0.10, max_files: int | None = None,
                max_file_blocks: int | None = None) -> ImageBundle:
    """Format a new image in memory and store ``files`` (one bytes
    object each) as data files.

    On encrypted images every block left untouched by the files is
    filled with sealed noise; an image whose content distinguished
    data blocks from padding would leak the layout before the first
    mount. Verity images are sealed read-only instead.
    """
    layout = layout_for(n_blocks, mode)
    host = Host(new_image(n_blocks, mode), SimClock())
    iface = HostInterface(host)
    if mode.encrypted and key is None:
        key = os.urandom(32)
    store = BlockStore(iface, layout, key if mode.encrypted else None,
                       [None] * n_blocks)
    rng = RngTree(seed)
    fs = BlockFs.format(n_blocks, rng.stream("layout"), max_files=max_files,
                        max_file_blocks=max_file_blocks,
                        dummy_fraction=dummy_fraction)
    engine = Engine(iface, store, fs, rng, oblivious=False)
    fds = []
    for data in files:
        fd = fs.create_file(FLAG_REGULAR)
        if data:
            engine.write_file(fd, 0, data)
        fds.append(fd)
    fs.persist(store)
    root = None
    if mode is ProtectionMode.VERITY:
        root = store.seal_readonly()
    elif mode.encrypted:
        for phys in range(n_blocks):
            if store.slots[phys] is None:
                store.write_block(phys, os.urandom(BLOCK_SIZE))
        store.persist_metadata()
    return ImageBundle(bytes(host.image), key, root, tuple(fds))


def run_workload(engine: Engine, workload, target_rounds: int | None = None) -> bool:
    """Drive a workload, truncating at the round budget and padding an
    early finish with idle rounds, so runs with the same target produce
    the same number of rounds no matter what the workload did.

    Returns True when the workload ran to completion.
    """
    engine.round_target = target_rounds
    completed = True
    try:
        for _ in workload.steps(engine):
            pass
    except RoundBudgetExhausted:
        completed = False
    if engine.oblivious and target_rounds is not None:
        while engine.rounds_done < target_rounds:
            engine.run_one_round()
    engine.round_target = None
    return completed
