"""Workload mini-language.

A workload is named by a single call-style expression::

    seqread(fd, length)     read length bytes sequentially (0 = whole file)
    randread(fd, count)     count single-block reads at random offsets
    reread(lblk, count)     hammer one block of file 0 (cache showcase)
    seqwrite(fd, length)    write length bytes sequentially
    kvtrace(opsfile)        replay "put k v" / "get k" lines against file 0
    netecho(endpoint, n)    bounce n payload bytes off a peer
    idle(rounds)            do nothing for that many rounds

Each workload is a generator of steps; the engine's run harness drives
it and may cut it off when the round budget is spent. Random choices
draw from the engine's seeded stream, so a given (seed, workload)
replays identically.
"""

from __future__ import annotations

import hashlib
import re

from .channel import max_payload
from .errors import ModeError, ParameterError, RangeError
from .hostiface import BLOCK_SIZE

_CALL_RE = re.compile(r"^\s*([a-z_]+)\s*\(\s*(.*?)\s*\)\s*$")

NET_BACKLOG_CAP = 32
ECHO_FILL = b"\xa5"


class Workload:
    def __init__(self, spec_text: str):
        self.spec_text = spec_text

    def steps(self, engine):
        raise NotImplementedError

    def default_rounds(self) -> int | None:
        """Round budget implied by the workload itself, if any."""
        return None

    def __repr__(self):
        return f"<{type(self).__name__} {self.spec_text}>"


class SeqRead(Workload):
    def __init__(self, spec_text, fd: int, length: int):
        super().__init__(spec_text)
        self.fd = fd
        self.length = length

    def steps(self, engine):
        fd = engine.regular_fd(self.fd)
        size = engine.fs.file_size(fd)
        length = size if self.length == 0 else min(self.length, size)
        pos = 0
        while pos < length:
            n = min(BLOCK_SIZE, length - pos)
            engine.read_file(fd, pos, n)
            pos += n
            yield


class SeqWrite(Workload):
    def __init__(self, spec_text, fd: int, length: int):
        super().__init__(spec_text)
        self.fd = fd
        self.length = length

    def steps(self, engine):
        fd = engine.regular_fd(self.fd)
        rng = engine.rng.stream("workload")
        pos = 0
        while pos < self.length:
            n = min(BLOCK_SIZE, self.length - pos)
            engine.write_file(fd, pos, rng.random_bytes(n))
            pos += n
            yield


class RandRead(Workload):
    def __init__(self, spec_text, fd: int, count: int):
        super().__init__(spec_text)
        self.fd = fd
        self.count = count

    def steps(self, engine):
        fd = engine.regular_fd(self.fd)
        rng = engine.rng.stream("workload")
        size = engine.fs.file_size(fd)
        nblocks = engine.fs.file_blocks(fd)
        if nblocks == 0:
            return
        for _ in range(self.count):
            lblk = rng.randbelow(nblocks)
            n = min(BLOCK_SIZE, size - lblk * BLOCK_SIZE)
            engine.read_file(fd, lblk * BLOCK_SIZE, n)
            yield


class ReRead(Workload):
    def __init__(self, spec_text, lblk: int, count: int, fd: int = 0):
        super().__init__(spec_text)
        self.fd = fd
        self.lblk = lblk
        self.count = count

    def steps(self, engine):
        fd = engine.regular_fd(self.fd)
        size = engine.fs.file_size(fd)
        off = self.lblk * BLOCK_SIZE
        if off >= size:
            raise RangeError("block beyond end of file")
        n = min(BLOCK_SIZE, size - off)
        for _ in range(self.count):
            engine.read_file(fd, off, n)
            yield


# ---------------------------------------------------------------------------
# Tiny key-value store: fixed 64-byte slots, hash placement with linear
# probing. Exists to give the simulator a pointer-chasing access pattern.
# ---------------------------------------------------------------------------

KV_SLOT = 64
KV_MAX_KEY = 23
KV_MAX_VAL = 39
KV_PROBE_LIMIT = 64


class KvStore:
    """``fd`` here is a raw descriptor; workloads resolve data-file
    indices before constructing the store."""

    def __init__(self, engine, fd: int):
        self.engine = engine
        self.fd = fd
        self.capacity = engine.fs.file_size(fd) // KV_SLOT
        if self.capacity < 1:
            raise ParameterError("store file too small for even one slot")

    def _home(self, key: bytes) -> int:
        h = hashlib.sha256(key).digest()
        return int.from_bytes(h[:8], "big") % self.capacity

    def _probe(self, key: bytes):
        idx = self._home(key)
        for _ in range(min(KV_PROBE_LIMIT, self.capacity)):
            raw = self.engine.read_file(self.fd, idx * KV_SLOT, KV_SLOT)
            klen = raw[0]
            if klen == 0:
                yield idx, None, None
                return
            vlen = raw[1 + KV_MAX_KEY]
            yield idx, raw[1:1 + klen], raw[2 + KV_MAX_KEY:2 + KV_MAX_KEY + vlen]
            idx = (idx + 1) % self.capacity

    def get(self, key: bytes) -> bytes | None:
        for _idx, k, v in self._probe(key):
            if k is None:
                return None
            if k == key:
                return v
        return None

    def put(self, key: bytes, value: bytes) -> None:
        if not 0 < len(key) <= KV_MAX_KEY:
            raise ParameterError(f"keys are 1..{KV_MAX_KEY} bytes")
        if len(value) > KV_MAX_VAL:
            raise ParameterError(f"values are at most {KV_MAX_VAL} bytes")
        for idx, k, _v in self._probe(key):
            if k is None or k == key:
                slot = bytes([len(key)]) + key.ljust(KV_MAX_KEY, b"\x00") \
                    + bytes([len(value)]) + value.ljust(KV_MAX_VAL, b"\x00")
                self.engine.write_file(self.fd, idx * KV_SLOT, slot)
                return
        raise ParameterError("probe limit hit; store too full")


class KvTrace(Workload):
    def __init__(self, spec_text, ops_path: str, fd: int = 0):
        super().__init__(spec_text)
        self.ops_path = ops_path
        self.fd = fd

    @staticmethod
    def parse_ops(text: str) -> list[tuple]:
        ops = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "put" and len(parts) == 3:
                ops.append(("put", parts[1].encode(), parts[2].encode()))
            elif parts[0] == "get" and len(parts) == 2:
                ops.append(("get", parts[1].encode()))
            else:
                raise ParameterError(f"ops line {lineno}: cannot parse {line!r}")
        return ops

    def steps(self, engine):
        with open(self.ops_path, "r", encoding="utf-8") as fh:
            ops = self.parse_ops(fh.read())
        store = KvStore(engine, engine.regular_fd(self.fd))
        for op in ops:
            if op[0] == "put":
                store.put(op[1], op[2])
            else:
                store.get(op[1])
            yield


class NetEcho(Workload):
    def __init__(self, spec_text, endpoint: int, nbytes: int):
        super().__init__(spec_text)
        self.endpoint = endpoint
        self.nbytes = nbytes

    def steps(self, engine):
        if not engine.oblivious:
            raise ModeError("echo traffic rides the round cadence; "
                            "run it on the protected path")
        link = engine.link(self.endpoint)
        chunk = max_payload(link.session.mtu)
        sent = 0
        received = 0
        while received < self.nbytes:
            while sent < self.nbytes and link.shaper.backlog < NET_BACKLOG_CAP:
                n = min(chunk, self.nbytes - sent)
                engine.net_send(self.endpoint, ECHO_FILL * n)
                sent += n
            while link.inbox:
                back = link.inbox.popleft()
                received += len(back)
                engine.payload_bytes += len(back)
            engine.run_one_round()
            yield


class Idle(Workload):
    def __init__(self, spec_text, rounds: int):
        super().__init__(spec_text)
        self.rounds = rounds

    def default_rounds(self) -> int | None:
        return self.rounds

    def steps(self, engine):
        if not engine.oblivious:
            return
        for _ in range(self.rounds):
            engine.run_one_round()
            yield


# ---------------------------------------------------------------------------
# Parsing.
# ---------------------------------------------------------------------------

def _int_arg(name: str, raw: str) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        raise ParameterError(f"{name}: expected an integer, got {raw!r}") from None


def parse_workload(text: str) -> Workload:
    m = _CALL_RE.match(text)
    if not m:
        raise ParameterError(f"cannot parse workload {text!r}")
    name, argstr = m.group(1), m.group(2)
    args = [a.strip() for a in argstr.split(",")] if argstr else []

    def want(n: int):
        if len(args) != n:
            raise ParameterError(f"{name} takes {n} argument(s), got {len(args)}")

    if name == "seqread":
        want(2)
        return SeqRead(text, _int_arg(name, args[0]), _int_arg(name, args[1]))
    if name == "seqwrite":
        want(2)
        return SeqWrite(text, _int_arg(name, args[0]), _int_arg(name, args[1]))
    if name == "randread":
        want(2)
        return RandRead(text, _int_arg(name, args[0]), _int_arg(name, args[1]))
    if name == "reread":
        want(2)
        return ReRead(text, _int_arg(name, args[0]), _int_arg(name, args[1]))
    if name == "kvtrace":
        want(1)
        return KvTrace(text, args[0])
    if name == "netecho":
        want(2)
        return NetEcho(text, _int_arg(name, args[0]), _int_arg(name, args[1]))
    if name == "idle":
        want(1)
        return Idle(text, _int_arg(name, args[0]))
    raise ParameterError(f"unknown workload {name!r}")
