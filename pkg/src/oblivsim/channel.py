"""Authenticated point-to-point links and provisioning.

Sessions are keyed from a static Diffie-Hellman exchange (X25519):
each direction gets its own AEAD key, derived by hashing the shared
secret with the ordered pair of public keys, so sender and receiver
agree without a handshake round trip. Handshake/rekey protocol
machinery is deliberately out of scope.

Every frame on the wire is exactly MTU bytes::

    counter u64 BE | AEAD( inner_len u16 BE | payload | pad ) | tag[16]

The counter is associated data (and feeds the nonce); inner_len and the
payload are encrypted, so observable length is always the MTU. Padding
frames carry inner_len 0 and random pad bytes; receivers decrypt,
notice the empty payload and drop them. Received counters pass a
64-wide sliding replay window: duplicates inside the window and
counters that fell off the back are both rejected, each with its own
error.

Provisioning: the first established session is the trust root. A
provisioning record (disk key, verity root, peer list, command line)
is accepted exactly once and only over that first session. Attestation
is stubbed; anything provisioned is marked "unverified".
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    HandshakeError,
    IntegrityError,
    ParameterError,
    PolicyError,
    ReplayError,
    SizeError,
    StaleCounterError,
)
from .hostiface import DEFAULT_MTU

COUNTER_BYTES = 8
LEN_BYTES = 2
TAG_BYTES = 16
REPLAY_WINDOW = 64

PROV_MAGIC = b"OBPV"
PROV_VERSION = 1


def max_payload(mtu: int = DEFAULT_MTU) -> int:
    return mtu - COUNTER_BYTES - LEN_BYTES - TAG_BYTES


class StaticIdentity:
    """Long-lived X25519 keypair."""

    def __init__(self, private: X25519PrivateKey):
        self._private = private
        self.public_bytes = private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls) -> "StaticIdentity":
        return cls(X25519PrivateKey.generate())

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> "StaticIdentity":
        if len(raw) != 32:
            raise HandshakeError("private key must be 32 bytes")
        return cls(X25519PrivateKey.from_private_bytes(raw))

    def shared_secret(self, peer_public: bytes) -> bytes:
        try:
            return self._private.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as exc:
            raise HandshakeError(f"bad peer public key: {exc}") from exc


@dataclass(frozen=True)
class PeerIdentity:
    public_key: bytes
    address: str = ""
    rate_bps: int = 200_000_000


def _directional_key(secret: bytes, sender_pub: bytes, receiver_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=b"oblivsim-link-v1",
        info=sender_pub + receiver_pub,
    ).derive(secret)


class ReplayWindow:
    """Sliding acceptance window over frame counters (width 64)."""

    def __init__(self, width: int = REPLAY_WINDOW):
        self.width = width
        self.max_seen = 0
        self._bits = 0

    def check(self, counter: int) -> None:
        """Accept exactly-once; mutates state only on acceptance."""
        if counter < 1:
            raise StaleCounterError("counters start at 1")
        if counter > self.max_seen:
            shift = counter - self.max_seen
            self._bits = (self._bits << shift) & ((1 << self.width) - 1)
            self._bits |= 1
            self.max_seen = counter
            return
        age = self.max_seen - counter
        if age >= self.width:
            raise StaleCounterError(
                f"counter {counter} fell behind the window (max {self.max_seen})")
        if self._bits & (1 << age):
            raise ReplayError(f"counter {counter} already accepted")
        self._bits |= 1 << age


class PeerSession:
    """One established link: directional keys plus replay state."""

    def __init__(self, send_key: bytes, recv_key: bytes, mtu: int = DEFAULT_MTU):
        if mtu < COUNTER_BYTES + LEN_BYTES + TAG_BYTES + 1:
            raise ParameterError("MTU too small for the frame format")
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self.mtu = mtu
        self.send_counter = 0
        self.window = ReplayWindow()
        self.sent_real = 0
        self.sent_dummy = 0
        self.received_real = 0
        self.received_dummy = 0

    @staticmethod
    def _nonce(counter: int) -> bytes:
        return b"\x00\x00\x00\x00" + struct.pack(">Q", counter)

    def _seal(self, inner_len: int, body: bytes) -> bytes:
        self.send_counter += 1
        header = struct.pack(">Q", self.send_counter)
        inner = struct.pack(">H", inner_len) + body
        sealed = self._send.encrypt(self._nonce(self.send_counter), inner, header)
        return header + sealed

    def seal_packet(self, payload: bytes) -> bytes:
        limit = max_payload(self.mtu)
        if len(payload) > limit:
            raise SizeError(f"payload exceeds {limit} bytes")
        body = payload + b"\x00" * (limit - len(payload))
        self.sent_real += 1
        return self._seal(len(payload), body)

    def seal_dummy(self) -> bytes:
        """Padding frame: empty payload, random filler."""
        self.sent_dummy += 1
        return self._seal(0, os.urandom(max_payload(self.mtu)))

    def open_packet(self, frame: bytes) -> bytes:
        if len(frame) != self.mtu:
            raise SizeError("frame is not MTU-sized")
        header = frame[:COUNTER_BYTES]
        counter = struct.unpack(">Q", header)[0]
        self.window.check(counter)
        try:
            inner = self._recv.decrypt(self._nonce(counter), frame[COUNTER_BYTES:], header)
        except InvalidTag as exc:
            raise IntegrityError("frame failed authentication") from exc
        inner_len = struct.unpack(">H", inner[:LEN_BYTES])[0]
        if inner_len > max_payload(self.mtu):
            raise SizeError("inner length field exceeds the frame")
        if inner_len == 0:
            self.received_dummy += 1
            return b""
        self.received_real += 1
        return inner[LEN_BYTES:LEN_BYTES + inner_len]


def establish(local: StaticIdentity, peer: PeerIdentity,
              mtu: int = DEFAULT_MTU) -> PeerSession:
    """Derive the two directional keys shared with ``peer``."""
    if len(peer.public_key) != 32:
        raise HandshakeError("peer public key must be 32 bytes")
    if peer.public_key == local.public_bytes:
        raise HandshakeError("cannot establish a session with ourselves")
    secret = local.shared_secret(peer.public_key)
    send_key = _directional_key(secret, local.public_bytes, peer.public_key)
    recv_key = _directional_key(secret, peer.public_key, local.public_bytes)
    return PeerSession(send_key, recv_key, mtu)


# ---------------------------------------------------------------------------
# Provisioning.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProvisioningSecrets:
    disk_key: bytes | None = None
    verity_root: bytes | None = None
    peers: tuple[PeerIdentity, ...] = ()
    exec_path: str = ""
    exec_args: tuple[str, ...] = ()

    def encode(self) -> bytes:
        """Length-prefixed binary record (versioned)."""
        def lv(b: bytes) -> bytes:
            return struct.pack(">H", len(b)) + b

        out = [PROV_MAGIC, struct.pack(">B", PROV_VERSION)]
        out.append(lv(self.disk_key or b""))
        out.append(lv(self.verity_root or b""))
        out.append(struct.pack(">H", len(self.peers)))
        for p in self.peers:
            if len(p.public_key) != 32:
                raise ParameterError("peer public keys are 32 bytes")
            out.append(p.public_key)
            out.append(lv(p.address.encode()))
            out.append(struct.pack(">Q", p.rate_bps))
        out.append(lv(self.exec_path.encode()))
        out.append(struct.pack(">H", len(self.exec_args)))
        for a in self.exec_args:
            out.append(lv(a.encode()))
        return b"".join(out)

    @classmethod
    def decode(cls, raw: bytes) -> "ProvisioningSecrets":
        if raw[:4] != PROV_MAGIC:
            raise ParameterError("not a provisioning record")
        if raw[4] != PROV_VERSION:
            raise ParameterError(f"unsupported record version {raw[4]}")
        pos = 5

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(raw):
                raise ParameterError("truncated provisioning record")
            out = raw[pos:pos + n]
            pos += n
            return out

        def lv() -> bytes:
            return take(struct.unpack(">H", take(2))[0])

        disk_key = lv() or None
        root = lv() or None
        n_peers = struct.unpack(">H", take(2))[0]
        peers = []
        for _ in range(n_peers):
            pub = take(32)
            addr = lv().decode()
            rate = struct.unpack(">Q", take(8))[0]
            peers.append(PeerIdentity(pub, addr, rate))
        exec_path = lv().decode()
        n_args = struct.unpack(">H", take(2))[0]
        args = tuple(lv().decode() for _ in range(n_args))
        return cls(disk_key, root, tuple(peers), exec_path, args)


@dataclass
class Endpoint:
    """The provisioned side: tracks session order and enforces the
    first-peer trust rule. Attestation is a stub; provisioned state is
    always flagged unverified."""

    identity: StaticIdentity
    mtu: int = DEFAULT_MTU
    sessions: list[PeerSession] = field(default_factory=list)
    provisioned: ProvisioningSecrets | None = None
    attestation: str = "unverified"

    def establish_with(self, peer: PeerIdentity) -> PeerSession:
        session = establish(self.identity, peer, self.mtu)
        self.sessions.append(session)
        return session

    def provision(self, session: PeerSession, secrets: ProvisioningSecrets) -> None:
        if not self.sessions or session is not self.sessions[0]:
            raise PolicyError("provisioning is accepted from the first peer only")
        if self.provisioned is not None:
            raise PolicyError("already provisioned")
        self.provisioned = secrets
