"""Randomness sources.

Two backends behind one interface: an HMAC-SHA256 deterministic bit
generator for seeded (reproducible) runs, and SystemRandom otherwise.
The seeded generator is still a cryptographically strong construction;
what makes a run reproducible is the caller supplying the seed, not a
weaker algorithm.

Layout, dummy-target, and shuffle decisions draw from named substreams
so that adding draws to one subsystem never perturbs another. AEAD
nonces deliberately do NOT come from here; they are always fresh OS
randomness, so two runs with the same seed produce identical traces but
different ciphertexts.
"""

from __future__ import annotations

import hashlib
import hmac
import random


class HmacDrbg:
    """Deterministic byte generator (HMAC_DRBG style, SHA-256)."""

    def __init__(self, seed_material: bytes):
        self._k = b"\x00" * 32
        self._v = b"\x01" * 32
        self._update(seed_material)

    def _hmac(self, key: bytes, data: bytes) -> bytes:
        return hmac.new(key, data, hashlib.sha256).digest()

    def _update(self, provided: bytes = b"") -> None:
        self._k = self._hmac(self._k, self._v + b"\x00" + provided)
        self._v = self._hmac(self._k, self._v)
        if provided:
            self._k = self._hmac(self._k, self._v + b"\x01" + provided)
            self._v = self._hmac(self._k, self._v)

    def random_bytes(self, n: int) -> bytes:
        out = b""
        while len(out) < n:
            self._v = self._hmac(self._k, self._v)
            out += self._v
        self._update()
        return out[:n]


class Rng:
    """Uniform sampling helpers over either backend."""

    def __init__(self, seed_material: bytes | None = None):
        if seed_material is None:
            self._sys: random.SystemRandom | None = random.SystemRandom()
            self._drbg = None
        else:
            self._sys = None
            self._drbg = HmacDrbg(seed_material)

    def random_bytes(self, n: int) -> bytes:
        if self._drbg is not None:
            return self._drbg.random_bytes(n)
        return self._sys.randbytes(n)  # type: ignore[union-attr]

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n). Rejection sampling, no modulo bias."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        if self._sys is not None:
            return self._sys.randrange(n)
        nbytes = (n.bit_length() + 7) // 8
        limit = (256**nbytes // n) * n
        while True:
            x = int.from_bytes(self._drbg.random_bytes(nbytes), "big")
            if x < limit:
                return x % n

    def choice(self, seq):
        if not seq:
            raise IndexError("choice from empty sequence")
        return seq[self.randbelow(len(seq))]


class RngTree:
    """Master seed fanned out into independent named streams."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._streams: dict[str, Rng] = {}

    def stream(self, name: str) -> Rng:
        if name not in self._streams:
            if self.seed is None:
                self._streams[name] = Rng(None)
            else:
                material = hashlib.sha256(
                    self.seed.to_bytes(16, "big", signed=True) + b"/" + name.encode()
                ).digest()
                self._streams[name] = Rng(material)
        return self._streams[name]
