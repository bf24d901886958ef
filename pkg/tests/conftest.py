"""Shared fixtures: in-memory images, mounted engines, and the
acceptance summary printed at the end of the run."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from oblivsim import (
    BlockFs,
    BlockStore,
    Engine,
    EngineConfig,
    Host,
    HostInterface,
    HostTrace,
    ImageBundle,
    ProtectionMode,
    RngTree,
    SimClock,
    build_image,
    trace_fingerprint,
)

DEFAULT_KEY = bytes(range(32))


@dataclass
class Mounted:
    host: Host
    iface: HostInterface
    trace: HostTrace
    store: BlockStore
    fs: BlockFs
    engine: Engine


def mount(bundle: ImageBundle, *, seed: int = 0, oblivious: bool = True,
          config: EngineConfig | None = None) -> Mounted:
    host = Host(bytearray(bundle.image), SimClock())
    rcfg = (config or EngineConfig()).round
    trace = HostTrace(meta=trace_fingerprint(rcfg, host.mtu))
    iface = HostInterface(host, trace)
    store = BlockStore.mount(iface, key=bundle.key,
                             trusted_root=bundle.verity_root)
    rng = RngTree(seed)
    fs = BlockFs.load(store, rng.stream("layout"))
    engine = Engine(iface, store, fs, rng, config, oblivious=oblivious)
    return Mounted(host, iface, trace, store, fs, engine)


@pytest.fixture(scope="session")
def small_bundle() -> ImageBundle:
    """64-block encrypted image with two data files (8 and 3 blocks)."""
    return build_image(
        64, ProtectionMode.CRYPT_INTEGRITY,
        [bytes(range(256)) * 16 * 8, b"\xab" * 4096 * 3],
        seed=7, key=DEFAULT_KEY)


@pytest.fixture
def small() -> Mounted:
    bundle = build_image(
        64, ProtectionMode.CRYPT_INTEGRITY,
        [bytes(range(256)) * 16 * 8, b"\xab" * 4096 * 3],
        seed=7, key=DEFAULT_KEY)
    return mount(bundle, seed=7)


# ---------------------------------------------------------------------------
# Acceptance reporting: tests/test_acceptance.py records one line per
# criterion; they are printed as their own section after the run.
# ---------------------------------------------------------------------------

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance")
    for line in _acceptance_lines:
        terminalreporter.write_line(line)
