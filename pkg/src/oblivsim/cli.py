"""Command line front end.

Six subcommands cover the life of an image::

    create-image   build and populate an image file
    run            mount a copy in memory, drive a workload, write the trace
    bench          compare wall-clock throughput of both data paths
    shuffle        re-randomize the physical layout of an image file
    fsck           metadata consistency check
    provision      build a provisioning record and demo its delivery

``run`` never writes the image file back; each run works on an
in-memory copy so a given (image, seed, workload) is replayable
forever.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

from .adversary import (
    compare_traces,
    dummy_disk_offsets,
    rate_report,
    uniformity_test,
)
from .blockcrypto import BlockStore, ProtectionMode
from .blockfs import FLAG_DUMMY, FLAG_REGULAR, BlockFs
from .channel import (
    Endpoint,
    PeerIdentity,
    ProvisioningSecrets,
    StaticIdentity,
    establish,
    max_payload,
)
from .engine import (
    EchoPeer,
    Engine,
    EngineConfig,
    build_image,
    run_workload,
    trace_fingerprint,
)
from .errors import InsufficientDataError, ModeError, SimError
from .hostiface import Host, HostInterface, SimClock
from .rng import RngTree
from .sched import DEFAULT_ROUND_INTERVAL_NS, RoundConfig
from .shaper import ShapingClass
from .trace import HostTrace
from .workload import parse_workload

MODE_BY_NAME = {
    "plain": ProtectionMode.PLAIN,
    "verity": ProtectionMode.VERITY,
    "crypt": ProtectionMode.CRYPT,
    "crypt-integrity": ProtectionMode.CRYPT_INTEGRITY,
}

SUMMARY_COLUMNS = [
    "rounds", "real_reads", "dummy_reads", "real_writes", "dummy_writes",
    "shuffles", "cache_hits", "net_real", "net_dummy", "bytes_per_sec",
]


def _hex_or_none(value: str | None) -> bytes | None:
    return bytes.fromhex(value) if value else None


# ---------------------------------------------------------------------------
# create-image
# ---------------------------------------------------------------------------

def cmd_create_image(args) -> int:
    mode = MODE_BY_NAME[args.mode]
    sources = [(path, Path(path).read_bytes()) for path in args.add or []]
    sources += [("<blank>", b"\x00" * n) for n in args.blank or []]
    bundle = build_image(
        args.blocks, mode, [data for _, data in sources],
        seed=args.seed, key=_hex_or_none(args.key),
        dummy_fraction=args.dummy_fraction, max_files=args.max_files,
        max_file_blocks=args.max_file_blocks)
    Path(args.out).write_bytes(bundle.image)

    # Report from a fresh mount, so every created image is proven
    # mountable before the command returns success.
    host = Host(bytearray(bundle.image), SimClock())
    store = BlockStore.mount(HostInterface(host), key=bundle.key,
                             trusted_root=bundle.verity_root)
    fs = BlockFs.load(store, RngTree(args.seed).stream("layout"))
    st = fs.stats()
    print(f"image: {args.out}")
    print(f"mode: {args.mode}")
    print(f"blocks: {args.blocks} data, {len(bundle.image)} bytes on disk")
    print(f"dummy blocks: {len(fs.dummy_blocks())}  free blocks: {fs.free_blocks}")
    print(f"files: {st.regular_files} data, {st.dummy_files} dummy-pad")
    for i, (fd, (origin, data)) in enumerate(zip(bundle.data_fds, sources)):
        print(f"  data file {i}: fd {fd}, {len(data)} bytes, from {origin}")
    if bundle.key is not None:
        print(f"key: {bundle.key.hex()}")
    if bundle.verity_root is not None:
        print(f"verity root: {bundle.verity_root.hex()}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _build_engine(args, rcfg: RoundConfig):
    image = bytearray(Path(args.image).read_bytes())
    host = Host(image, SimClock())
    trace = HostTrace(meta=trace_fingerprint(rcfg, host.mtu))
    iface = HostInterface(host, trace)
    store = BlockStore.mount(
        iface, key=_hex_or_none(args.key),
        trusted_root=_hex_or_none(args.verity_root))
    oblivious = args.mode == "oblivious"
    if oblivious and store.mode is not ProtectionMode.CRYPT_INTEGRITY:
        raise ModeError(
            "the protected path needs a crypt-integrity image; "
            f"this one is {store.mode.name.lower()}")
    rng = RngTree(args.seed)
    fs = BlockFs.load(store, rng.stream("layout"))
    cfg = EngineConfig(round=rcfg, cache_capacity=args.cache_k,
                       eager_shuffle_at=args.eager_shuffle_at)
    engine = Engine(iface, store, fs, rng, cfg, oblivious=oblivious)
    for i, rate in enumerate(args.peer or []):
        local = StaticIdentity.generate()
        remote = StaticIdentity.generate()
        enclave_session = establish(local, PeerIdentity(remote.public_bytes))
        peer_session = establish(remote, PeerIdentity(local.public_bytes))
        shaping = ShapingClass(rate_bps=rate)
        engine.add_link(i, enclave_session, shaping)
        engine.add_external_pump(EchoPeer(host, i, peer_session, shaping))
    return engine, trace


def _run_once(args, rcfg, workload_text: str, target: int | None):
    engine, trace = _build_engine(args, rcfg)
    wl = parse_workload(workload_text)
    if target is None:
        target = args.rounds if args.rounds else wl.default_rounds()
    engine.start_observation()
    t0 = time.perf_counter()
    completed = run_workload(engine, wl, target)
    wall_s = time.perf_counter() - t0
    return engine, trace, completed, wall_s


def _summary_row(engine: Engine) -> dict:
    row = engine.counters()
    elapsed = engine.elapsed_ns
    row["bytes_per_sec"] = (
        round(engine.payload_bytes * 1_000_000_000 / elapsed, 1) if elapsed else 0.0)
    return row


def cmd_run(args) -> int:
    rcfg = RoundConfig(interval_ns=args.round_interval)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    engine, trace, completed, wall_s = _run_once(args, rcfg, args.workload, None)
    (outdir / "trace.log").write_text(trace.export(ground_truth=args.ground_truth))
    row = _summary_row(engine)
    with open(outdir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerow({k: row[k] for k in SUMMARY_COLUMNS})

    sim_s = engine.elapsed_ns / 1e9
    print(f"workload: {args.workload}  ({'completed' if completed else 'cut off'})")
    print(f"rounds: {row['rounds']}  shuffles: {row['shuffles']}  "
          f"cache hits: {row['cache_hits']}")
    print(f"disk: {row['real_reads']}r+{row['dummy_reads']}d reads, "
          f"{row['real_writes']}r+{row['dummy_writes']}d writes")
    print(f"net: {row['net_real']} real + {row['net_dummy']} padding frames")
    print(f"sim elapsed: {sim_s:.6f} s   wall: {wall_s:.3f} s")
    print(f"goodput_sim_bytes_per_s: {row['bytes_per_sec']}")
    wall_bps = engine.payload_bytes / wall_s if wall_s > 0 else 0.0
    print(f"goodput_wall_bytes_per_s: {wall_bps:.1f}")
    for ep, series in rate_report(trace).items():
        print(f"endpoint {ep}: mean {series.mean_bps / 1e6:.3f} Mbit/s "
              f"over {len(series.bytes_per_window)} window(s)")

    if not args.assert_oblivious:
        return 0

    # Baseline: same image, config and seed, but an idle workload of the
    # same length. Anything workload-dependent in the trace shows up here.
    base_target = engine.rounds_done
    base_engine, base_trace, _, _ = _run_once(
        args, rcfg, f"idle({base_target})", base_target)
    (outdir / "baseline.log").write_text(
        base_trace.export(ground_truth=args.ground_truth))
    verdict = compare_traces(trace, base_trace)
    lines = []
    if verdict.shape_equal:
        lines.append(f"PASS shape: {verdict.detail}")
    else:
        lines.append(f"FAIL shape: {verdict.detail}")
    try:
        offsets = dummy_disk_offsets(trace)
        domain = [engine.store.layout.data_offset(p)
                  for p in engine.fs.dummy_blocks()]
        result = uniformity_test(offsets, domain)
        lines.append(
            f"INFO padding-target uniformity: p={result.p_value:.4f} "
            f"over {result.n_samples} samples, {result.n_bins} bins")
    except InsufficientDataError as exc:
        lines.append(f"INFO padding-target uniformity: skipped ({exc})")
    (outdir / "verdict.txt").write_text("".join(l + "\n" for l in lines))
    for line in lines:
        print(line)
    return 0 if verdict.shape_equal else 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    """Same workload down both paths; wall-clock throughput ratio."""
    rcfg = RoundConfig(interval_ns=args.round_interval)
    medians = {}
    for mode in ("passthrough", "oblivious"):
        samples = []
        for i in range(args.repeat):
            ns = argparse.Namespace(
                image=args.image, key=args.key, verity_root=None,
                mode=mode, seed=args.seed + i, rounds=None,
                cache_k=None, eager_shuffle_at=None, peer=[])
            engine, _trace, _done, wall_s = _run_once(ns, rcfg, args.workload, None)
            samples.append(engine.payload_bytes / wall_s if wall_s > 0 else 0.0)
        medians[mode] = statistics.median(samples)
        print(f"{mode}_wall_bytes_per_s: {medians[mode]:.1f} "
              f"(median of {args.repeat})")
    if medians["oblivious"] > 0:
        ratio = medians["passthrough"] / medians["oblivious"]
        print(f"ratio_passthrough_over_oblivious: {ratio:.2f}")
    return 0


# ---------------------------------------------------------------------------
# shuffle
# ---------------------------------------------------------------------------

def cmd_shuffle(args) -> int:
    image = bytearray(Path(args.image).read_bytes())
    host = Host(image, SimClock())
    iface = HostInterface(host)
    store = BlockStore.mount(iface, key=_hex_or_none(args.key))
    if not store.mode.encrypted:
        raise ModeError("shuffling re-encrypts blocks; the image must be "
                        "crypt or crypt-integrity")
    rng = RngTree(args.seed)
    fs = BlockFs.load(store, rng.stream("layout"))
    engine = Engine(iface, store, fs, rng, oblivious=True)
    stats = engine.shuffle_now()
    fs.persist(store)
    store.persist_metadata()
    out = args.out_image or args.image
    Path(out).write_bytes(bytes(host.image))
    print(f"image: {out}")
    print(f"moved: {stats.swaps} blocks across {stats.plan.num_donors} donors "
          f"(max file {stats.plan.max_blk} blocks)")
    print(f"rounds: {engine.rounds_done}  donor slot reuses: {stats.donor_reuses}")
    return 0


# ---------------------------------------------------------------------------
# fsck
# ---------------------------------------------------------------------------

def cmd_fsck(args) -> int:
    image = bytearray(Path(args.image).read_bytes())
    host = Host(image, SimClock())
    iface = HostInterface(host)
    store = BlockStore.mount(
        iface, key=_hex_or_none(args.key),
        trusted_root=_hex_or_none(args.verity_root))
    rng = RngTree(args.seed)
    fs = BlockFs.load(store, rng.stream("layout"))
    problems = fs.fsck()
    if args.deep:
        for fd in (fs.files_with_flag(FLAG_REGULAR)
                   + fs.files_with_flag(FLAG_DUMMY)):
            for lblk in range(fs.file_blocks(fd)):
                try:
                    store.read_block(fs.phys_of(fd, lblk))
                except SimError as exc:
                    problems.append(f"fd {fd} block {lblk}: {exc}")
    st = fs.stats()
    print(f"files: {st.regular_files} data, {st.donor_files} donor, "
          f"{st.dummy_files} dummy-pad; free blocks: {fs.free_blocks}")
    if problems:
        for p in problems:
            print(f"problem: {p}")
        return 1
    print("clean")
    return 0


# ---------------------------------------------------------------------------
# provision
# ---------------------------------------------------------------------------

def _parse_peer_spec(spec: str) -> PeerIdentity:
    parts = spec.split(",")
    if len(parts) not in (2, 3):
        raise SimError(f"peer spec {spec!r}: want PUBHEX,ADDR[,RATE]")
    pub = bytes.fromhex(parts[0])
    rate = int(parts[2]) if len(parts) == 3 else 200_000_000
    return PeerIdentity(pub, parts[1], rate)


def cmd_provision(args) -> int:
    secrets = ProvisioningSecrets(
        disk_key=_hex_or_none(args.key),
        verity_root=_hex_or_none(args.verity_root),
        peers=tuple(_parse_peer_spec(s) for s in args.peer or []),
        exec_path=args.exec_path or "",
        exec_args=tuple(args.arg or []),
    )
    record = secrets.encode()
    if args.out_record:
        Path(args.out_record).write_bytes(record)
        print(f"record: {args.out_record} ({len(record)} bytes)")

    # Demo delivery over a fresh link: provider -> endpoint, first
    # session, record split across MTU-sized frames.
    provider = StaticIdentity.generate()
    endpoint = Endpoint(StaticIdentity.generate())
    enclave_session = endpoint.establish_with(
        PeerIdentity(provider.public_bytes, "provider"))
    provider_session = establish(
        provider, PeerIdentity(endpoint.identity.public_bytes))
    chunk = max_payload(provider_session.mtu)
    frames = [provider_session.seal_packet(record[i:i + chunk])
              for i in range(0, len(record), chunk)]
    received = b"".join(enclave_session.open_packet(f) for f in frames)
    endpoint.provision(enclave_session, ProvisioningSecrets.decode(received))
    got = endpoint.provisioned
    print(f"delivered: {len(record)} bytes in {len(frames)} frame(s) "
          "over the first session")
    print(f"installed: disk key {'yes' if got.disk_key else 'no'}, "
          f"verity root {'yes' if got.verity_root else 'no'}, "
          f"{len(got.peers)} peer(s), exec {got.exec_path or '-'}")
    print(f"attestation: {endpoint.attestation}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="oblivsim",
        description="Deterministic simulator of an access-pattern-hiding "
                    "block stack: encrypted images, batched padded I/O, "
                    "layout shuffles and shaped network links.")
    sub = p.add_subparsers(dest="command", required=True)

    ci = sub.add_parser("create-image", help="build and populate an image file")
    ci.add_argument("--out", required=True, help="image file to write")
    ci.add_argument("--blocks", type=int, required=True,
                    help="number of data blocks")
    ci.add_argument("--mode", choices=sorted(MODE_BY_NAME), default="crypt-integrity")
    ci.add_argument("--key", help="32-byte key as hex (default: generated)")
    ci.add_argument("--seed", type=int, default=0, help="layout seed")
    ci.add_argument("--add", action="append", metavar="PATH",
                    help="store this file's contents (repeatable)")
    ci.add_argument("--blank", action="append", type=int, metavar="BYTES",
                    help="add a zero-filled data file (repeatable)")
    ci.add_argument("--dummy-fraction", type=float, default=0.10,
                    help="fraction of blocks reserved for padding targets")
    ci.add_argument("--max-files", type=int, default=None)
    ci.add_argument("--max-file-blocks", type=int, default=None)
    ci.set_defaults(func=cmd_create_image)

    rn = sub.add_parser("run", help="drive a workload against an image copy")
    rn.add_argument("--image", required=True)
    rn.add_argument("--key", help="image key as hex")
    rn.add_argument("--verity-root", help="trusted root hash as hex")
    rn.add_argument("--mode", choices=["oblivious", "passthrough"],
                    default="oblivious")
    rn.add_argument("--workload", required=True,
                    help="e.g. 'seqread(0,0)', 'randread(0,500)', 'idle(1000)'")
    rn.add_argument("--seed", type=int, default=0)
    rn.add_argument("--rounds", type=int, default=None,
                    help="run exactly this many rounds (truncate or pad)")
    rn.add_argument("--round-interval", type=int,
                    default=DEFAULT_ROUND_INTERVAL_NS, metavar="NS")
    rn.add_argument("--cache-k", type=int, default=None,
                    help="page cache capacity (default: ceil(sqrt(blocks)))")
    rn.add_argument("--eager-shuffle-at", type=int, default=None,
                    help="shuffle when this many blocks were fetched this epoch")
    rn.add_argument("--peer", action="append", type=int, metavar="RATE_BPS",
                    help="attach a shaped echo peer at this rate (repeatable)")
    rn.add_argument("--out", default=".", help="output directory")
    rn.add_argument("--ground-truth", action="store_true",
                    help="append the dummy flag to trace lines")
    rn.add_argument("--assert-oblivious", action="store_true",
                    help="also run an idle baseline and compare trace shapes")
    rn.set_defaults(func=cmd_run)

    be = sub.add_parser("bench",
                        help="compare wall-clock throughput of both paths")
    be.add_argument("--image", required=True)
    be.add_argument("--key", help="image key as hex")
    be.add_argument("--workload", default="seqread(0,0)")
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--repeat", type=int, default=3)
    be.add_argument("--round-interval", type=int,
                    default=DEFAULT_ROUND_INTERVAL_NS, metavar="NS")
    be.set_defaults(func=cmd_bench)

    sh = sub.add_parser("shuffle", help="re-randomize an image's layout")
    sh.add_argument("--image", required=True)
    sh.add_argument("--key", required=True)
    sh.add_argument("--seed", type=int, default=0)
    sh.add_argument("--out-image", default=None,
                    help="write here instead of back to --image")
    sh.set_defaults(func=cmd_shuffle)

    fs = sub.add_parser("fsck", help="consistency-check an image")
    fs.add_argument("--image", required=True)
    fs.add_argument("--key")
    fs.add_argument("--verity-root")
    fs.add_argument("--seed", type=int, default=0)
    fs.add_argument("--deep", action="store_true",
                    help="also read and verify every mapped block")
    fs.set_defaults(func=cmd_fsck)

    pv = sub.add_parser("provision",
                        help="build a provisioning record and demo delivery")
    pv.add_argument("--key", help="disk key as hex")
    pv.add_argument("--verity-root", help="trusted root as hex")
    pv.add_argument("--peer", action="append", metavar="PUBHEX,ADDR[,RATE]")
    pv.add_argument("--exec-path", help="program to launch after provisioning")
    pv.add_argument("--arg", action="append", help="argument for it (repeatable)")
    pv.add_argument("--out-record", help="write the encoded record here")
    pv.set_defaults(func=cmd_provision)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
