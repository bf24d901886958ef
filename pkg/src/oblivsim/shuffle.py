"""Layout shuffle: re-randomize physical placement without revealing
which blocks the workload cares about.

The shuffle walks every block of the selected files in a uniformly
random order. Each step claims one read slot and one write slot of the
batched round cadence:

* the read slot fetches the block being moved, unless it is already
  resident in the page cache, in which case some other not-yet-read
  block is prefetched instead (and if every remaining block is already
  in hand, the slot is spent on padding);
* the write slot lands the block, freshly re-encrypted, at its new
  home.

New homes come from donor files: scratch files allocated at uniformly
random free blocks, one donor per ``max_blk`` free blocks. A donor is
picked uniformly among those with an untouched slot at the needed
logical index (falling back to reuse when files outnumber donors; the
swapped-out block a reused slot holds has already been rehomed, so the
chain stays consistent). Donors are unlinked afterwards, returning
their final physical blocks to the free pool.

Each source block is read at most once, and the observable pattern is a
function of (num_shuff_blk, num_donors, cache occupancy) only, never of
file contents or of which file a block belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .blockfs import FLAG_REGULAR, BlockFs
from .errors import ShuffleImpossibleError, SpaceError
from .rng import Rng


def fisher_yates(items, rng: Rng) -> list:
    """Uniform random permutation (swap-down construction)."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.randbelow(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True)
class ShufflePlan:
    fds: tuple[int, ...]
    max_blk: int
    num_shuff_blk: int
    num_donors: int


@dataclass
class ShuffleStats:
    plan: ShufflePlan
    swaps: int = 0
    real_reads: int = 0
    dummy_reads: int = 0
    served_from_cache: int = 0
    donor_reuses: int = 0


class ShuffleIo(Protocol):
    """Host traffic needed by the shuffle, routed through the batched
    scheduler by the engine so shuffle rounds look like any other."""

    def read_phys(self, phys: int) -> bytes: ...

    def write_phys(self, phys: int, data: bytes) -> None: ...

    def pump_dummy_read(self) -> None: ...

    def peek_cache(self, fd: int, lblk: int) -> bytes | None: ...


def build_plan(fs: BlockFs, fds) -> ShufflePlan:
    fds = tuple(fd for fd in fds if fs.file_blocks(fd) > 0)
    if not fds:
        return ShufflePlan((), 0, 0, 0)
    max_blk = max(fs.file_blocks(fd) for fd in fds)
    total = sum(fs.file_blocks(fd) for fd in fds)
    return ShufflePlan(fds, max_blk, total, fs.free_blocks // max_blk)


def oblivious_shuffle(fs: BlockFs, io: ShuffleIo, rng: Rng,
                      fds=None) -> ShuffleStats:
    if fds is None:
        fds = fs.files_with_flag(FLAG_REGULAR)
    plan = build_plan(fs, fds)
    stats = ShuffleStats(plan)
    if plan.num_shuff_blk == 0:
        return stats
    if fs.free_blocks < plan.max_blk:
        raise ShuffleImpossibleError(
            f"{fs.free_blocks} free blocks cannot host a {plan.max_blk}-block donor")
    try:
        donors = fs.create_donors(plan.num_donors, plan.max_blk)
    except SpaceError as exc:
        raise ShuffleImpossibleError(
            f"cannot create {plan.num_donors} donor files: {exc}") from exc

    sources = [(fd, b) for fd in plan.fds for b in range(fs.file_blocks(fd))]
    order = fisher_yates(sources, rng)
    spares = {d: [True] * plan.max_blk for d in donors}
    buffered: dict[tuple[int, int], bytes] = {}
    consumed: set[tuple[int, int]] = set()  # read, buffered or swapped already
    cursor = 0

    def next_prefetch() -> tuple[int, int] | None:
        nonlocal cursor
        while cursor < len(order):
            cand = order[cursor]
            if cand not in consumed and io.peek_cache(*cand) is None:
                return cand
            cursor += 1
        return None

    for fd, b in order:
        data = buffered.pop((fd, b), None)
        if data is None:
            cached = io.peek_cache(fd, b)
            if cached is not None:
                data = cached
                stats.served_from_cache += 1
        if data is None:
            data = io.read_phys(fs.phys_of(fd, b))
            stats.real_reads += 1
        else:
            # This step's read slot still has to happen somewhere.
            consumed.add((fd, b))
            cand = next_prefetch()
            if cand is not None:
                buffered[cand] = io.read_phys(fs.phys_of(*cand))
                stats.real_reads += 1
                consumed.add(cand)
            else:
                io.pump_dummy_read()
                stats.dummy_reads += 1
        consumed.add((fd, b))
        eligible = [d for d in donors if spares[d][b]]
        if eligible:
            donor = eligible[rng.randbelow(len(eligible))]
        else:
            donor = donors[rng.randbelow(len(donors))]
            stats.donor_reuses += 1
        spares[donor][b] = False
        fs.move_extent(fd, donor, b)
        io.write_phys(fs.phys_of(fd, b), data)
        stats.swaps += 1

    fs.unlink_all(donors)
    return stats
