"""Minimal block-mapped filesystem.

Flat namespace (files are small integer ids), direct block maps, one
free-block bitmap. No directories, journaling or permissions; the point
is the physical layout, which is randomized: every allocation draws a
uniformly random free block, so logical adjacency says nothing about
physical adjacency from the moment an image is created.

Three file roles exist: regular files carry data, donor files are
scratch targets for the layout shuffle, and dummy-pad files reserve the
blocks that padding traffic reads and writes. Dummy-pad files are
created at format time from a configurable fraction of the disk.

On-disk layout (inside the data region of the image container, all
little endian):

    block 0              superblock: magic "OBFS1", n_blocks u64,
                         bitmap_start u32, bitmap_blocks u32,
                         itab_start u32, itab_blocks u32,
                         max_files u32, max_file_blocks u32,
                         free_blocks u64
    bitmap blocks        bit per physical block, set = allocated
    inode table          max_files entries, each:
                         used u8, flags u8, size u64, nblocks u32,
                         then max_file_blocks x u32 physical indices
                         (0xFFFFFFFF = unmapped)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol

from .errors import (
    DescriptorError,
    ParameterError,
    RangeError,
    SpaceError,
)
from .hostiface import BLOCK_SIZE
from .rng import Rng

FS_MAGIC = b"OBFS1"
UNMAPPED = 0xFFFFFFFF

FLAG_REGULAR = 0
FLAG_DONOR = 1
FLAG_DUMMY = 2

_SB = struct.Struct("<5sQIIIIIIQ")
_INODE_HEAD = struct.Struct("<BBQI")


class BlockIo(Protocol):
    """How file data reaches the disk; implemented by the cached path
    (page cache + batched rounds) and by the direct path."""

    def read_block(self, fd: int, lblk: int) -> bytes: ...

    def write_block(self, fd: int, lblk: int, page: bytes) -> None: ...


@dataclass
class Inode:
    used: bool = False
    flags: int = FLAG_REGULAR
    size: int = 0
    block_map: list[int] | None = None

    @property
    def nblocks(self) -> int:
        return (self.size + BLOCK_SIZE - 1) // BLOCK_SIZE


@dataclass(frozen=True)
class FsStats:
    n_blocks: int
    metadata_blocks: int
    free_blocks: int
    regular_files: int
    donor_files: int
    dummy_files: int
    dummy_blocks: int


def _bitmap_blocks(n_blocks: int) -> int:
    return ((n_blocks + 7) // 8 + BLOCK_SIZE - 1) // BLOCK_SIZE


def _itab_blocks(max_files: int, max_file_blocks: int) -> int:
    entry = _INODE_HEAD.size + 4 * max_file_blocks
    return (max_files * entry + BLOCK_SIZE - 1) // BLOCK_SIZE


def metadata_block_count(n_blocks: int, max_files: int, max_file_blocks: int) -> int:
    return 1 + _bitmap_blocks(n_blocks) + _itab_blocks(max_files, max_file_blocks)


def default_geometry(n_blocks: int) -> tuple[int, int]:
    """(max_files, max_file_blocks) scaled to the disk size."""
    max_file_blocks = min(64, n_blocks)
    max_files = min(128, max(16, n_blocks // 8))
    return max_files, max_file_blocks


class BlockFs:
    def __init__(self, n_blocks: int, max_files: int, max_file_blocks: int,
                 rng: Rng):
        self.n_blocks = n_blocks
        self.max_files = max_files
        self.max_file_blocks = max_file_blocks
        self.rng = rng
        self.bitmap = bytearray((n_blocks + 7) // 8)
        self.inodes = [Inode() for _ in range(max_files)]
        self._free: list[int] = []
        self._free_pos: dict[int, int] = {}

    # Bitmap and allocation --------------------------------------------

    def _bit(self, phys: int) -> bool:
        return bool(self.bitmap[phys // 8] & (1 << (phys % 8)))

    def _set_bit(self, phys: int, value: bool) -> None:
        if value:
            self.bitmap[phys // 8] |= 1 << (phys % 8)
        else:
            self.bitmap[phys // 8] &= ~(1 << (phys % 8))

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def metadata_blocks(self) -> int:
        return metadata_block_count(self.n_blocks, self.max_files,
                                    self.max_file_blocks)

    def allocate_block(self) -> int:
        """Uniformly random free block; this is what randomizes layout."""
        if not self._free:
            raise SpaceError("no free blocks")
        i = self.rng.randbelow(len(self._free))
        phys = self._free[i]
        last = self._free[-1]
        self._free[i] = last
        self._free_pos[last] = i
        self._free.pop()
        del self._free_pos[phys]
        self._set_bit(phys, True)
        return phys

    def free_block(self, phys: int) -> None:
        if self._bit(phys) is False:
            raise ParameterError(f"block {phys} already free")
        self._set_bit(phys, False)
        self._free_pos[phys] = len(self._free)
        self._free.append(phys)

    # Formatting and (de)serialization ----------------------------------

    @classmethod
    def format(cls, n_blocks: int, rng: Rng, *, max_files: int | None = None,
               max_file_blocks: int | None = None,
               dummy_fraction: float = 0.10) -> "BlockFs":
        if n_blocks < 8:
            raise ParameterError("filesystem needs at least 8 blocks")
        df_files, df_blocks = default_geometry(n_blocks)
        max_files = max_files if max_files is not None else df_files
        max_file_blocks = (max_file_blocks if max_file_blocks is not None
                           else df_blocks)
        fs = cls(n_blocks, max_files, max_file_blocks, rng)
        meta = fs.metadata_blocks
        if meta >= n_blocks:
            raise SpaceError("filesystem metadata does not fit")
        for phys in range(meta):
            fs._set_bit(phys, True)
        for phys in range(meta, n_blocks):
            fs._free_pos[phys] = len(fs._free)
            fs._free.append(phys)
        dummy_total = int(n_blocks * dummy_fraction)
        while dummy_total > 0:
            chunk = min(dummy_total, max_file_blocks)
            fd = fs.create_file(FLAG_DUMMY)
            fs._map_fresh_blocks(fd, chunk)
            dummy_total -= chunk
        return fs

    def _map_fresh_blocks(self, fd: int, count: int) -> None:
        ino = self._inode(fd)
        if count > self.max_file_blocks:
            raise RangeError("file would exceed the per-file block limit")
        if count > self.free_blocks:
            raise SpaceError("not enough free blocks")
        for lblk in range(count):
            ino.block_map[lblk] = self.allocate_block()
        ino.size = count * BLOCK_SIZE

    def serialize_block(self, phys: int) -> bytes:
        """Metadata block ``phys`` (< metadata_blocks) as bytes."""
        bmb = _bitmap_blocks(self.n_blocks)
        if phys == 0:
            raw = _SB.pack(FS_MAGIC, self.n_blocks, 1, bmb, 1 + bmb,
                           _itab_blocks(self.max_files, self.max_file_blocks),
                           self.max_files, self.max_file_blocks,
                           self.free_blocks)
            return raw + b"\x00" * (BLOCK_SIZE - len(raw))
        if phys <= bmb:
            start = (phys - 1) * BLOCK_SIZE
            chunk = bytes(self.bitmap[start:start + BLOCK_SIZE])
            return chunk + b"\x00" * (BLOCK_SIZE - len(chunk))
        itab = self._pack_inodes()
        start = (phys - 1 - bmb) * BLOCK_SIZE
        chunk = itab[start:start + BLOCK_SIZE]
        return chunk + b"\x00" * (BLOCK_SIZE - len(chunk))

    def _pack_inodes(self) -> bytes:
        parts = []
        for ino in self.inodes:
            parts.append(_INODE_HEAD.pack(int(ino.used), ino.flags, ino.size,
                                          ino.nblocks))
            bm = ino.block_map or []
            for lblk in range(self.max_file_blocks):
                phys = bm[lblk] if lblk < len(bm) and bm[lblk] is not None else None
                parts.append(struct.pack(
                    "<I", UNMAPPED if phys is None else phys))
        return b"".join(parts)

    def persist(self, store) -> None:
        for phys in range(self.metadata_blocks):
            store.write_block(phys, self.serialize_block(phys))

    @classmethod
    def load(cls, store, rng: Rng) -> "BlockFs":
        sb = store.read_block(0)
        magic, n_blocks, bitmap_start, bmb, itab_start, itb, max_files, \
            max_file_blocks, free_blocks = _SB.unpack_from(sb, 0)
        if magic != FS_MAGIC:
            raise ParameterError("no filesystem on this image")
        fs = cls(n_blocks, max_files, max_file_blocks, rng)
        bitmap = b"".join(store.read_block(bitmap_start + i) for i in range(bmb))
        fs.bitmap = bytearray(bitmap[:(n_blocks + 7) // 8])
        itab = b"".join(store.read_block(itab_start + i) for i in range(itb))
        entry_size = _INODE_HEAD.size + 4 * max_file_blocks
        for idx in range(max_files):
            off = idx * entry_size
            used, flags, size, _nblocks = _INODE_HEAD.unpack_from(itab, off)
            ino = fs.inodes[idx]
            ino.used = bool(used)
            ino.flags = flags
            ino.size = size
            if ino.used:
                raw = struct.unpack_from(f"<{max_file_blocks}I", itab,
                                         off + _INODE_HEAD.size)
                ino.block_map = [None if p == UNMAPPED else p for p in raw]
        for phys in range(n_blocks):
            if not fs._bit(phys):
                fs._free_pos[phys] = len(fs._free)
                fs._free.append(phys)
        if fs.free_blocks != free_blocks:
            raise ParameterError("superblock free count disagrees with bitmap")
        return fs

    # Files --------------------------------------------------------------

    def _inode(self, fd: int) -> Inode:
        if not (0 <= fd < self.max_files) or not self.inodes[fd].used:
            raise DescriptorError(f"no such file {fd}")
        return self.inodes[fd]

    def create_file(self, flags: int = FLAG_REGULAR) -> int:
        for fd, ino in enumerate(self.inodes):
            if not ino.used:
                ino.used = True
                ino.flags = flags
                ino.size = 0
                ino.block_map = [None] * self.max_file_blocks
                return fd
        raise SpaceError("inode table full")

    def unlink(self, fd: int) -> None:
        ino = self._inode(fd)
        for phys in ino.block_map:
            if phys is not None:
                self.free_block(phys)
        ino.used = False
        ino.size = 0
        ino.block_map = None

    def unlink_all(self, fds) -> None:
        for fd in fds:
            self.unlink(fd)

    def phys_of(self, fd: int, lblk: int) -> int:
        ino = self._inode(fd)
        if not (0 <= lblk < self.max_file_blocks) or ino.block_map[lblk] is None:
            raise RangeError(f"file {fd} has no block {lblk}")
        return ino.block_map[lblk]

    def files_with_flag(self, flags: int) -> list[int]:
        return [fd for fd, ino in enumerate(self.inodes)
                if ino.used and ino.flags == flags]

    def dummy_blocks(self) -> list[int]:
        out = []
        for fd in self.files_with_flag(FLAG_DUMMY):
            out.extend(p for p in self.inodes[fd].block_map if p is not None)
        out.sort()
        return out

    def stats(self) -> FsStats:
        return FsStats(
            n_blocks=self.n_blocks,
            metadata_blocks=self.metadata_blocks,
            free_blocks=self.free_blocks,
            regular_files=len(self.files_with_flag(FLAG_REGULAR)),
            donor_files=len(self.files_with_flag(FLAG_DONOR)),
            dummy_files=len(self.files_with_flag(FLAG_DUMMY)),
            dummy_blocks=len(self.dummy_blocks()),
        )

    # Data path ----------------------------------------------------------

    def file_size(self, fd: int) -> int:
        return self._inode(fd).size

    def file_blocks(self, fd: int) -> int:
        return self._inode(fd).nblocks

    def file_read(self, io: BlockIo, fd: int, offset: int, length: int) -> bytes:
        ino = self._inode(fd)
        if offset < 0 or length < 0 or offset + length > ino.size:
            raise RangeError("read outside file")
        chunks = []
        pos = offset
        end = offset + length
        while pos < end:
            lblk, boff = divmod(pos, BLOCK_SIZE)
            n = min(BLOCK_SIZE - boff, end - pos)
            page = io.read_block(fd, lblk)
            chunks.append(page[boff:boff + n])
            pos += n
        return b"".join(chunks)

    def file_write(self, io: BlockIo, fd: int, offset: int, data: bytes) -> None:
        ino = self._inode(fd)
        if offset < 0 or offset > ino.size:
            raise RangeError("write would leave a hole")
        end = offset + len(data)
        if end > self.max_file_blocks * BLOCK_SIZE:
            raise RangeError("file would exceed the per-file block limit")
        pos = offset
        while pos < end:
            lblk, boff = divmod(pos, BLOCK_SIZE)
            n = min(BLOCK_SIZE - boff, end - pos)
            chunk = data[pos - offset:pos - offset + n]
            written_bytes = ino.size - lblk * BLOCK_SIZE
            if ino.block_map[lblk] is None:
                ino.block_map[lblk] = self.allocate_block()
                written_bytes = 0
            if n == BLOCK_SIZE:
                page = chunk
            elif written_bytes <= 0:
                # Fresh block: no on-disk content to preserve.
                page = (b"\x00" * boff + chunk +
                        b"\x00" * (BLOCK_SIZE - boff - n))
            else:
                old = io.read_block(fd, lblk)
                page = old[:boff] + chunk + old[boff + n:]
            io.write_block(fd, lblk, page)
            pos += n
        if end > ino.size:
            ino.size = end

    # Shuffle support ------------------------------------------------------

    def move_extent(self, fd_a: int, fd_b: int, lblk: int) -> None:
        """Exchange the physical blocks mapped at the same logical index."""
        ina, inb = self._inode(fd_a), self._inode(fd_b)
        if not (0 <= lblk < self.max_file_blocks):
            raise RangeError(f"logical block {lblk} out of range")
        if ina.block_map[lblk] is None or inb.block_map[lblk] is None:
            raise RangeError(f"logical block {lblk} not mapped in both files")
        ina.block_map[lblk], inb.block_map[lblk] = (
            inb.block_map[lblk], ina.block_map[lblk])

    def create_donors(self, count: int, size_blocks: int) -> list[int]:
        if count * size_blocks > self.free_blocks:
            raise SpaceError("not enough free blocks for donors")
        fds = []
        for _ in range(count):
            fd = self.create_file(FLAG_DONOR)
            self._map_fresh_blocks(fd, size_blocks)
            fds.append(fd)
        return fds

    # Consistency ------------------------------------------------------------

    def fsck(self) -> list[str]:
        """Returns a list of inconsistencies; empty means clean."""
        problems = []
        claimed: dict[int, int] = {}
        for fd, ino in enumerate(self.inodes):
            if not ino.used:
                continue
            if ino.block_map is None:
                problems.append(f"inode {fd}: used but has no block map")
                continue
            mapped = [p for p in ino.block_map if p is not None]
            if len(mapped) != ino.nblocks:
                problems.append(f"inode {fd}: size disagrees with mapped blocks")
            for phys in mapped:
                if not (0 <= phys < self.n_blocks):
                    problems.append(f"inode {fd}: block {phys} out of range")
                    continue
                if phys < self.metadata_blocks:
                    problems.append(f"inode {fd}: claims metadata block {phys}")
                if phys in claimed:
                    problems.append(
                        f"block {phys} claimed by inodes {claimed[phys]} and {fd}")
                claimed[phys] = fd
                if not self._bit(phys):
                    problems.append(f"block {phys} mapped but marked free")
        for phys in range(self.n_blocks):
            expected = phys < self.metadata_blocks or phys in claimed
            if self._bit(phys) != expected:
                problems.append(
                    f"block {phys}: bitmap={int(self._bit(phys))} "
                    f"expected={int(expected)}")
        zero_bits = sum(1 for p in range(self.n_blocks) if not self._bit(p))
        if zero_bits != self.free_blocks:
            problems.append(
                f"free count {self.free_blocks} != bitmap free bits {zero_bits}")
        return problems
