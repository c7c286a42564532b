"""Extent storage engine for one data partition.

Large files land in append-only Normal extents (a fresh file always starts
at offset zero of a new extent). Small files are packed into shared
aggregate extents and reclaimed with byte-precise punched holes instead of
compaction. Every extent keeps per-64KiB-block CRC32s in memory; reads
verify the blocks they touch and only ever serve bytes below the
replication commit cursor.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

from .errors import ErrorCode, FsError
from .wire import payload

CRC_BLOCK = 64 * 1024
DEFAULT_EXTENT_LIMIT = 128 * 1024 * 1024
DEFAULT_SMALL_FILE_THRESHOLD = 128 * 1024
AGGREGATE_ID_BASE = 1 << 48

KIND_NORMAL = 0
KIND_AGGREGATE = 1

STATUS_READ_WRITE = 0
STATUS_READ_ONLY = 1
STATUS_UNAVAILABLE = 2

SIDECAR_MAGIC = b"CFSEXT01"
_SIDECAR_HEAD = struct.Struct("<8sIQQBQQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_HOLE = struct.Struct("<QQ")


@payload(10)
@dataclass(slots=True)
class ExtentKey:
    """Maps one contiguous file byte range onto extent storage."""

    dp_id: int
    extent_id: int
    extent_offset: int
    size: int
    file_offset: int

    @property
    def file_end(self) -> int:
        return self.file_offset + self.size


def is_aggregate_id(extent_id: int) -> bool:
    return extent_id >= AGGREGATE_ID_BASE


class Extent:
    __slots__ = ("extent_id", "kind", "data", "local_size", "committed_size", "holes", "crc_blocks")

    def __init__(self, extent_id: int, kind: int):
        self.extent_id = extent_id
        self.kind = kind
        self.data = bytearray()
        self.local_size = 0
        self.committed_size = 0
        self.holes: list[tuple[int, int]] = []  # sorted, disjoint (offset, length)
        self.crc_blocks: list[int] = []

    def live_bytes(self) -> int:
        return self.local_size - sum(length for _, length in self.holes)

    def hole_overlap(self, offset: int, length: int) -> bool:
        end = offset + length
        for h_off, h_len in self.holes:
            if h_off < end and offset < h_off + h_len:
                return True
        return False

    def _recompute_blocks(self, offset: int, length: int) -> None:
        first = offset // CRC_BLOCK
        last = (offset + length - 1) // CRC_BLOCK if length else first
        for block in range(first, last + 1):
            start = block * CRC_BLOCK
            stop = min(start + CRC_BLOCK, self.local_size)
            crc = zlib.crc32(bytes(self.data[start:stop]))
            if block < len(self.crc_blocks):
                self.crc_blocks[block] = crc
            else:
                while len(self.crc_blocks) < block:
                    self.crc_blocks.append(0)
                self.crc_blocks.append(crc)

    def verify_blocks(self, offset: int, length: int) -> None:
        if length == 0:
            return
        first = offset // CRC_BLOCK
        last = (offset + length - 1) // CRC_BLOCK
        for block in range(first, last + 1):
            start = block * CRC_BLOCK
            stop = min(start + CRC_BLOCK, self.local_size)
            if block >= len(self.crc_blocks) or zlib.crc32(bytes(self.data[start:stop])) != self.crc_blocks[block]:
                raise FsError(ErrorCode.CRC_MISMATCH, f"extent {self.extent_id} block {block}")


class ExtentStore:
    """Storage engine state for one data partition replica."""

    def __init__(self, partition_id: int, volume: str, replicas: list[str], extent_limit: int = DEFAULT_EXTENT_LIMIT):
        self.partition_id = partition_id
        self.volume = volume
        self.replicas = list(replicas)
        self.status = STATUS_READ_WRITE
        self.extent_limit = extent_limit
        self.extents: dict[int, Extent] = {}
        self.used_bytes = 0
        self.next_normal_id = 1
        self.next_aggregate_seq = 0
        self.current_aggregate_id = 0

    # -- append planning (leader side) ------------------------------------

    def plan_append(self, extent_id: int, size: int) -> tuple[int, int]:
        """Pick (extentId, offset) for a normal append.

        extent_id == 0 requests a fresh extent, which always starts at
        offset zero. A non-zero id must be the file's open tail extent and
        still have room, otherwise the caller has to open a new extent.
        """
        if size <= 0:
            raise FsError(ErrorCode.INVALID_RANGE, "empty append")
        if size > self.extent_limit:
            raise FsError(ErrorCode.INVALID_RANGE, "append larger than extent limit")
        if extent_id:
            ext = self.extents.get(extent_id)
            if ext is None:
                raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
            if ext.kind != KIND_NORMAL:
                raise FsError(ErrorCode.NOT_AGGREGATE_EXTENT, "appends target normal extents")
            if ext.local_size + size > self.extent_limit:
                raise FsError(ErrorCode.EXTENT_FULL, f"extent {extent_id}")
            return extent_id, ext.local_size
        eid = self.next_normal_id
        return eid, 0

    def plan_small_write(self, size: int) -> tuple[int, int]:
        """Pick (extentId, offset) inside the current aggregate extent."""
        if size <= 0:
            raise FsError(ErrorCode.INVALID_RANGE, "empty write")
        cur = self.extents.get(self.current_aggregate_id)
        if cur is None or cur.local_size + size > self.extent_limit:
            self.next_aggregate_seq += 1
            return AGGREGATE_ID_BASE + self.next_aggregate_seq, 0
        return self.current_aggregate_id, cur.local_size

    # -- replicated mutations ----------------------------------------------

    def apply_append(self, extent_id: int, offset: int, data: bytes) -> None:
        """Write bytes at the extent tail; replicas mirror the leader's plan."""
        kind = KIND_AGGREGATE if is_aggregate_id(extent_id) else KIND_NORMAL
        ext = self.extents.get(extent_id)
        if ext is None:
            if offset != 0:
                raise FsError(ErrorCode.INVALID_RANGE, "new extent must start at offset 0")
            ext = Extent(extent_id, kind)
            self.extents[extent_id] = ext
            if kind == KIND_NORMAL:
                self.next_normal_id = max(self.next_normal_id, extent_id + 1)
            else:
                self.current_aggregate_id = extent_id
                self.next_aggregate_seq = max(self.next_aggregate_seq, extent_id - AGGREGATE_ID_BASE)
        if offset + len(data) <= ext.local_size:
            return  # duplicate delivery of an already-applied append
        if offset != ext.local_size:
            raise FsError(ErrorCode.INVALID_RANGE, f"append offset {offset} != local size {ext.local_size}")
        if offset + len(data) > self.extent_limit:
            raise FsError(ErrorCode.EXTENT_FULL, f"extent {extent_id}")
        ext.data += data
        ext.local_size += len(data)
        self.used_bytes += len(data)
        ext._recompute_blocks(offset, len(data))

    def advance_commit(self, extent_id: int, offset: int) -> int:
        ext = self.extents.get(extent_id)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        if offset > ext.committed_size:
            ext.committed_size = min(offset, ext.local_size)
        return ext.committed_size

    def apply_overwrite(self, extent_id: int, offset: int, data: bytes) -> None:
        """In-place overwrite of committed bytes; file offsets never move."""
        ext = self.extents.get(extent_id)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        if offset < 0 or offset + len(data) > ext.committed_size:
            raise FsError(ErrorCode.OUT_OF_COMMITTED_RANGE, f"[{offset}, {offset + len(data)})")
        if ext.hole_overlap(offset, len(data)):
            raise FsError(ErrorCode.HOLE_OVERLAP, "overwrite crosses a punched hole")
        ext.data[offset : offset + len(data)] = data
        ext._recompute_blocks(offset, len(data))

    def check_overwrite(self, extent_id: int, offset: int, length: int) -> None:
        """Leader-side validation before proposing an overwrite."""
        ext = self.extents.get(extent_id)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        if offset < 0 or offset + length > ext.committed_size:
            raise FsError(ErrorCode.OUT_OF_COMMITTED_RANGE, f"[{offset}, {offset + length})")
        if ext.hole_overlap(offset, length):
            raise FsError(ErrorCode.HOLE_OVERLAP, "overwrite crosses a punched hole")

    def apply_punch_hole(self, extent_id: int, offset: int, length: int) -> int:
        """Mark a small-file range dead, zero it, and reclaim the space."""
        ext = self.extents.get(extent_id)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        if ext.kind != KIND_AGGREGATE:
            raise FsError(ErrorCode.NOT_AGGREGATE_EXTENT, f"extent {extent_id}")
        if length <= 0 or offset < 0 or offset + length > ext.local_size:
            raise FsError(ErrorCode.INVALID_RANGE, f"[{offset}, {offset + length})")
        freed = self._add_hole(ext, offset, length)
        ext.data[offset : offset + length] = b"\x00" * length
        ext._recompute_blocks(offset, length)
        self.used_bytes -= freed
        return freed

    def apply_delete_extent(self, extent_id: int) -> int:
        ext = self.extents.pop(extent_id, None)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        freed = ext.live_bytes()
        self.used_bytes -= freed
        if extent_id == self.current_aggregate_id:
            self.current_aggregate_id = 0
        return freed

    @staticmethod
    def _add_hole(ext: Extent, offset: int, length: int) -> int:
        """Merge a new hole into the sorted hole list; returns newly freed bytes."""
        new_start, new_end = offset, offset + length
        freed = length
        merged: list[tuple[int, int]] = []
        for h_off, h_len in ext.holes:
            h_end = h_off + h_len
            if h_end < new_start or h_off > new_end:
                merged.append((h_off, h_len))
            else:
                freed -= max(0, min(h_end, new_end) - max(h_off, new_start))
                new_start = min(new_start, h_off)
                new_end = max(new_end, h_end)
        merged.append((new_start, new_end - new_start))
        merged.sort()
        ext.holes = merged
        return freed

    # -- reads --------------------------------------------------------------

    def read(self, extent_id: int, offset: int, length: int) -> bytes:
        ext = self.extents.get(extent_id)
        if ext is None:
            raise FsError(ErrorCode.NOT_FOUND, f"extent {extent_id}")
        if length < 0 or offset < 0:
            raise FsError(ErrorCode.INVALID_RANGE, "negative read range")
        if offset + length > ext.committed_size:
            raise FsError(ErrorCode.BEYOND_COMMITTED, f"read past committed size {ext.committed_size}")
        if ext.hole_overlap(offset, length):
            raise FsError(ErrorCode.HOLE_READ, "read crosses a punched hole")
        ext.verify_blocks(offset, length)
        return bytes(ext.data[offset : offset + length])

    # -- invariants / testing hooks -----------------------------------------

    def recompute_used_bytes(self) -> int:
        return sum(ext.live_bytes() for ext in self.extents.values())

    def corrupt_byte(self, extent_id: int, offset: int) -> None:
        """Flip one stored byte without touching CRCs (fault-injection hook)."""
        ext = self.extents[extent_id]
        ext.data[offset] ^= 0xFF

    # -- file-backed persistence ---------------------------------------------

    def save_to_dir(self, root: str) -> None:
        os.makedirs(root, exist_ok=True)
        for ext in self.extents.values():
            base = os.path.join(root, f"{self.partition_id}_{ext.extent_id}")
            with open(base + ".ext", "wb") as fh:
                fh.write(bytes(ext.data))
            with open(base + ".idx", "wb") as fh:
                fh.write(encode_sidecar(self.partition_id, ext))

    def load_from_dir(self, root: str) -> None:
        self.extents.clear()
        self.used_bytes = 0
        prefix = f"{self.partition_id}_"
        for name in sorted(os.listdir(root)):
            if not name.startswith(prefix) or not name.endswith(".idx"):
                continue
            with open(os.path.join(root, name), "rb") as fh:
                ext = decode_sidecar(fh.read(), self.partition_id)
            with open(os.path.join(root, name[:-4] + ".ext"), "rb") as fh:
                ext.data = bytearray(fh.read())
            if len(ext.data) != ext.local_size:
                raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"extent file truncated: {name}")
            self.extents[ext.extent_id] = ext
            self.used_bytes += ext.live_bytes()
            if ext.kind == KIND_NORMAL:
                self.next_normal_id = max(self.next_normal_id, ext.extent_id + 1)
            else:
                self.next_aggregate_seq = max(self.next_aggregate_seq, ext.extent_id - AGGREGATE_ID_BASE)
                self.current_aggregate_id = max(self.current_aggregate_id, ext.extent_id)


def encode_sidecar(partition_id: int, ext: Extent) -> bytes:
    out = bytearray()
    out += _SIDECAR_HEAD.pack(SIDECAR_MAGIC, 1, partition_id, ext.extent_id, ext.kind, ext.committed_size, ext.local_size)
    out += _U32.pack(len(ext.holes))
    for h_off, h_len in ext.holes:
        out += _HOLE.pack(h_off, h_len)
    out += _U32.pack(len(ext.crc_blocks))
    for crc in ext.crc_blocks:
        out += _U32.pack(crc)
    out += _U32.pack(zlib.crc32(bytes(out)))
    return bytes(out)


def decode_sidecar(raw: bytes, expect_partition: int | None = None) -> Extent:
    if len(raw) < _SIDECAR_HEAD.size + _U32.size:
        raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "sidecar too short")
    (stored_crc,) = _U32.unpack_from(raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "sidecar checksum mismatch")
    magic, version, partition_id, extent_id, kind, committed, local = _SIDECAR_HEAD.unpack_from(raw, 0)
    if magic != SIDECAR_MAGIC:
        raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "bad sidecar magic")
    if version != 1:
        raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"unsupported sidecar version {version}")
    if expect_partition is not None and partition_id != expect_partition:
        raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "sidecar partition mismatch")
    pos = _SIDECAR_HEAD.size
    ext = Extent(extent_id, kind)
    ext.committed_size = committed
    ext.local_size = local
    (nholes,) = _U32.unpack_from(raw, pos)
    pos += 4
    for _ in range(nholes):
        h_off, h_len = _HOLE.unpack_from(raw, pos)
        pos += _HOLE.size
        ext.holes.append((h_off, h_len))
    (ncrc,) = _U32.unpack_from(raw, pos)
    pos += 4
    for _ in range(ncrc):
        (crc,) = _U32.unpack_from(raw, pos)
        pos += 4
        ext.crc_blocks.append(crc)
    return ext
