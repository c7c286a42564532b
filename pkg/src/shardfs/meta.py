"""In-memory metadata partition: inodes and dentries for one inode-id range.

All mutations arrive as replicated-log operations and are applied serially,
so every method here is deterministic state-machine code. Reads are served
by the replication leader. Persistence is a length-prefixed binary snapshot
with a trailing CRC32 (magic "CFSMETA1").
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import ErrorCode, FsError
from .extent import ExtentKey
from .omap import OrderedMap
from .wire import payload

MAX_U64 = (1 << 64) - 1

TYPE_FILE = 1
TYPE_DIRECTORY = 2
TYPE_SYMLINK = 3

FLAG_MARKED_DELETED = 1

STATUS_READ_WRITE = 0
STATUS_READ_ONLY = 1
STATUS_UNAVAILABLE = 2

DEFAULT_ITEM_LIMIT = 1_000_000

SNAPSHOT_MAGIC = b"CFSMETA1"
_SNAP_HEAD = struct.Struct("<8sIQQQQQ")
_INODE_REC = struct.Struct("<QBBIQQQ")
_EXTENT_REC = struct.Struct("<QQQQQ")
_DENTRY_REC = struct.Struct("<QQBH")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

_LEDGER_CAP = 64


@payload(11)
@dataclass(slots=True)
class Inode:
    inode_id: int
    inode_type: int
    link_target: bytes = b""
    nlink: int = 1
    flag: int = 0
    size: int = 0
    extents: list = field(default_factory=list)
    create_time: int = 0
    modify_time: int = 0

    @property
    def marked_deleted(self) -> bool:
        return bool(self.flag & FLAG_MARKED_DELETED)


@payload(12)
@dataclass(slots=True)
class Dentry:
    parent_id: int
    name: str
    child_inode: int
    dentry_type: int


# Replicated operation payloads. ``client``/``nonce`` feed the duplicate-
# suppression ledger so client retries after lost responses stay exactly-once.


@payload(20)
@dataclass(slots=True)
class CreateInodeOp:
    client: str
    nonce: int
    inode_type: int
    link_target: bytes = b""
    ts: int = 0


@payload(21)
@dataclass(slots=True)
class CreateDentryOp:
    client: str
    nonce: int
    parent_id: int
    name: str
    child_inode: int
    dentry_type: int
    ts: int = 0


@payload(22)
@dataclass(slots=True)
class LinkOp:
    client: str
    nonce: int
    inode_id: int
    ts: int = 0


@payload(23)
@dataclass(slots=True)
class UnlinkOp:
    client: str
    nonce: int
    inode_id: int
    ts: int = 0


@payload(24)
@dataclass(slots=True)
class DeleteDentryOp:
    client: str
    nonce: int
    parent_id: int
    name: str
    ts: int = 0


@payload(25)
@dataclass(slots=True)
class EvictOp:
    client: str
    nonce: int
    inode_id: int


@payload(26)
@dataclass(slots=True)
class SetExtentsOp:
    client: str
    nonce: int
    inode_id: int
    size: int
    extents: list
    ts: int = 0


@payload(27)
@dataclass(slots=True)
class ApplySplitOp:
    new_end: int


class IdIntervalSet:
    """Merged, sorted intervals of used ids; finds the smallest unused id."""

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []

    def __contains__(self, n: int) -> bool:
        i = bisect_right(self._starts, n) - 1
        return i >= 0 and self._ends[i] >= n

    def add(self, n: int) -> None:
        i = bisect_right(self._starts, n) - 1
        if i >= 0 and self._ends[i] >= n:
            return
        touch_left = i >= 0 and self._ends[i] == n - 1
        touch_right = i + 1 < len(self._starts) and self._starts[i + 1] == n + 1
        if touch_left and touch_right:
            self._ends[i] = self._ends[i + 1]
            del self._starts[i + 1], self._ends[i + 1]
        elif touch_left:
            self._ends[i] = n
        elif touch_right:
            self._starts[i + 1] = n
        else:
            self._starts.insert(i + 1, n)
            self._ends.insert(i + 1, n)

    def remove(self, n: int) -> None:
        i = bisect_right(self._starts, n) - 1
        if i < 0 or self._ends[i] < n:
            return
        start, end = self._starts[i], self._ends[i]
        if start == n and end == n:
            del self._starts[i], self._ends[i]
        elif start == n:
            self._starts[i] = n + 1
        elif end == n:
            self._ends[i] = n - 1
        else:
            self._ends[i] = n - 1
            self._starts.insert(i + 1, n + 1)
            self._ends.insert(i + 1, end)

    def smallest_unused(self, lo: int, hi: int) -> int | None:
        candidate = lo
        i = bisect_right(self._starts, lo) - 1
        if i >= 0 and self._ends[i] >= lo:
            candidate = self._ends[i] + 1
            i += 1
        else:
            i += 1
        while i < len(self._starts) and self._starts[i] <= candidate:
            candidate = max(candidate, self._ends[i] + 1)
            i += 1
        return candidate if candidate <= hi else None


class MetaPartition:
    """Replicated store of one volume's inode-id slice."""

    def __init__(
        self,
        partition_id: int,
        volume: str,
        range_start: int,
        range_end: int,
        replicas: list[str] | None = None,
        item_limit: int = DEFAULT_ITEM_LIMIT,
        create_root: bool = False,
    ):
        self.partition_id = partition_id
        self.volume = volume
        self.range_start = range_start
        self.range_end = range_end
        self.replicas = list(replicas or [])
        self.item_limit = item_limit
        self.status = STATUS_READ_WRITE
        self.inode_tree: OrderedMap = OrderedMap()
        self.dentry_tree: OrderedMap = OrderedMap()
        self.max_inode_id = 0
        self.free_list: set[int] = set()
        self._used = IdIntervalSet()
        self._ledger: dict[str, OrderedDict] = {}
        if create_root:
            root = Inode(1, TYPE_DIRECTORY, nlink=2)
            self.inode_tree[1] = root
            self._used.add(1)
            self.max_inode_id = 1

    # -- bookkeeping ---------------------------------------------------------

    def item_count(self) -> int:
        return len(self.inode_tree) + len(self.dentry_tree)

    def owns(self, inode_id: int) -> bool:
        return self.range_start <= inode_id <= self.range_end

    def _check_writable(self) -> None:
        if self.status != STATUS_READ_WRITE:
            raise FsError(ErrorCode.PARTITION_READ_ONLY, f"partition {self.partition_id}")
        if self.item_count() >= self.item_limit:
            self.status = STATUS_READ_ONLY
            raise FsError(ErrorCode.PARTITION_READ_ONLY, f"partition {self.partition_id} full")

    def _ledger_get(self, client: str, nonce: int):
        if not client:
            return None
        return self._ledger.get(client, {}).get(nonce)

    def _ledger_put(self, client: str, nonce: int, result) -> None:
        if not client:
            return
        entries = self._ledger.setdefault(client, OrderedDict())
        entries[nonce] = result
        while len(entries) > _LEDGER_CAP:
            entries.popitem(last=False)

    # -- replicated mutations --------------------------------------------------

    def apply(self, op) -> tuple[int, object]:
        """Apply one replicated operation; returns (ErrorCode value, body)."""
        client = getattr(op, "client", "")
        nonce = getattr(op, "nonce", 0)
        cached = self._ledger_get(client, nonce)
        if cached is not None:
            return cached
        try:
            body = self._dispatch(op)
            result = (int(ErrorCode.OK), body)
            # Errors never mutate state, so only successful mutations need
            # duplicate suppression on retry.
            self._ledger_put(client, nonce, result)
        except FsError as err:
            result = (int(err.code), err.data)
        return result

    def _dispatch(self, op):
        if isinstance(op, CreateInodeOp):
            return self._create_inode(op)
        if isinstance(op, CreateDentryOp):
            return self._create_dentry(op)
        if isinstance(op, LinkOp):
            return self._link(op)
        if isinstance(op, UnlinkOp):
            return self._unlink(op)
        if isinstance(op, DeleteDentryOp):
            return self._delete_dentry(op)
        if isinstance(op, EvictOp):
            return self._evict(op)
        if isinstance(op, SetExtentsOp):
            return self._set_extents(op)
        if isinstance(op, ApplySplitOp):
            return self._apply_split(op)
        raise FsError(ErrorCode.BAD_REQUEST, f"unknown meta op {type(op).__name__}")

    def _create_inode(self, op: CreateInodeOp) -> Inode:
        self._check_writable()
        inode_id = self._used.smallest_unused(self.range_start, self.range_end)
        if inode_id is None:
            raise FsError(ErrorCode.RANGE_EXHAUSTED, f"partition {self.partition_id}")
        nlink = 2 if op.inode_type == TYPE_DIRECTORY else 1
        inode = Inode(
            inode_id,
            op.inode_type,
            link_target=op.link_target,
            nlink=nlink,
            create_time=op.ts,
            modify_time=op.ts,
        )
        self.inode_tree[inode_id] = inode
        self._used.add(inode_id)
        self.max_inode_id = max(self.max_inode_id, inode_id)
        return inode

    def _create_dentry(self, op: CreateDentryOp) -> None:
        self._check_writable()
        if not op.name or "/" in op.name:
            raise FsError(ErrorCode.BAD_REQUEST, f"bad dentry name {op.name!r}")
        key = (op.parent_id, op.name)
        existing = self.dentry_tree.get(key)
        if existing is not None:
            raise FsError(ErrorCode.DENTRY_EXISTS, op.name, data=existing.child_inode)
        parent = self.inode_tree.get(op.parent_id)
        if parent is None or parent.marked_deleted:
            raise FsError(ErrorCode.NOT_FOUND, f"parent inode {op.parent_id}")
        if parent.inode_type != TYPE_DIRECTORY:
            raise FsError(ErrorCode.ENOTDIR, f"inode {op.parent_id}")
        self.dentry_tree[key] = Dentry(op.parent_id, op.name, op.child_inode, op.dentry_type)
        if op.dentry_type == TYPE_DIRECTORY:
            parent.nlink += 1
        parent.modify_time = op.ts
        return None

    def _link(self, op: LinkOp) -> int:
        inode = self.inode_tree.get(op.inode_id)
        if inode is None or inode.marked_deleted:
            raise FsError(ErrorCode.NOT_FOUND, f"inode {op.inode_id}")
        if inode.inode_type == TYPE_DIRECTORY:
            raise FsError(ErrorCode.IS_DIRECTORY, "hard links to directories are rejected")
        inode.nlink += 1
        inode.modify_time = op.ts
        return inode.nlink

    def _unlink(self, op: UnlinkOp) -> int:
        inode = self.inode_tree.get(op.inode_id)
        if inode is None or inode.marked_deleted:
            raise FsError(ErrorCode.NOT_FOUND, f"inode {op.inode_id}")
        # Deletion thresholds: files/symlinks enter the free list when the
        # last link goes, directories when unlinked at the base count of 2.
        if inode.inode_type == TYPE_DIRECTORY:
            hit = inode.nlink <= 2
        else:
            hit = inode.nlink <= 1
        inode.nlink = max(0, inode.nlink - 1)
        inode.modify_time = op.ts
        if hit:
            inode.flag |= FLAG_MARKED_DELETED
            self.free_list.add(op.inode_id)
        return inode.nlink

    def _delete_dentry(self, op: DeleteDentryOp) -> Dentry:
        key = (op.parent_id, op.name)
        dentry = self.dentry_tree.get(key)
        if dentry is None:
            raise FsError(ErrorCode.NOT_FOUND, f"dentry ({op.parent_id}, {op.name!r})")
        if dentry.dentry_type == TYPE_DIRECTORY and self.owns(dentry.child_inode):
            for _ in self.read_dir(dentry.child_inode, check=False):
                raise FsError(ErrorCode.DIRECTORY_NOT_EMPTY, op.name)
        del self.dentry_tree[key]
        parent = self.inode_tree.get(op.parent_id)
        if parent is not None:
            if dentry.dentry_type == TYPE_DIRECTORY and parent.nlink > 2:
                parent.nlink -= 1
            parent.modify_time = op.ts
        return dentry

    def _evict(self, op: EvictOp):
        if op.inode_id not in self.free_list:
            if op.inode_id in self.inode_tree:
                raise FsError(ErrorCode.NOT_EVICTABLE, f"inode {op.inode_id} not marked for deletion")
            raise FsError(ErrorCode.NOT_FOUND, f"inode {op.inode_id}")
        inode = self.inode_tree[op.inode_id]
        del self.inode_tree[op.inode_id]
        self.free_list.discard(op.inode_id)
        self._used.remove(op.inode_id)
        return list(inode.extents)

    def _set_extents(self, op: SetExtentsOp) -> None:
        inode = self.inode_tree.get(op.inode_id)
        if inode is None or inode.marked_deleted:
            raise FsError(ErrorCode.NOT_FOUND, f"inode {op.inode_id}")
        inode.extents = list(op.extents)
        inode.size = op.size
        inode.modify_time = op.ts
        return None

    def _apply_split(self, op: ApplySplitOp) -> int:
        if self.range_end != MAX_U64:
            raise FsError(ErrorCode.ALREADY_SPLIT, f"range end already {self.range_end}", data=self.range_end)
        if op.new_end < self.max_inode_id:
            raise FsError(ErrorCode.END_BELOW_MAX_INODE, f"end {op.new_end} < maxInodeID {self.max_inode_id}")
        self.range_end = op.new_end
        return self.range_end

    # -- leader reads ---------------------------------------------------------

    def lookup(self, parent_id: int, name: str) -> Dentry:
        dentry = self.dentry_tree.get((parent_id, name))
        if dentry is None:
            raise FsError(ErrorCode.NOT_FOUND, f"dentry ({parent_id}, {name!r})")
        return dentry

    def read_dir(self, parent_id: int, check: bool = True):
        if check:
            parent = self.inode_tree.get(parent_id)
            if parent is not None and parent.inode_type != TYPE_DIRECTORY:
                raise FsError(ErrorCode.ENOTDIR, f"inode {parent_id}")
        out = []
        for (pid, _name), dentry in self.dentry_tree.items(lo=(parent_id, "")):
            if pid != parent_id:
                break
            out.append(dentry)
        return out

    def get_inode(self, inode_id: int) -> Inode:
        inode = self.inode_tree.get(inode_id)
        if inode is None:
            raise FsError(ErrorCode.NOT_FOUND, f"inode {inode_id}")
        return inode

    def batch_inode_get(self, inode_ids) -> tuple[list[Inode], list[int]]:
        found, missing = [], []
        for inode_id in inode_ids:
            inode = self.inode_tree.get(inode_id)
            if inode is None:
                missing.append(inode_id)
            else:
                found.append(inode)
        return found, missing

    def report(self) -> dict:
        return {
            "partition_id": self.partition_id,
            "max_inode_id": self.max_inode_id,
            "items": self.item_count(),
            "status": self.status,
            "range_end": self.range_end,
        }

    # -- snapshot ---------------------------------------------------------------

    def snapshot(self) -> bytes:
        out = bytearray()
        out += _SNAP_HEAD.pack(
            SNAPSHOT_MAGIC,
            1,
            self.partition_id,
            self.range_start,
            self.range_end,
            self.max_inode_id,
            len(self.inode_tree),
        )
        for _, inode in self.inode_tree.items():
            out += _INODE_REC.pack(
                inode.inode_id,
                inode.inode_type,
                inode.flag,
                inode.nlink,
                inode.size,
                inode.create_time,
                inode.modify_time,
            )
            out += _U32.pack(len(inode.link_target))
            out += inode.link_target
            out += _U32.pack(len(inode.extents))
            for key in inode.extents:
                out += _EXTENT_REC.pack(key.dp_id, key.extent_id, key.extent_offset, key.size, key.file_offset)
        out += _U64.pack(len(self.dentry_tree))
        for _, dentry in self.dentry_tree.items():
            raw_name = dentry.name.encode("utf-8")
            out += _DENTRY_REC.pack(dentry.parent_id, dentry.child_inode, dentry.dentry_type, len(raw_name))
            out += raw_name
        out += _U32.pack(zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def restore(cls, raw: bytes, replicas: list[str] | None = None, volume: str = "", item_limit: int = DEFAULT_ITEM_LIMIT) -> "MetaPartition":
        if len(raw) < _SNAP_HEAD.size + _U32.size:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "snapshot too short")
        (stored_crc,) = _U32.unpack_from(raw, len(raw) - 4)
        if zlib.crc32(raw[:-4]) != stored_crc:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "snapshot checksum mismatch")
        magic, version, partition_id, range_start, range_end, max_inode_id, inode_count = _SNAP_HEAD.unpack_from(raw, 0)
        if magic != SNAPSHOT_MAGIC:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "bad snapshot magic")
        if version != 1:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"unsupported snapshot version {version}")
        part = cls(partition_id, volume, range_start, range_end, replicas=replicas, item_limit=item_limit)
        part.max_inode_id = max_inode_id
        pos = _SNAP_HEAD.size
        try:
            for _ in range(inode_count):
                inode_id, itype, flag, nlink, size, ctime, mtime = _INODE_REC.unpack_from(raw, pos)
                pos += _INODE_REC.size
                (tlen,) = _U32.unpack_from(raw, pos)
                pos += 4
                target = bytes(raw[pos : pos + tlen])
                pos += tlen
                (ecount,) = _U32.unpack_from(raw, pos)
                pos += 4
                extents = []
                for _ in range(ecount):
                    dp, eid, eoff, esize, foff = _EXTENT_REC.unpack_from(raw, pos)
                    pos += _EXTENT_REC.size
                    extents.append(ExtentKey(dp, eid, eoff, esize, foff))
                inode = Inode(inode_id, itype, target, nlink, flag, size, extents, ctime, mtime)
                part.inode_tree[inode_id] = inode
                part._used.add(inode_id)
                if inode.marked_deleted:
                    part.free_list.add(inode_id)
            (dentry_count,) = _U64.unpack_from(raw, pos)
            pos += 8
            for _ in range(dentry_count):
                parent_id, child, dtype, nlen = _DENTRY_REC.unpack_from(raw, pos)
                pos += _DENTRY_REC.size
                name = raw[pos : pos + nlen].decode("utf-8")
                pos += nlen
                part.dentry_tree[(parent_id, name)] = Dentry(parent_id, name, child, dtype)
        except struct.error as exc:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"truncated snapshot: {exc}") from exc
        if pos != len(raw) - 4:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "snapshot has trailing bytes")
        if part.item_count() >= part.item_limit:
            part.status = STATUS_READ_ONLY
        return part


def structurally_equal(a: MetaPartition, b: MetaPartition) -> bool:
    """Field-by-field equality of the replicated state (trees, range, ids)."""
    if (
        a.partition_id != b.partition_id
        or a.range_start != b.range_start
        or a.range_end != b.range_end
        or a.max_inode_id != b.max_inode_id
        or a.free_list != b.free_list
        or len(a.inode_tree) != len(b.inode_tree)
        or len(a.dentry_tree) != len(b.dentry_tree)
    ):
        return False
    for (ka, va), (kb, vb) in zip(a.inode_tree.items(), b.inode_tree.items()):
        if ka != kb or va != vb:
            return False
    for (ka, va), (kb, vb) in zip(a.dentry_tree.items(), b.dentry_tree.items()):
        if ka != kb or va != vb:
            return False
    return True
