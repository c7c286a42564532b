import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardfs.errors import ErrorCode
from shardfs.extent import ExtentKey
from shardfs.meta import (
    MAX_U64,
    TYPE_DIRECTORY,
    TYPE_FILE,
    TYPE_SYMLINK,
    ApplySplitOp,
    CreateDentryOp,
    CreateInodeOp,
    DeleteDentryOp,
    EvictOp,
    IdIntervalSet,
    LinkOp,
    MetaPartition,
    SetExtentsOp,
    UnlinkOp,
    structurally_equal,
)

OK = int(ErrorCode.OK)


def make_partition(start=1, end=100, root=False, **kw):
    return MetaPartition(1, "vol", start, end, replicas=["m1", "m2", "m3"], create_root=root, **kw)


def create_inode(part, itype=TYPE_FILE, client="c", nonce=None, target=b""):
    nonce = nonce if nonce is not None else random.randrange(1 << 40)
    return part.apply(CreateInodeOp(client, nonce, itype, target, 0))


class TestIdIntervalSet:
    def test_alloc_free_cycle(self):
        ids = IdIntervalSet()
        for n in (1, 2, 4):
            ids.add(n)
        assert ids.smallest_unused(1, 100) == 3
        ids.add(3)
        assert ids.smallest_unused(1, 100) == 5
        ids.remove(2)
        assert ids.smallest_unused(1, 100) == 2
        assert 2 not in ids and 3 in ids

    def test_exhaustion(self):
        ids = IdIntervalSet()
        for n in range(1, 6):
            ids.add(n)
        assert ids.smallest_unused(1, 5) is None

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.integers(1, 60))))
    def test_matches_set_oracle(self, ops):
        ids = IdIntervalSet()
        oracle = set()
        for add, n in ops:
            if add:
                ids.add(n)
                oracle.add(n)
            else:
                ids.remove(n)
                oracle.discard(n)
            assert (n in ids) == (n in oracle)
        unused = next((i for i in range(1, 62) if i not in oracle), None)
        assert ids.smallest_unused(1, 61) == unused


class TestCreateInode:
    def test_first_id_in_empty_partition(self):
        part = make_partition()
        status, inode = create_inode(part, TYPE_FILE)
        assert status == OK
        assert inode.inode_id == 1
        assert inode.nlink == 1

    def test_smallest_unused_fills_gap(self):
        # Occupy {1, 2, 4}, then expect 3 — verified against brute force.
        part = make_partition()
        for _ in range(4):
            create_inode(part)
        part.apply(UnlinkOp("c", random.randrange(1 << 40), 3, 0))
        part.apply(EvictOp("c", random.randrange(1 << 40), 3))
        held = set(part.inode_tree.keys())
        assert held == {1, 2, 4}
        brute = min(i for i in range(1, 101) if i not in held)
        status, inode = create_inode(part, TYPE_DIRECTORY)
        assert status == OK
        assert inode.inode_id == brute == 3
        assert inode.nlink == 2

    def test_range_exhausted(self):
        part = make_partition(end=3)
        for _ in range(3):
            assert create_inode(part)[0] == OK
        status, _ = create_inode(part)
        assert status == int(ErrorCode.RANGE_EXHAUSTED)

    def test_read_only_rejects(self):
        part = make_partition()
        part.status = 1
        status, _ = create_inode(part)
        assert status == int(ErrorCode.PARTITION_READ_ONLY)

    def test_item_limit_flips_read_only(self):
        part = make_partition(item_limit=3)
        assert create_inode(part)[0] == OK
        assert create_inode(part)[0] == OK
        assert create_inode(part)[0] == OK
        status, _ = create_inode(part)
        assert status == int(ErrorCode.PARTITION_READ_ONLY)
        assert part.status == 1

    def test_symlink_target(self):
        part = make_partition()
        status, inode = create_inode(part, TYPE_SYMLINK, target=b"/elsewhere")
        assert status == OK
        assert inode.link_target == b"/elsewhere"
        assert inode.nlink == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
    def test_smallest_unused_property(self, evict_points):
        part = make_partition(end=10_000)
        allocated = set()
        for _ in range(50):
            _, inode = create_inode(part)
            allocated.add(inode.inode_id)
        for target in evict_points:
            if target in allocated:
                part.apply(UnlinkOp("c", random.randrange(1 << 40), target, 0))
                part.apply(EvictOp("c", random.randrange(1 << 40), target))
                allocated.discard(target)
        expect = min(i for i in range(1, 10_001) if i not in allocated)
        _, inode = create_inode(part)
        assert inode.inode_id == expect


class TestDentries:
    def test_insert_and_lookup(self):
        part = make_partition(root=True)
        status, _ = part.apply(CreateDentryOp("c", 1, 1, "a", 7, TYPE_FILE, 0))
        assert status == OK
        assert part.lookup(1, "a").child_inode == 7

    def test_duplicate_insert(self):
        part = make_partition(root=True)
        part.apply(CreateDentryOp("c", 1, 1, "a", 7, TYPE_FILE, 0))
        status, existing = part.apply(CreateDentryOp("c", 2, 1, "a", 8, TYPE_FILE, 0))
        assert status == int(ErrorCode.DENTRY_EXISTS)
        assert existing == 7

    def test_scan_order_is_lexicographic(self):
        part = make_partition(end=20_000, root=True)
        rng = random.Random(7)
        inserted = []
        parents = [1]
        for _ in range(8):
            _, d = create_inode(part, TYPE_DIRECTORY)
            parents.append(d.inode_id)
        for i in range(1000):
            parent = rng.choice(parents)
            name = "n%04d" % rng.randrange(10_000)
            status, _ = part.apply(CreateDentryOp("c", 1000 + i, parent, name, 2, TYPE_FILE, 0))
            if status == OK:
                inserted.append((parent, name))
        scanned = [(d.parent_id, d.name) for _, d in part.dentry_tree.items()]
        assert scanned == sorted(inserted)

    def test_read_dir_sorted_by_name(self):
        part = make_partition(root=True)
        for name in ["b", "a", "c"]:
            part.apply(CreateDentryOp("c", random.randrange(1 << 30), 1, name, 5, TYPE_FILE, 0))
        assert [d.name for d in part.read_dir(1)] == ["a", "b", "c"]
        assert part.read_dir(99) == []

    def test_subdir_dentry_bumps_parent_nlink(self):
        part = make_partition(root=True)
        _, child = create_inode(part, TYPE_DIRECTORY)
        part.apply(CreateDentryOp("c", 1, 1, "d", child.inode_id, TYPE_DIRECTORY, 0))
        assert part.get_inode(1).nlink == 3
        part.apply(DeleteDentryOp("c", 2, 1, "d"))
        assert part.get_inode(1).nlink == 2

    def test_delete_dentry_empty_check_when_local(self):
        part = make_partition(root=True)
        _, sub = create_inode(part, TYPE_DIRECTORY)
        part.apply(CreateDentryOp("c", 1, 1, "sub", sub.inode_id, TYPE_DIRECTORY, 0))
        part.apply(CreateDentryOp("c", 2, sub.inode_id, "kid", 42, TYPE_FILE, 0))
        status, _ = part.apply(DeleteDentryOp("c", 3, 1, "sub"))
        assert status == int(ErrorCode.DIRECTORY_NOT_EMPTY)
        part.apply(DeleteDentryOp("c", 4, sub.inode_id, "kid"))
        status, removed = part.apply(DeleteDentryOp("c", 5, 1, "sub"))
        assert status == OK
        assert removed.child_inode == sub.inode_id


class TestLinkUnlink:
    def test_link_increments(self):
        part = make_partition()
        _, inode = create_inode(part)
        status, nlink = part.apply(LinkOp("c", 1, inode.inode_id, 0))
        assert (status, nlink) == (OK, 2)

    def test_link_directory_rejected(self):
        part = make_partition()
        _, inode = create_inode(part, TYPE_DIRECTORY)
        status, _ = part.apply(LinkOp("c", 1, inode.inode_id, 0))
        assert status == int(ErrorCode.IS_DIRECTORY)

    def test_unlink_file_above_threshold(self):
        part = make_partition()
        _, inode = create_inode(part)
        part.apply(LinkOp("c", 1, inode.inode_id, 0))
        status, nlink = part.apply(UnlinkOp("c", 2, inode.inode_id, 0))
        assert (status, nlink) == (OK, 1)
        assert inode.inode_id not in part.free_list

    def test_unlink_file_reaches_zero(self):
        part = make_partition()
        _, inode = create_inode(part)
        status, nlink = part.apply(UnlinkOp("c", 1, inode.inode_id, 0))
        assert (status, nlink) == (OK, 0)
        assert inode.inode_id in part.free_list
        assert part.get_inode(inode.inode_id).marked_deleted

    def test_unlink_directory_threshold_two(self):
        part = make_partition()
        _, inode = create_inode(part, TYPE_DIRECTORY)
        assert inode.nlink == 2
        status, nlink = part.apply(UnlinkOp("c", 1, inode.inode_id, 0))
        assert (status, nlink) == (OK, 1)
        assert inode.inode_id in part.free_list


class TestEvict:
    def test_evict_hands_back_extent_keys(self):
        part = make_partition()
        _, inode = create_inode(part)
        keys = [ExtentKey(2, 5, 0, 100, 0)]
        part.apply(SetExtentsOp("c", 1, inode.inode_id, 100, keys, 0))
        part.apply(UnlinkOp("c", 2, inode.inode_id, 0))
        status, returned = part.apply(EvictOp("c", 3, inode.inode_id))
        assert status == OK
        assert returned == keys
        assert inode.inode_id not in part.inode_tree

    def test_evict_requires_free_list(self):
        part = make_partition()
        _, inode = create_inode(part)
        status, _ = part.apply(EvictOp("c", 1, inode.inode_id))
        assert status == int(ErrorCode.NOT_EVICTABLE)
        status, _ = part.apply(EvictOp("c", 2, 77))
        assert status == int(ErrorCode.NOT_FOUND)


class TestSplit:
    def test_apply_split(self):
        part = make_partition(end=MAX_U64)
        for _ in range(10):
            create_inode(part)
        status, new_end = part.apply(ApplySplitOp(10 + 16384))
        assert status == OK
        assert part.range_end == 16394
        status, _ = part.apply(ApplySplitOp(20_000))
        assert status == int(ErrorCode.ALREADY_SPLIT)

    def test_split_below_max_inode_rejected(self):
        part = make_partition(end=MAX_U64)
        for _ in range(10):
            create_inode(part)
        status, _ = part.apply(ApplySplitOp(5))
        assert status == int(ErrorCode.END_BELOW_MAX_INODE)

    def test_allocation_respects_new_end(self):
        part = make_partition(end=MAX_U64)
        create_inode(part)
        part.apply(ApplySplitOp(3))
        assert create_inode(part)[1].inode_id == 2
        assert create_inode(part)[1].inode_id == 3
        assert create_inode(part)[0] == int(ErrorCode.RANGE_EXHAUSTED)


class TestBatchGet:
    def test_partial_results(self):
        part = make_partition()
        ids = [create_inode(part)[1].inode_id for _ in range(3)]
        found, missing = part.batch_inode_get(ids + [55, 66])
        assert [i.inode_id for i in found] == ids
        assert missing == [55, 66]


class TestLedger:
    def test_duplicate_nonce_returns_cached_result(self):
        part = make_partition()
        status1, inode1 = part.apply(CreateInodeOp("c", 42, TYPE_FILE, b"", 0))
        status2, inode2 = part.apply(CreateInodeOp("c", 42, TYPE_FILE, b"", 0))
        assert (status1, inode1.inode_id) == (status2, inode2.inode_id)
        assert len(part.inode_tree) == 1

    def test_errors_are_not_cached(self):
        part = make_partition()
        part.status = 1
        status, _ = part.apply(CreateInodeOp("c", 7, TYPE_FILE, b"", 0))
        assert status == int(ErrorCode.PARTITION_READ_ONLY)
        part.status = 0
        status, inode = part.apply(CreateInodeOp("c", 7, TYPE_FILE, b"", 0))
        assert status == OK


class TestSnapshot:
    def test_header_layout(self):
        part = make_partition(start=1, end=MAX_U64, root=True)
        raw = part.snapshot()
        assert raw[:8] == b"CFSMETA1"
        import struct

        version, pid, start, end, max_id, count = struct.unpack_from("<IQQQQQ", raw, 8)
        assert (version, pid, start, end, max_id, count) == (1, 1, 1, MAX_U64, 1, 1)

    def test_empty_round_trip(self):
        part = make_partition()
        back = MetaPartition.restore(part.snapshot())
        assert structurally_equal(part, back)

    def test_round_trip_after_random_ops(self):
        part = make_partition(end=50_000, root=True)
        rng = random.Random(99)
        dirs = [1]
        files = []
        for step in range(500):
            roll = rng.random()
            if roll < 0.35:
                _, inode = create_inode(part, TYPE_FILE, nonce=step * 10)
                files.append(inode.inode_id)
                part.apply(CreateDentryOp("c", step * 10 + 1, rng.choice(dirs), f"f{step}", inode.inode_id, TYPE_FILE, step))
            elif roll < 0.55:
                _, inode = create_inode(part, TYPE_DIRECTORY, nonce=step * 10 + 2)
                part.apply(CreateDentryOp("c", step * 10 + 3, rng.choice(dirs), f"d{step}", inode.inode_id, TYPE_DIRECTORY, step))
                dirs.append(inode.inode_id)
            elif roll < 0.7 and files:
                part.apply(SetExtentsOp("c", step * 10 + 4, rng.choice(files), 128, [ExtentKey(1, 2, 0, 128, 0)], step))
            elif roll < 0.85 and files:
                target = files.pop(rng.randrange(len(files)))
                part.apply(UnlinkOp("c", step * 10 + 5, target, step))
                if rng.random() < 0.5:
                    part.apply(EvictOp("c", step * 10 + 6, target))
        back = MetaPartition.restore(part.snapshot())
        assert structurally_equal(part, back)
        assert back.snapshot() == part.snapshot()

    def test_corruption_detection(self):
        part = make_partition(root=True)
        raw = bytearray(part.snapshot())
        raw[len(raw) // 2] ^= 0x40
        with pytest.raises(Exception) as exc_info:
            MetaPartition.restore(bytes(raw))
        assert exc_info.value.code == ErrorCode.CORRUPT_SNAPSHOT
