"""Error codes and exceptions shared by every subsystem.

Codes are stable u16 values so they can travel inside wire frames.
"""

from __future__ import annotations

import enum


class ErrorCode(enum.IntEnum):
    OK = 0

    # metadata partition
    PARTITION_READ_ONLY = 10
    RANGE_EXHAUSTED = 11
    DENTRY_EXISTS = 12
    NOT_FOUND = 13
    IS_DIRECTORY = 14
    DIRECTORY_NOT_EMPTY = 15
    NOT_EVICTABLE = 16
    ALREADY_SPLIT = 17
    END_BELOW_MAX_INODE = 18
    CORRUPT_SNAPSHOT = 19

    # extent store
    EXTENT_FULL = 30
    OUT_OF_COMMITTED_RANGE = 31
    HOLE_OVERLAP = 32
    NOT_AGGREGATE_EXTENT = 33
    INVALID_RANGE = 34
    BEYOND_COMMITTED = 35
    HOLE_READ = 36
    CRC_MISMATCH = 37

    # replication
    NOT_LEADER = 50
    REPLICA_TIMEOUT = 51
    NO_QUORUM = 52
    ALIGNMENT_FAILURE = 53
    NOT_READY = 54

    # resource manager
    VOLUME_EXISTS = 70
    INSUFFICIENT_NODES = 71
    NOT_SENTINEL_PARTITION = 72
    STALE_MAX_INODE_ID = 73
    UNKNOWN_NODE = 74
    UNAVAILABLE = 75

    # client-facing
    EEXISTS = 90
    ENOENT = 91
    NO_WRITABLE_PARTITION = 92
    ORPHAN_RECORDED = 93
    COMMIT_STALLED = 94
    META_UNAVAILABLE = 95
    SHORT_READ = 96
    ENOTDIR = 97

    # harness / tooling
    TARGET_UNREACHABLE = 110
    SPEC_INVALID = 111
    SCRIPT_ERROR = 112
    TIMEOUT = 113
    BAD_REQUEST = 114


class FsError(Exception):
    """Carries an ErrorCode plus an optional detail payload.

    ``leader_hint`` is set on NOT_LEADER responses so callers can correct
    their leader cache without a discovery round.
    """

    def __init__(self, code: ErrorCode, detail: str = "", leader_hint: str | None = None, data=None):
        super().__init__(f"{code.name}: {detail}" if detail else code.name)
        self.code = code
        self.detail = detail
        self.leader_hint = leader_hint
        self.data = data


class RpcTimeout(Exception):
    """A request did not produce a response within its deadline."""

    def __init__(self, dest: str = "", what: str = ""):
        super().__init__(f"timeout waiting for {what or 'response'} from {dest}")
        self.dest = dest
