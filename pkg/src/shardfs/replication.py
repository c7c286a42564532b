"""Raft-style replicated log used by meta partitions, data-partition
overwrites, and the resource manager itself.

The group is a sans-io state machine: the hosting node feeds it messages
and periodic ticks, and it emits messages through the node context. Leader
liveness rides on the node-level raft-set heartbeats (one coalesced
heartbeat per node pair per tick) instead of per-group heartbeat floods,
so idle groups generate no traffic of their own.

Durable state (current term, vote, log entries, latest snapshot) lives in
a plain dict owned by the node's disk; the simulator keeps that dict across
crashes and the TCP runtime maps it onto CRC-framed log files.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

from .errors import ErrorCode, FsError
from .wire import Message, MsgType, decode_obj, encode_obj, payload

NOOP = b""

MAX_ENTRIES_PER_MSG = 128

ROLE_FOLLOWER = 0
ROLE_CANDIDATE = 1
ROLE_LEADER = 2


@payload(110)
@dataclass(slots=True)
class LogEntry:
    term: int
    index: int
    op: bytes           # encoded operation payload; empty for no-ops
    checksum: int = 0

    def verify(self) -> None:
        if zlib.crc32(self.op) != self.checksum:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"log entry {self.index} checksum mismatch")


def make_entry(term: int, index: int, op: bytes) -> LogEntry:
    return LogEntry(term, index, op, zlib.crc32(op))


@payload(111)
@dataclass(slots=True)
class VoteReq:
    candidate: str
    last_log_index: int
    last_log_term: int


@payload(112)
@dataclass(slots=True)
class VoteResp:
    granted: bool


@payload(113)
@dataclass(slots=True)
class AppendReq:
    leader: str
    prev_index: int
    prev_term: int
    entries: list
    leader_commit: int


@payload(114)
@dataclass(slots=True)
class AppendResp:
    success: bool
    match_index: int
    hint_index: int


@payload(115)
@dataclass(slots=True)
class SnapshotReq:
    leader: str
    snap_index: int
    snap_term: int
    data: bytes


@payload(116)
@dataclass(slots=True)
class SnapshotResp:
    match_index: int


@payload(117)
@dataclass(slots=True)
class CatchupReq:
    last_index: int


@payload(118)
@dataclass(slots=True)
class Heartbeat:
    node_id: int
    groups: list  # [group_id, term, commit_index] for groups the sender leads


class RaftGroup:
    """One replicated log plus its attached state machine."""

    def __init__(
        self,
        group_id: int,
        self_addr: str,
        members: list[str],
        state_machine,
        ctx,
        hard: dict | None = None,
        initial_leader: str = "",
        election_timeout: tuple[int, int] = (500, 1000),
        snapshot_threshold: int = 10_000,
        raft_set_id: int = 0,
    ):
        self.group_id = group_id
        self.self_addr = self_addr
        self.members = list(members)
        self.sm = state_machine
        self.ctx = ctx
        self.raft_set_id = raft_set_id
        self.election_timeout = election_timeout
        self.snapshot_threshold = snapshot_threshold
        self.on_apply = None  # fn(index, op_obj, status, body); set by the host

        # Durable state; the dict identity is owned by the node disk.
        if hard is None:
            hard = {}
        self.hard = hard
        hard.setdefault("term", 0)
        hard.setdefault("voted_for", "")
        hard.setdefault("entries", [])
        hard.setdefault("snap_index", 0)
        hard.setdefault("snap_term", 0)
        hard.setdefault("snap_data", b"")

        self.role = ROLE_FOLLOWER
        self.leader_addr = ""
        self.commit_index = self.hard["snap_index"]
        self.applied_index = self.hard["snap_index"]
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.votes: set[str] = set()
        self._deadline = 0
        self.reset_election_deadline()

        if self.hard["snap_data"]:
            self.sm.restore(self.hard["snap_data"])
            self._replay_from(self.hard["snap_index"] + 1)

        if initial_leader:
            # Designated bootstrap leader (term 1), so fresh partitions serve
            # without waiting out an election.
            self.hard["term"] = max(self.hard["term"], 1)
            self.leader_addr = initial_leader
            if initial_leader == self_addr:
                self._become_leader()

    # -- introspection -------------------------------------------------------

    @property
    def term(self) -> int:
        return self.hard["term"]

    @property
    def is_leader(self) -> bool:
        return self.role == ROLE_LEADER

    def last_index(self) -> int:
        entries = self.hard["entries"]
        return entries[-1].index if entries else self.hard["snap_index"]

    def last_term(self) -> int:
        entries = self.hard["entries"]
        return entries[-1].term if entries else self.hard["snap_term"]

    def entry_at(self, index: int) -> LogEntry | None:
        entries = self.hard["entries"]
        pos = index - self.hard["snap_index"] - 1
        if 0 <= pos < len(entries):
            return entries[pos]
        return None

    def term_at(self, index: int) -> int:
        if index == self.hard["snap_index"]:
            return self.hard["snap_term"]
        entry = self.entry_at(index)
        return entry.term if entry else -1

    def committed_ops(self) -> list[bytes]:
        """Operation payloads of the committed prefix (tests/invariants)."""
        out = []
        for entry in self.hard["entries"]:
            if entry.index > self.commit_index:
                break
            out.append(entry.op)
        return out

    def reset_election_deadline(self) -> None:
        lo, hi = self.election_timeout
        self._deadline = self.ctx.now() + self.ctx.rng.randint(lo, hi)

    # -- client-facing --------------------------------------------------------

    def propose(self, op_obj) -> int:
        if self.role != ROLE_LEADER:
            raise FsError(ErrorCode.NOT_LEADER, f"group {self.group_id}", leader_hint=self.leader_addr)
        op = encode_obj(op_obj) if op_obj is not None else NOOP
        index = self.last_index() + 1
        self.hard["entries"].append(make_entry(self.term, index, op))
        self.match_index[self.self_addr] = index
        if len(self.members) == 1:
            self._advance_commit()
        else:
            self._broadcast_entries()
        return index

    # -- message handling ------------------------------------------------------

    def handle(self, msg: Message) -> None:
        if msg.term > self.term:
            self._become_follower(msg.term)
        if msg.msg_type == MsgType.RAFT_VOTE_REQ:
            self._on_vote_req(msg)
        elif msg.msg_type == MsgType.RAFT_VOTE_RESP:
            self._on_vote_resp(msg)
        elif msg.msg_type == MsgType.RAFT_APPEND_REQ:
            self._on_append_req(msg)
        elif msg.msg_type == MsgType.RAFT_APPEND_RESP:
            self._on_append_resp(msg)
        elif msg.msg_type == MsgType.RAFT_SNAPSHOT_REQ:
            self._on_snapshot_req(msg)
        elif msg.msg_type == MsgType.RAFT_SNAPSHOT_RESP:
            self._on_snapshot_resp(msg)
        elif msg.msg_type == MsgType.RAFT_CATCHUP_REQ:
            self._on_catchup_req(msg)

    def on_leader_claim(self, leader: str, term: int, commit_index: int) -> None:
        """Coalesced node heartbeat carried a leadership claim for this group."""
        if term < self.term:
            return
        if term > self.term:
            self._become_follower(term)
        if self.role != ROLE_LEADER:
            self.leader_addr = leader
            self.reset_election_deadline()
            # Only trust the piggybacked commit index when the entry is from
            # the claiming leader's own term; earlier entries get committed
            # through the usual AppendEntries path.
            if commit_index > self.commit_index and self.term_at(commit_index) == term:
                self.commit_index = min(commit_index, self.last_index())
                self._apply_committed()
            if self.last_index() < commit_index:
                self.ctx.send(leader, Message(MsgType.RAFT_CATCHUP_REQ, self.self_addr, leader, self.group_id, self.term, 0, CatchupReq(self.last_index())))

    def tick(self, now: int) -> None:
        if self.role == ROLE_LEADER:
            self._probe_laggards()
            return
        if now >= self._deadline:
            self._start_election()

    # -- internals ---------------------------------------------------------------

    def _become_follower(self, term: int) -> None:
        self.hard["term"] = term
        self.hard["voted_for"] = ""
        self.role = ROLE_FOLLOWER
        self.votes.clear()
        self.reset_election_deadline()

    def _become_leader(self) -> None:
        self.role = ROLE_LEADER
        self.leader_addr = self.self_addr
        last = self.last_index()
        self.next_index = {m: last + 1 for m in self.members if m != self.self_addr}
        self.match_index = {m: 0 for m in self.members if m != self.self_addr}
        self.match_index[self.self_addr] = last
        if len(self.members) > 1 and last > self.hard["snap_index"]:
            # Commit a no-op from the new term so earlier entries can commit.
            self.hard["entries"].append(make_entry(self.term, last + 1, NOOP))
            self.match_index[self.self_addr] = last + 1
        if len(self.members) == 1:
            self._advance_commit()
        else:
            self._broadcast_entries(force_all=True)

    def _start_election(self) -> None:
        self.hard["term"] += 1
        self.hard["voted_for"] = self.self_addr
        self.role = ROLE_CANDIDATE
        self.votes = {self.self_addr}
        self.reset_election_deadline()
        if len(self.members) == 1:
            self._become_leader()
            return
        req = VoteReq(self.self_addr, self.last_index(), self.last_term())
        for member in self.members:
            if member != self.self_addr:
                self.ctx.send(member, Message(MsgType.RAFT_VOTE_REQ, self.self_addr, member, self.group_id, self.term, 0, req))

    def _on_vote_req(self, msg: Message) -> None:
        req: VoteReq = msg.body
        granted = False
        if msg.term == self.term and self.hard["voted_for"] in ("", req.candidate):
            up_to_date = (req.last_log_term, req.last_log_index) >= (self.last_term(), self.last_index())
            if up_to_date:
                granted = True
                self.hard["voted_for"] = req.candidate
                self.reset_election_deadline()
        self.ctx.send(msg.src, Message(MsgType.RAFT_VOTE_RESP, self.self_addr, msg.src, self.group_id, self.term, 0, VoteResp(granted)))

    def _on_vote_resp(self, msg: Message) -> None:
        if self.role != ROLE_CANDIDATE or msg.term != self.term:
            return
        if msg.body.granted:
            self.votes.add(msg.src)
            if len(self.votes) >= len(self.members) // 2 + 1:
                self._become_leader()

    def _on_append_req(self, msg: Message) -> None:
        req: AppendReq = msg.body
        if msg.term < self.term:
            self._send_append_resp(msg.src, False, 0, self.last_index() + 1)
            return
        self.role = ROLE_FOLLOWER
        self.leader_addr = req.leader
        self.reset_election_deadline()
        if req.prev_index > self.last_index() or (
            req.prev_index > self.hard["snap_index"] and self.term_at(req.prev_index) != req.prev_term
        ):
            self._send_append_resp(msg.src, False, 0, min(self.last_index() + 1, req.prev_index))
            return
        entries = self.hard["entries"]
        for entry in req.entries:
            entry.verify()
            if entry.index <= self.hard["snap_index"]:
                continue
            pos = entry.index - self.hard["snap_index"] - 1
            if pos < len(entries):
                if entries[pos].term != entry.term:
                    del entries[pos:]
                    entries.append(entry)
            else:
                entries.append(entry)
        match = req.prev_index + len(req.entries)
        if req.leader_commit > self.commit_index:
            self.commit_index = min(req.leader_commit, self.last_index())
            self._apply_committed()
        self._send_append_resp(msg.src, True, match, 0)

    def _send_append_resp(self, dst: str, success: bool, match: int, hint: int) -> None:
        self.ctx.send(dst, Message(MsgType.RAFT_APPEND_RESP, self.self_addr, dst, self.group_id, self.term, 0, AppendResp(success, match, hint)))

    def _on_append_resp(self, msg: Message) -> None:
        if self.role != ROLE_LEADER or msg.term != self.term:
            return
        resp: AppendResp = msg.body
        peer = msg.src
        if resp.success:
            if resp.match_index > self.match_index.get(peer, 0):
                self.match_index[peer] = resp.match_index
            self.next_index[peer] = max(self.next_index.get(peer, 1), resp.match_index + 1)
            self._advance_commit()
            if self.match_index[peer] < self.last_index():
                self._send_entries(peer)
        else:
            self.next_index[peer] = max(1, min(resp.hint_index, self.next_index.get(peer, 1) - 1))
            self._send_entries(peer)

    def _on_snapshot_req(self, msg: Message) -> None:
        req: SnapshotReq = msg.body
        if msg.term < self.term:
            return
        self.role = ROLE_FOLLOWER
        self.leader_addr = req.leader
        self.reset_election_deadline()
        if req.snap_index <= self.hard["snap_index"]:
            self.ctx.send(msg.src, Message(MsgType.RAFT_SNAPSHOT_RESP, self.self_addr, msg.src, self.group_id, self.term, 0, SnapshotResp(self.last_index())))
            return
        self.sm.restore(req.data)
        self.hard["snap_index"] = req.snap_index
        self.hard["snap_term"] = req.snap_term
        self.hard["snap_data"] = req.data
        self.hard["entries"] = []
        self.commit_index = req.snap_index
        self.applied_index = req.snap_index
        self.ctx.send(msg.src, Message(MsgType.RAFT_SNAPSHOT_RESP, self.self_addr, msg.src, self.group_id, self.term, 0, SnapshotResp(req.snap_index)))

    def _on_snapshot_resp(self, msg: Message) -> None:
        if self.role != ROLE_LEADER or msg.term != self.term:
            return
        resp: SnapshotResp = msg.body
        peer = msg.src
        self.match_index[peer] = max(self.match_index.get(peer, 0), resp.match_index)
        self.next_index[peer] = self.match_index[peer] + 1
        if self.match_index[peer] < self.last_index():
            self._send_entries(peer)

    def _on_catchup_req(self, msg: Message) -> None:
        if self.role != ROLE_LEADER:
            return
        req: CatchupReq = msg.body
        self.next_index[msg.src] = max(1, req.last_index + 1)
        self._send_entries(msg.src)

    def _broadcast_entries(self, force_all: bool = False) -> None:
        for member in self.members:
            if member != self.self_addr:
                self._send_entries(member, force=force_all)

    def _probe_laggards(self) -> None:
        last = self.last_index()
        for member in self.members:
            if member != self.self_addr and self.match_index.get(member, 0) < last:
                self._send_entries(member)

    def _send_entries(self, peer: str, force: bool = False) -> None:
        nxt = self.next_index.get(peer, self.last_index() + 1)
        if nxt <= self.hard["snap_index"]:
            req = SnapshotReq(self.self_addr, self.hard["snap_index"], self.hard["snap_term"], self.hard["snap_data"])
            self.ctx.send(peer, Message(MsgType.RAFT_SNAPSHOT_REQ, self.self_addr, peer, self.group_id, self.term, 0, req))
            return
        entries = self.hard["entries"]
        start = nxt - self.hard["snap_index"] - 1
        batch = entries[start : start + MAX_ENTRIES_PER_MSG]
        if not batch and not force:
            batch = []
        prev_index = nxt - 1
        req = AppendReq(self.self_addr, prev_index, self.term_at(prev_index), batch, self.commit_index)
        self.ctx.send(peer, Message(MsgType.RAFT_APPEND_REQ, self.self_addr, peer, self.group_id, self.term, 0, req))

    def _advance_commit(self) -> None:
        if self.role != ROLE_LEADER:
            return
        marks = sorted(self.match_index.get(m, 0) if m != self.self_addr else self.last_index() for m in self.members)
        majority_match = marks[(len(self.members) - 1) // 2]
        if majority_match > self.commit_index and self.term_at(majority_match) == self.term:
            self.commit_index = majority_match
            self._apply_committed()

    def _apply_committed(self) -> None:
        while self.applied_index < self.commit_index:
            self.applied_index += 1
            entry = self.entry_at(self.applied_index)
            if entry is None:
                continue
            if entry.op == NOOP:
                status, body, op_obj = int(ErrorCode.OK), None, None
            else:
                op_obj = decode_obj(entry.op)
                status, body = self.sm.apply(op_obj)
            if self.on_apply is not None:
                self.on_apply(self.applied_index, op_obj, status, body)
        self._maybe_compact()

    def _maybe_compact(self) -> None:
        if self.applied_index - self.hard["snap_index"] < self.snapshot_threshold:
            return
        data = self.sm.snapshot()
        snap_term = self.term_at(self.applied_index)
        entries = self.hard["entries"]
        keep_from = self.applied_index - self.hard["snap_index"]
        self.hard["entries"] = entries[keep_from:]
        self.hard["snap_index"] = self.applied_index
        self.hard["snap_term"] = snap_term
        self.hard["snap_data"] = data

    def _replay_from(self, start_index: int) -> None:
        # Restart path: reapply every entry up to the old applied point once
        # commit information returns; до then just rebuild volatile indexes.
        self.commit_index = self.hard["snap_index"]
        self.applied_index = self.hard["snap_index"]


# -- CRC-framed raft log files (real-process persistence) ---------------------

_LOG_REC_HEAD = struct.Struct("<QQI")
_LOG_CRC = struct.Struct("<I")


def encode_log(entries: list[LogEntry]) -> bytes:
    out = bytearray()
    for entry in entries:
        out += _LOG_REC_HEAD.pack(entry.term, entry.index, len(entry.op))
        out += entry.op
        out += _LOG_CRC.pack(zlib.crc32(out[-(_LOG_REC_HEAD.size + len(entry.op)):]))
    return bytes(out)


def decode_log(raw: bytes) -> list[LogEntry]:
    entries = []
    pos = 0
    while pos < len(raw):
        if pos + _LOG_REC_HEAD.size > len(raw):
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "truncated log record header")
        term, index, oplen = _LOG_REC_HEAD.unpack_from(raw, pos)
        body_end = pos + _LOG_REC_HEAD.size + oplen
        if body_end + _LOG_CRC.size > len(raw):
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, "truncated log record")
        op = bytes(raw[pos + _LOG_REC_HEAD.size : body_end])
        (crc,) = _LOG_CRC.unpack_from(raw, body_end)
        if zlib.crc32(raw[pos:body_end]) != crc:
            raise FsError(ErrorCode.CORRUPT_SNAPSHOT, f"log record {index} checksum mismatch")
        entries.append(make_entry(term, index, op))
        pos = body_end + _LOG_CRC.size
    return entries
