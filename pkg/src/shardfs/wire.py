"""Wire protocol shared by the in-process simulator and the TCP transport.

Frame layout (little-endian, one frame per message):

    magic "CFSMSG01" (8) | msgType u16 | groupId u64 | term u64 |
    payloadLen u32 | payload | CRC32

The CRC covers every byte from the magic through the payload. The payload
is a self-describing binary encoding of the message envelope
``(src, reqId, body)``; op bodies are registered dataclasses so both
transports and the raft log share one serializer.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, fields

MAGIC = b"CFSMSG01"
_HEADER = struct.Struct("<8sHQQI")
_CRC = struct.Struct("<I")


class BadFrame(Exception):
    pass


class MsgType(enum.IntEnum):
    RESP = 1
    HEARTBEAT = 2

    # resource manager surface
    MGR_GET_VIEW = 10
    MGR_CREATE_VOLUME = 11
    MGR_VOLUME_INFO = 12
    MGR_EXPAND_VOLUME = 13
    MGR_LIST_NODES = 14
    MGR_ADD_NODE = 15
    MGR_DECOMMISSION_NODE = 16
    MGR_LIST_PARTITIONS = 17
    MGR_SPLIT_PARTITION = 18
    MGR_MARK_READONLY = 19
    MGR_REPORT_FAILURE = 20
    NODE_REPORT = 21

    # manager -> storage node tasks
    TASK_CREATE_META_PARTITION = 30
    TASK_CREATE_DATA_PARTITION = 31
    TASK_APPLY_SPLIT = 32

    # metadata partition ops
    META_CREATE_INODE = 40
    META_CREATE_DENTRY = 41
    META_LOOKUP = 42
    META_READDIR = 43
    META_BATCH_INODE_GET = 44
    META_GET_INODE = 45
    META_LINK = 46
    META_UNLINK = 47
    META_DELETE_DENTRY = 48
    META_EVICT = 49
    META_SET_EXTENTS = 50

    # data partition ops (primary-backup protocol for appends)
    DATA_APPEND = 60
    DATA_FORWARD = 61
    DATA_FORWARD_ACK = 62
    DATA_READ = 63
    DATA_OVERWRITE = 64
    DATA_PUNCH_HOLE = 65
    DATA_DELETE_EXTENT = 66

    # raft-style replicated log
    RAFT_VOTE_REQ = 80
    RAFT_VOTE_RESP = 81
    RAFT_APPEND_REQ = 82
    RAFT_APPEND_RESP = 83
    RAFT_SNAPSHOT_REQ = 84
    RAFT_SNAPSHOT_RESP = 85
    RAFT_CATCHUP_REQ = 86

    # failure recovery (extent alignment)
    RECOVER_QUERY = 90
    RECOVER_FETCH = 91

    # census / introspection
    CENSUS_REQ = 100


# Message types that belong to each replication protocol; the simulator's
# scenario-routing checker classifies traffic with these sets.
PB_PROTOCOL = frozenset({MsgType.DATA_APPEND, MsgType.DATA_FORWARD, MsgType.DATA_FORWARD_ACK})
RAFT_PROTOCOL = frozenset(
    {
        MsgType.RAFT_VOTE_REQ,
        MsgType.RAFT_VOTE_RESP,
        MsgType.RAFT_APPEND_REQ,
        MsgType.RAFT_APPEND_RESP,
        MsgType.RAFT_SNAPSHOT_REQ,
        MsgType.RAFT_SNAPSHOT_RESP,
        MsgType.RAFT_CATCHUP_REQ,
    }
)


@dataclass(slots=True)
class Message:
    msg_type: MsgType
    src: str
    dst: str
    group_id: int = 0
    term: int = 0
    req_id: int = 0
    body: object = None


@dataclass(slots=True)
class Resp:
    status: int = 0          # ErrorCode value; 0 == OK
    detail: str = ""
    leader_hint: str = ""
    body: object = None


def ok(body=None) -> Resp:
    return Resp(0, "", "", body)


# -- payload object codec ---------------------------------------------------
#
# Deterministic tagged binary encoding for None/bool/int/bytes/str/list/dict
# plus registered dataclasses. Ints are zigzag varints so u64 sentinels fit.

_REGISTRY_BY_TID: dict[int, type] = {}
_TID_BY_CLASS: dict[type, int] = {}
_FIELDS_BY_CLASS: dict[type, tuple] = {}


def payload(tid: int):
    """Register a dataclass for wire encoding under a stable type id."""

    def deco(cls):
        if tid in _REGISTRY_BY_TID:
            raise ValueError(f"duplicate payload tid {tid}")
        _REGISTRY_BY_TID[tid] = cls
        _TID_BY_CLASS[cls] = tid
        return cls

    return deco


def registered_payload_classes():
    return dict(_REGISTRY_BY_TID)


def _write_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise BadFrame("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def encode_obj(obj) -> bytes:
    out = bytearray()
    _encode_into(out, obj)
    return bytes(out)


def _encode_into(out: bytearray, obj) -> None:
    if obj is None:
        out.append(0x6E)  # 'n'
    elif obj is True:
        out.append(0x74)  # 't'
    elif obj is False:
        out.append(0x66)  # 'f'
    elif isinstance(obj, int):
        out.append(0x69)  # 'i'
        _write_varint(out, (obj << 1) if obj >= 0 else (((-obj) << 1) - 1))
    elif isinstance(obj, bytes):
        out.append(0x62)  # 'b'
        _write_varint(out, len(obj))
        out += obj
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out.append(0x73)  # 's'
        _write_varint(out, len(raw))
        out += raw
    elif isinstance(obj, (list, tuple)):
        out.append(0x6C)  # 'l'
        _write_varint(out, len(obj))
        for item in obj:
            _encode_into(out, item)
    elif isinstance(obj, dict):
        out.append(0x64)  # 'd'
        _write_varint(out, len(obj))
        for k in sorted(obj):
            _encode_into(out, k)
            _encode_into(out, obj[k])
    else:
        cls = type(obj)
        tid = _TID_BY_CLASS.get(cls)
        if tid is None:
            raise TypeError(f"unencodable object of type {cls.__name__}")
        flds = _FIELDS_BY_CLASS.get(cls)
        if flds is None:
            flds = tuple(f.name for f in fields(cls))
            _FIELDS_BY_CLASS[cls] = flds
        out.append(0x4F)  # 'O'
        _write_varint(out, tid)
        _write_varint(out, len(flds))
        for name in flds:
            _encode_into(out, getattr(obj, name))


def decode_obj(buf: bytes):
    obj, pos = _decode_from(buf, 0)
    if pos != len(buf):
        raise BadFrame("trailing bytes after object")
    return obj


def _decode_from(buf: bytes, pos: int):
    if pos >= len(buf):
        raise BadFrame("truncated object")
    tag = buf[pos]
    pos += 1
    if tag == 0x6E:
        return None, pos
    if tag == 0x74:
        return True, pos
    if tag == 0x66:
        return False, pos
    if tag == 0x69:
        raw, pos = _read_varint(buf, pos)
        return (raw >> 1) if not raw & 1 else -((raw + 1) >> 1), pos
    if tag == 0x62:
        n, pos = _read_varint(buf, pos)
        if pos + n > len(buf):
            raise BadFrame("truncated bytes")
        return bytes(buf[pos : pos + n]), pos + n
    if tag == 0x73:
        n, pos = _read_varint(buf, pos)
        if pos + n > len(buf):
            raise BadFrame("truncated str")
        return buf[pos : pos + n].decode("utf-8"), pos + n
    if tag == 0x6C:
        n, pos = _read_varint(buf, pos)
        items = []
        for _ in range(n):
            item, pos = _decode_from(buf, pos)
            items.append(item)
        return items, pos
    if tag == 0x64:
        n, pos = _read_varint(buf, pos)
        d = {}
        for _ in range(n):
            k, pos = _decode_from(buf, pos)
            v, pos = _decode_from(buf, pos)
            d[k] = v
        return d, pos
    if tag == 0x4F:
        tid, pos = _read_varint(buf, pos)
        nfields, pos = _read_varint(buf, pos)
        cls = _REGISTRY_BY_TID.get(tid)
        if cls is None:
            raise BadFrame(f"unknown payload tid {tid}")
        args = []
        for _ in range(nfields):
            arg, pos = _decode_from(buf, pos)
            args.append(arg)
        return cls(*args), pos
    raise BadFrame(f"unknown tag 0x{tag:02x}")


# -- frame codec -------------------------------------------------------------


def encode_frame(msg: Message) -> bytes:
    body = encode_obj([msg.src, msg.req_id, msg.body])
    head = _HEADER.pack(MAGIC, int(msg.msg_type), msg.group_id, msg.term, len(body))
    crc = zlib.crc32(head)
    crc = zlib.crc32(body, crc)
    return head + body + _CRC.pack(crc)


def decode_frame(raw: bytes, dst: str = "") -> Message:
    if len(raw) < _HEADER.size + _CRC.size:
        raise BadFrame("frame too short")
    magic, msg_type, group_id, term, plen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadFrame("bad magic")
    end = _HEADER.size + plen
    if len(raw) != end + _CRC.size:
        raise BadFrame("frame length mismatch")
    (crc,) = _CRC.unpack_from(raw, end)
    if zlib.crc32(raw[:end]) != crc:
        raise BadFrame("frame checksum mismatch")
    envelope = decode_obj(raw[_HEADER.size : end])
    if not isinstance(envelope, list) or len(envelope) != 3:
        raise BadFrame("bad envelope")
    src, req_id, body = envelope
    return Message(MsgType(msg_type), src, dst, group_id, term, req_id, body)


def reroute(msg: Message) -> Message:
    """Round-trip a message through the byte frame (fidelity checking)."""
    return decode_frame(encode_frame(msg), msg.dst)


payload(1)(Resp)
