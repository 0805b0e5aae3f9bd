"""Length-prefixed binary framing used between brokers, endpoints and the engine.

Every frame is ``length:u32be | msg_type:u8 | body`` where ``length`` counts
the type byte plus the body. Header integers are big-endian; bulk float
payloads are little-endian IEEE-754 doubles. See ``docs/protocol.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

import numpy as np

DEFAULT_MAX_FRAME = 16 * 1024 * 1024

_U8 = struct.Struct("!B")
_U16 = struct.Struct("!H")
_U32 = struct.Struct("!I")
_U64 = struct.Struct("!Q")
_REGISTER_TAIL = struct.Struct("!III")
_APPEND_HEAD = struct.Struct("!QI")
_READ_TAIL = struct.Struct("!QI")
_RECORD_HEAD = struct.Struct("!QQI")

_F64LE = np.dtype("<f8")


class ProtocolError(Exception):
    pass


class FrameTooLarge(ProtocolError):
    pass


class MsgType(IntEnum):
    REGISTER = 0x01
    APPEND = 0x02
    FINALIZE = 0x03
    ACK = 0x10
    LIST_STREAMS = 0x20
    STREAM_LIST = 0x21
    READ_SINCE = 0x22
    RECORD_BATCH = 0x23


def _f64(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64).reshape(-1)


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class Register:
    field_name: str
    rank: int
    group_id: int
    element_count: int


@dataclass(frozen=True, eq=False)
class Append:
    step: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _f64(self.values))

    def __eq__(self, other):
        if not isinstance(other, Append):
            return NotImplemented
        return self.step == other.step and _same_bits(self.values, other.values)


@dataclass(frozen=True)
class Finalize:
    pass


@dataclass(frozen=True)
class Ack:
    ok: bool = True
    detail: str = ""


@dataclass(frozen=True)
class ListStreams:
    pass


@dataclass(frozen=True)
class StreamList:
    keys: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))


@dataclass(frozen=True)
class ReadSince:
    stream_key: str
    after_step: int
    max_records: int


@dataclass(frozen=True, eq=False)
class WireRecord:
    step: int
    produced_at_ns: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _f64(self.values))

    def __eq__(self, other):
        if not isinstance(other, WireRecord):
            return NotImplemented
        return (
            self.step == other.step
            and self.produced_at_ns == other.produced_at_ns
            and _same_bits(self.values, other.values)
        )


@dataclass(frozen=True)
class RecordBatch:
    records: tuple[WireRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))


Message = Union[
    Register, Append, Finalize, Ack, ListStreams, StreamList, ReadSince, RecordBatch
]


class _NeedMoreData:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NEED_MORE_DATA"

    def __bool__(self):
        return False


NEED_MORE_DATA = _NeedMoreData()


# -- encoding ---------------------------------------------------------------


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError(f"string of {len(raw)} bytes exceeds 65535")
    return _U16.pack(len(raw)) + raw


def _pack_values(values: np.ndarray) -> bytes:
    return values.astype(_F64LE, copy=False).tobytes()


def _check_uint(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise ProtocolError(f"{name}={value} does not fit in u{bits}")


def _encode_body(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, Register):
        for name in ("rank", "group_id", "element_count"):
            _check_uint(name, getattr(msg, name), 32)
        return MsgType.REGISTER, _pack_str(msg.field_name) + _REGISTER_TAIL.pack(
            msg.rank, msg.group_id, msg.element_count
        )
    if isinstance(msg, Append):
        _check_uint("step", msg.step, 64)
        _check_uint("count", msg.values.size, 32)
        return MsgType.APPEND, _APPEND_HEAD.pack(msg.step, msg.values.size) + _pack_values(
            msg.values
        )
    if isinstance(msg, Finalize):
        return MsgType.FINALIZE, b""
    if isinstance(msg, Ack):
        return MsgType.ACK, _U8.pack(0 if msg.ok else 1) + _pack_str(msg.detail)
    if isinstance(msg, ListStreams):
        return MsgType.LIST_STREAMS, b""
    if isinstance(msg, StreamList):
        _check_uint("count", len(msg.keys), 32)
        return MsgType.STREAM_LIST, _U32.pack(len(msg.keys)) + b"".join(
            _pack_str(k) for k in msg.keys
        )
    if isinstance(msg, ReadSince):
        _check_uint("after_step", msg.after_step, 64)
        _check_uint("max_records", msg.max_records, 32)
        return MsgType.READ_SINCE, _pack_str(msg.stream_key) + _READ_TAIL.pack(
            msg.after_step, msg.max_records
        )
    if isinstance(msg, RecordBatch):
        _check_uint("count", len(msg.records), 32)
        parts = [_U32.pack(len(msg.records))]
        for rec in msg.records:
            _check_uint("step", rec.step, 64)
            _check_uint("produced_at_ns", rec.produced_at_ns, 64)
            parts.append(_RECORD_HEAD.pack(rec.step, rec.produced_at_ns, rec.values.size))
            parts.append(_pack_values(rec.values))
        return MsgType.RECORD_BATCH, b"".join(parts)
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode_frame(msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    msg_type, body = _encode_body(msg)
    length = 1 + len(body)
    if length > max_frame:
        raise FrameTooLarge(f"frame of {length} bytes exceeds cap {max_frame}")
    return _U32.pack(length) + _U8.pack(msg_type) + body


# -- decoding ---------------------------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: memoryview, start: int, end: int):
        self.buf = buf
        self.pos = start
        self.end = end

    def take(self, n: int) -> memoryview:
        if self.pos + n > self.end:
            raise ProtocolError("truncated body")
        view = self.buf[self.pos : self.pos + n]
        self.pos += n
        return view

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack(_U16)
        try:
            return str(self.take(n), "utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("invalid UTF-8 string") from exc

    def values(self, count: int) -> np.ndarray:
        if count * 8 > self.end - self.pos:
            raise ProtocolError(f"declared {count} values exceed body")
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype=_F64LE).astype(np.float64)

    def done(self) -> None:
        if self.pos != self.end:
            raise ProtocolError(f"{self.end - self.pos} trailing bytes in body")


def _decode_body(msg_type: int, r: _Reader) -> Message:
    if msg_type == MsgType.REGISTER:
        name = r.string()
        rank, group_id, count = r.unpack(_REGISTER_TAIL)
        msg = Register(name, rank, group_id, count)
    elif msg_type == MsgType.APPEND:
        step, count = r.unpack(_APPEND_HEAD)
        msg = Append(step, r.values(count))
    elif msg_type == MsgType.FINALIZE:
        msg = Finalize()
    elif msg_type == MsgType.ACK:
        (status,) = r.unpack(_U8)
        if status > 1:
            raise ProtocolError(f"bad ACK status {status}")
        msg = Ack(status == 0, r.string())
    elif msg_type == MsgType.LIST_STREAMS:
        msg = ListStreams()
    elif msg_type == MsgType.STREAM_LIST:
        (count,) = r.unpack(_U32)
        if count * 2 > r.end - r.pos:
            raise ProtocolError(f"declared {count} keys exceed body")
        msg = StreamList(tuple(r.string() for _ in range(count)))
    elif msg_type == MsgType.READ_SINCE:
        key = r.string()
        after, max_records = r.unpack(_READ_TAIL)
        msg = ReadSince(key, after, max_records)
    elif msg_type == MsgType.RECORD_BATCH:
        (count,) = r.unpack(_U32)
        if count * _RECORD_HEAD.size > r.end - r.pos:
            raise ProtocolError(f"declared {count} records exceed body")
        records = []
        for _ in range(count):
            step, produced, n = r.unpack(_RECORD_HEAD)
            records.append(WireRecord(step, produced, r.values(n)))
        msg = RecordBatch(tuple(records))
    else:
        raise ProtocolError(f"unknown message type 0x{msg_type:02X}")
    r.done()
    return msg


def decode_frame(buffer, max_frame: int = DEFAULT_MAX_FRAME):
    """Decode one frame from the front of ``buffer``.

    Returns ``(message, bytes_consumed)``, or ``NEED_MORE_DATA`` when the
    buffer does not yet hold a complete frame.
    """
    view = memoryview(buffer).cast("B")
    if len(view) < 4:
        return NEED_MORE_DATA
    (length,) = _U32.unpack(view[:4])
    if length == 0:
        raise ProtocolError("zero-length frame has no type byte")
    if length > max_frame:
        raise ProtocolError(f"frame length {length} exceeds cap {max_frame}")
    # the type byte is checked early so garbage is rejected before its body arrives
    if len(view) >= 5 and view[4] not in _KNOWN_TYPES:
        raise ProtocolError(f"unknown message type 0x{view[4]:02X}")
    total = 4 + length
    if len(view) < total:
        return NEED_MORE_DATA
    msg = _decode_body(view[4], _Reader(view, 5, total))
    return msg, total


_KNOWN_TYPES = frozenset(int(t) for t in MsgType)


class FrameDecoder:
    """Incremental decoder owned by a single connection."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        pos = 0
        view = memoryview(self._buf)
        try:
            while True:
                res = decode_frame(view[pos:], self.max_frame)
                if res is NEED_MORE_DATA:
                    break
                msg, used = res
                out.append(msg)
                pos += used
        finally:
            view.release()
        if pos:
            del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def recv_message(sock, decoder: FrameDecoder, backlog: list) -> Message | None:
    """Blocking helper: return the next message from ``sock`` or None on EOF."""
    while not backlog:
        chunk = sock.recv(1 << 16)
        if not chunk:
            return None
        backlog.extend(decoder.feed(chunk))
    return backlog.pop(0)
