"""Reference decoder written from the byte layout alone.

Deliberately shares nothing with ``streambridge.protocol``: integers via
``int.from_bytes`` and floats one at a time via ``struct``. Returns plain
tuples so comparisons do not depend on the package's message classes.
"""

import struct


def _u(buf, pos, n):
    return int.from_bytes(buf[pos:pos + n], "big"), pos + n


def _s(buf, pos):
    n, pos = _u(buf, pos, 2)
    return buf[pos:pos + n].decode("utf-8"), pos + n


def _floats_bits(buf, pos, count):
    # little-endian u64 bit patterns, so NaN payloads compare exactly
    out = []
    for _ in range(count):
        out.append(int.from_bytes(buf[pos:pos + 8], "little"))
        pos += 8
    return tuple(out), pos


def ref_decode(frame: bytes):
    length = int.from_bytes(frame[:4], "big")
    assert len(frame) == 4 + length, "frame length mismatch"
    t = frame[4]
    body = frame[5:]
    pos = 0
    if t == 0x01:
        name, pos = _s(body, pos)
        rank, pos = _u(body, pos, 4)
        gid, pos = _u(body, pos, 4)
        count, pos = _u(body, pos, 4)
        out = ("REGISTER", name, rank, gid, count)
    elif t == 0x02:
        step, pos = _u(body, pos, 8)
        count, pos = _u(body, pos, 4)
        bits, pos = _floats_bits(body, pos, count)
        out = ("APPEND", step, bits)
    elif t == 0x03:
        out = ("FINALIZE",)
    elif t == 0x10:
        status, pos = _u(body, pos, 1)
        detail, pos = _s(body, pos)
        out = ("ACK", status, detail)
    elif t == 0x20:
        out = ("LIST_STREAMS",)
    elif t == 0x21:
        count, pos = _u(body, pos, 4)
        keys = []
        for _ in range(count):
            k, pos = _s(body, pos)
            keys.append(k)
        out = ("STREAM_LIST", tuple(keys))
    elif t == 0x22:
        key, pos = _s(body, pos)
        after, pos = _u(body, pos, 8)
        mx, pos = _u(body, pos, 4)
        out = ("READ_SINCE", key, after, mx)
    elif t == 0x23:
        count, pos = _u(body, pos, 4)
        recs = []
        for _ in range(count):
            step, pos = _u(body, pos, 8)
            produced, pos = _u(body, pos, 8)
            n, pos = _u(body, pos, 4)
            bits, pos = _floats_bits(body, pos, n)
            recs.append((step, produced, bits))
        out = ("RECORD_BATCH", tuple(recs))
    else:
        raise ValueError(f"unknown type {t:#x}")
    assert pos == len(body), "trailing bytes"
    return out


def bits_of(values):
    return tuple(struct.unpack("<Q", struct.pack("<d", v))[0] for v in values)


def as_tuple(msg):
    """Package message -> the reference decoder's tuple form."""
    from streambridge import protocol as P

    if isinstance(msg, P.Register):
        return ("REGISTER", msg.field_name, msg.rank, msg.group_id, msg.element_count)
    if isinstance(msg, P.Append):
        return ("APPEND", msg.step, tuple(int(b) for b in msg.values.view("<u8")))
    if isinstance(msg, P.Finalize):
        return ("FINALIZE",)
    if isinstance(msg, P.Ack):
        return ("ACK", 0 if msg.ok else 1, msg.detail)
    if isinstance(msg, P.ListStreams):
        return ("LIST_STREAMS",)
    if isinstance(msg, P.StreamList):
        return ("STREAM_LIST", tuple(msg.keys))
    if isinstance(msg, P.ReadSince):
        return ("READ_SINCE", msg.stream_key, msg.after_step, msg.max_records)
    if isinstance(msg, P.RecordBatch):
        return ("RECORD_BATCH", tuple(
            (r.step, r.produced_at_ns, tuple(int(b) for b in r.values.view("<u8")))
            for r in msg.records
        ))
    raise TypeError(msg)
