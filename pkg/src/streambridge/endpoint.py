"""In-memory stream endpoint: accepts broker connections and serves ranged reads."""

from __future__ import annotations

import csv
import logging
import socket
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import protocol as P
from .core import EndpointAddress, InvalidArgument, make_stream_key

log = logging.getLogger(__name__)

DEFAULT_RETENTION = 4096


class StreamNotFound(KeyError):
    pass


class AppendRejected(Exception):
    """Raised by the store; the message becomes the ACK detail."""


@dataclass
class _Stream:
    element_count: int
    steps: deque = field(default_factory=deque)
    records: deque = field(default_factory=deque)
    last_step: int = 0
    appended: int = 0
    bytes_in: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


class StreamStore:
    """Per-stream ordered record logs with bounded retention.

    Appends to one stream are serialized by that stream's lock; reads take
    the same short lock to snapshot a consistent slice. Step 0 is never
    stored: ``read_since(key, 0)`` reads from the beginning.
    """

    def __init__(self, retention: int = DEFAULT_RETENTION):
        if retention < 1:
            raise InvalidArgument("retention must be >= 1")
        self.retention = retention
        self._streams: dict[str, _Stream] = {}
        self._lock = threading.Lock()

    def register(self, stream_key: str, element_count: int) -> None:
        with self._lock:
            existing = self._streams.get(stream_key)
            if existing is None:
                self._streams[stream_key] = _Stream(element_count)
            elif existing.element_count != element_count:
                raise AppendRejected(
                    f"element-count-mismatch: {stream_key} registered with "
                    f"{existing.element_count}, got {element_count}"
                )

    def list_streams(self) -> list[str]:
        with self._lock:
            return sorted(self._streams)

    def _get(self, stream_key: str) -> _Stream:
        try:
            return self._streams[stream_key]
        except KeyError:
            raise StreamNotFound(stream_key) from None

    def append(self, stream_key: str, step: int, values: np.ndarray, produced_at: int | None = None):
        stream = self._get(stream_key)
        if values.size != stream.element_count:
            raise AppendRejected(
                f"bad-length: expected {stream.element_count} values, got {values.size}"
            )
        with stream.lock:
            if step <= stream.last_step:
                raise AppendRejected(f"out-of-order: step {step} after {stream.last_step}")
            if produced_at is None:
                produced_at = time.monotonic_ns()
            stream.steps.append(step)
            stream.records.append(P.WireRecord(step, produced_at, values))
            stream.last_step = step
            stream.appended += 1
            stream.bytes_in += values.size * 8
            while len(stream.records) > self.retention:
                stream.steps.popleft()
                stream.records.popleft()

    def read_since(self, stream_key: str, after_step: int, max_records: int):
        """Records with step > after_step, ascending, at most max_records.

        Returns ``(records, found)``; an unknown stream is not an error since
        streams register asynchronously.
        """
        stream = self._streams.get(stream_key)
        if stream is None:
            return [], False
        with stream.lock:
            steps = stream.steps
            # steps is sorted; bisect over the deque by index
            lo, hi = 0, len(steps)
            while lo < hi:
                mid = (lo + hi) // 2
                if steps[mid] <= after_step:
                    lo = mid + 1
                else:
                    hi = mid
            end = min(lo + max_records, len(steps))
            out = [stream.records[i] for i in range(lo, end)]
        return out, True

    def trim(self, stream_key: str, up_to_step: int) -> int:
        stream = self._get(stream_key)
        evicted = 0
        with stream.lock:
            while stream.steps and stream.steps[0] <= up_to_step:
                stream.steps.popleft()
                stream.records.popleft()
                evicted += 1
        return evicted

    def stats(self) -> dict[str, tuple[int, int, int]]:
        """stream_key -> (records appended, records retained, payload bytes in)."""
        with self._lock:
            items = list(self._streams.items())
        return {k: (s.appended, len(s.records), s.bytes_in) for k, s in sorted(items)}


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.request.settimeout(0.2)
        self.decoder = P.FrameDecoder(self.server.max_frame)
        self.stream_key: str | None = None

    def handle(self):
        sock = self.request
        while True:
            try:
                chunk = sock.recv(1 << 18)
            except socket.timeout:
                if self.server.stopping.is_set():
                    return
                continue
            except OSError:
                return
            if not chunk:
                return
            try:
                messages = self.decoder.feed(chunk)
            except P.ProtocolError as exc:
                log.warning("protocol error from %s: %s", self.client_address, exc)
                self._send(P.Ack(False, f"protocol-error: {exc}"))
                return
            for msg in messages:
                if not self._dispatch(msg):
                    return
            if self.server.past_drain_deadline():
                return

    def _send(self, msg):
        try:
            self.request.sendall(P.encode_frame(msg, self.server.max_frame))
        except OSError:
            pass

    def _dispatch(self, msg) -> bool:
        store = self.server.store
        if isinstance(msg, P.Append):
            if self.stream_key is None:
                self._send(P.Ack(False, "unregistered"))
                return True
            try:
                store.append(self.stream_key, msg.step, msg.values)
            except AppendRejected as exc:
                self._send(P.Ack(False, str(exc)))
        elif isinstance(msg, P.Register):
            try:
                key = make_stream_key(msg.field_name, msg.rank)
                store.register(key, msg.element_count)
            except (InvalidArgument, AppendRejected) as exc:
                self._send(P.Ack(False, f"register-failed: {exc}"))
                return True
            self.stream_key = key
            self._send(P.Ack(True, f"registered {key}"))
        elif isinstance(msg, P.ReadSince):
            records, found = store.read_since(msg.stream_key, msg.after_step, msg.max_records)
            if not found:
                self._send(P.Ack(False, f"not-found: {msg.stream_key}"))
            else:
                self._send(self._batch(records))
        elif isinstance(msg, P.ListStreams):
            self._send(P.StreamList(tuple(store.list_streams())))
        elif isinstance(msg, P.Finalize):
            self._send(P.Ack(True, "finalized"))
            return False
        else:
            self._send(P.Ack(False, f"unexpected {type(msg).__name__}"))
        return True

    def _batch(self, records):
        # keep replies under the frame cap; the reader pages past a short batch
        budget = self.server.max_frame - 64
        used = 4
        take = []
        for rec in records:
            used += 20 + rec.values.size * 8
            if take and used > budget:
                break
            take.append(rec)
        return P.RecordBatch(tuple(take))


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True
    drain_seconds = 2.0

    def __init__(self, addr, store: StreamStore, max_frame: int):
        self.store = store
        self.max_frame = max_frame
        self.stopping = threading.Event()
        self._stop_at = 0.0
        super().__init__(addr, _Handler)

    def begin_stop(self):
        self._stop_at = time.monotonic()
        self.stopping.set()

    def past_drain_deadline(self) -> bool:
        return self.stopping.is_set() and time.monotonic() - self._stop_at > self.drain_seconds


class EndpointServer:
    """Running endpoint handle returned by :func:`serve`."""

    def __init__(self, bind: EndpointAddress, retention: int = DEFAULT_RETENTION,
                 max_frame: int = P.DEFAULT_MAX_FRAME, stats_file: str | Path | None = None):
        self.store = StreamStore(retention)
        try:
            self._server = _TCPServer((bind.host, bind.port), self.store, max_frame)
        except OSError as exc:
            raise OSError(f"cannot bind endpoint {bind}: {exc}") from exc
        host, port = self._server.server_address[:2]
        self.address = EndpointAddress(host, port)
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
            name=f"endpoint-{port}", daemon=True,
        )
        self._stats = _StatsWriter(self.store, stats_file) if stats_file else None

    def start(self) -> "EndpointServer":
        self._thread.start()
        if self._stats:
            self._stats.start()
        return self

    def shutdown(self) -> None:
        """Stop accepting, let handlers drain what they already received, close."""
        self._server.begin_stop()
        self._server.shutdown()
        # joins handler threads; each exits at its next idle recv timeout
        self._server.server_close()
        if self._stats:
            self._stats.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(bind: EndpointAddress, retention: int = DEFAULT_RETENTION, **kwargs) -> EndpointServer:
    return EndpointServer(bind, retention, **kwargs).start()


class _StatsWriter:
    """Writes a per-stream CSV snapshot once per second (and once on stop)."""

    header = ["time_ns", "stream_key", "records_total", "records_retained",
              "records_per_s", "bytes_total"]

    def __init__(self, store: StreamStore, path, period: float = 1.0):
        self.store = store
        self.path = Path(path)
        self.period = period
        self._stop = threading.Event()
        self._last: dict[str, tuple[int, int]] = {}
        self._thread = threading.Thread(target=self._run, name="endpoint-stats", daemon=True)

    def start(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.header)
        self._thread.start()

    def stop(self):
        self._stop.set()
        self._thread.join()
        self.snapshot()

    def _run(self):
        while not self._stop.wait(self.period):
            self.snapshot()

    def snapshot(self):
        now = time.monotonic_ns()
        rows = []
        for key, (appended, retained, nbytes) in self.store.stats().items():
            prev_t, prev_n = self._last.get(key, (now, 0))
            dt = (now - prev_t) / 1e9
            rate = (appended - prev_n) / dt if dt > 0 else 0.0
            self._last[key] = (now, appended)
            rows.append([now, key, appended, retained, f"{rate:.3f}", nbytes])
        if rows:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerows(rows)


def read_final_stats(path) -> dict[str, dict]:
    """Last snapshot per stream from a stats CSV."""
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["stream_key"]] = {
                "records_total": int(row["records_total"]),
                "bytes_total": int(row["bytes_total"]),
            }
    return out


class EndpointClient:
    """Synchronous request/response client used by the stream engine."""

    def __init__(self, address: EndpointAddress, timeout: float = 10.0,
                 max_frame: int = P.DEFAULT_MAX_FRAME):
        self.address = address
        self.timeout = timeout
        self.max_frame = max_frame
        self._sock: socket.socket | None = None
        self._decoder = P.FrameDecoder(max_frame)
        self._backlog: list = []

    def connect(self) -> "EndpointClient":
        if self._sock is None:
            sock = socket.create_connection((self.address.host, self.address.port), self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            self._decoder = P.FrameDecoder(self.max_frame)
            self._backlog = []
        return self

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _call(self, msg):
        self.connect()
        try:
            self._sock.sendall(P.encode_frame(msg, self.max_frame))
            reply = P.recv_message(self._sock, self._decoder, self._backlog)
        except (OSError, P.ProtocolError):
            self.close()
            raise
        if reply is None:
            self.close()
            raise ConnectionError(f"endpoint {self.address} closed the connection")
        return reply

    def list_streams(self) -> list[str]:
        reply = self._call(P.ListStreams())
        if not isinstance(reply, P.StreamList):
            raise P.ProtocolError(f"expected STREAM_LIST, got {reply!r}")
        return list(reply.keys)

    def read_since(self, stream_key: str, after_step: int, max_records: int):
        reply = self._call(P.ReadSince(stream_key, after_step, max_records))
        if isinstance(reply, P.Ack) and not reply.ok and reply.detail.startswith("not-found"):
            return [], False
        if not isinstance(reply, P.RecordBatch):
            raise P.ProtocolError(f"expected RECORD_BATCH, got {reply!r}")
        return list(reply.records), True

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()
