"""Simulation-side broker client.

A process registers one field with the endpoint assigned to its rank group,
then hands per-step snapshots to :meth:`BrokerContext.write`, which copies
them into a bounded queue drained by a background sender thread. APPEND
frames are not acknowledged individually; only REGISTER and FINALIZE wait
for an ACK.
"""

from __future__ import annotations

import enum
import logging
import os
import socket
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import protocol as P
from .core import (
    EndpointAddress,
    FieldDescriptor,
    InvalidArgument,
    assign_group,
    parse_endpoint_list,
)

log = logging.getLogger(__name__)

ENDPOINTS_ENV = "BROKER_ENDPOINTS"


class BrokerError(Exception):
    pass


class BrokerInitError(BrokerError):
    def __init__(self, address: EndpointAddress, reason):
        super().__init__(f"cannot connect to endpoint {address}: {reason}")
        self.address = address


class RegistrationError(BrokerError):
    def __init__(self, detail: str):
        super().__init__(f"endpoint rejected registration: {detail}")
        self.detail = detail


class OutOfOrderStep(BrokerError, ValueError):
    pass


class BrokenPipe(BrokerError):
    pass


class FinalizeError(BrokerError):
    def __init__(self, message: str, stats: "BrokerStats"):
        super().__init__(message)
        self.stats = stats


class Backpressure(str, enum.Enum):
    BLOCK = "block"
    DROP_NEWEST = "drop-newest"


class WriteOutcome(enum.Enum):
    QUEUED = "queued"
    DROPPED = "dropped"


@dataclass
class BrokerConfig:
    endpoints: list[EndpointAddress]
    queue_capacity: int = 64
    backpressure: Backpressure = Backpressure.BLOCK
    connect_timeout: float = 5.0
    write_timeout: float = 10.0
    max_frame: int = P.DEFAULT_MAX_FRAME

    def __post_init__(self):
        self.endpoints = list(self.endpoints)
        self.backpressure = Backpressure(self.backpressure)
        if not self.endpoints:
            raise InvalidArgument("broker needs at least one endpoint")
        if self.queue_capacity < 1:
            raise InvalidArgument("queue_capacity must be >= 1")
        if self.connect_timeout <= 0 or self.write_timeout <= 0:
            raise InvalidArgument("timeouts must be positive")

    def with_env_overrides(self, environ=None) -> "BrokerConfig":
        environ = os.environ if environ is None else environ
        text = environ.get(ENDPOINTS_ENV, "").strip()
        if not text:
            return self
        return BrokerConfig(**{**self.__dict__, "endpoints": parse_endpoint_list(text)})


@dataclass(frozen=True)
class BrokerStats:
    stream_key: str
    records_queued: int
    records_sent: int
    records_dropped: int
    records_in_flight: int
    bytes_sent: int
    append_errors: int
    wall_time_s: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Counters:
    queued: int = 0  # every accepted write call, including those dropped
    sent: int = 0
    dropped: int = 0
    bytes_sent: int = 0
    append_errors: int = 0


class BrokerContext:
    """Live connection for one (field, rank). Single owner: one simulation thread."""

    def __init__(self, config: BrokerConfig, descriptor: FieldDescriptor, group_id: int,
                 sock: socket.socket):
        self.config = config
        self.descriptor = descriptor
        self.group_id = group_id
        self.endpoint = config.endpoints[group_id]
        self.last_step = 0
        self.last_produced_at = 0
        self.counters = _Counters()
        self._sock = sock
        self._queue: deque[tuple[int, np.ndarray]] = deque()
        self._busy = 0  # record taken by the sender but not yet fully written
        self._cond = threading.Condition()
        self._closing = False
        self._failure: BaseException | None = None
        self._stats: BrokerStats | None = None
        self._started = time.monotonic()
        self._sender = threading.Thread(
            target=self._send_loop, name=f"broker-{descriptor.stream_key}", daemon=True
        )
        self._sender.start()

    @property
    def stream_key(self) -> str:
        return self.descriptor.stream_key

    # -- simulation side ----------------------------------------------------

    def write(self, step: int, data) -> WriteOutcome:
        if self._stats is not None:
            raise BrokenPipe("broker context already finalized")
        if step <= self.last_step:
            raise OutOfOrderStep(f"step {step} is not after last step {self.last_step}")
        payload = np.array(data, dtype=np.float64, copy=True).reshape(-1)
        if payload.size != self.descriptor.element_count:
            raise InvalidArgument(
                f"expected {self.descriptor.element_count} values, got {payload.size}"
            )
        cap = self.config.queue_capacity
        with self._cond:
            if self._failure is not None:
                raise BrokenPipe(f"sender failed: {self._failure}") from self._failure
            if len(self._queue) + self._busy >= cap:
                if self.config.backpressure is Backpressure.DROP_NEWEST:
                    self.counters.queued += 1
                    self.counters.dropped += 1
                    self.last_step = step
                    return WriteOutcome.DROPPED
                while len(self._queue) + self._busy >= cap and self._failure is None:
                    self._cond.wait()
                if self._failure is not None:
                    raise BrokenPipe(f"sender failed: {self._failure}") from self._failure
            self.last_produced_at = time.monotonic_ns()
            self._queue.append((step, payload))
            self.counters.queued += 1
            self.last_step = step
            self._cond.notify_all()
        return WriteOutcome.QUEUED

    # -- background sender --------------------------------------------------

    def _send_loop(self):
        self._sock.settimeout(self.config.write_timeout)
        while True:
            with self._cond:
                while not self._queue and not self._closing:
                    self._cond.wait()
                if not self._queue:
                    return
                step, payload = self._queue.popleft()
                self._busy = 1
            try:
                frame = P.encode_frame(P.Append(step, payload), self.config.max_frame)
                self._sock.sendall(frame)
            except (OSError, P.ProtocolError) as exc:
                with self._cond:
                    self._busy = 0
                    self._failure = exc
                    self._cond.notify_all()
                log.warning("%s: sender stopped: %s", self.stream_key, exc)
                return
            with self._cond:
                self._busy = 0
                self.counters.sent += 1
                self.counters.bytes_sent += len(frame)
                self._cond.notify_all()

    # -- shutdown -----------------------------------------------------------

    def _snapshot(self) -> BrokerStats:
        c = self.counters
        return BrokerStats(
            stream_key=self.stream_key,
            records_queued=c.queued,
            records_sent=c.sent,
            records_dropped=c.dropped,
            records_in_flight=c.queued - c.sent - c.dropped,
            bytes_sent=c.bytes_sent,
            append_errors=c.append_errors,
            wall_time_s=time.monotonic() - self._started,
        )

    def finalize(self) -> BrokerStats:
        """Flush the queue, send FINALIZE, close. Idempotent."""
        if self._stats is not None:
            return self._stats
        deadline = time.monotonic() + self.config.write_timeout
        with self._cond:
            self._closing = True
            self._cond.notify_all()
            while (self._queue or self._busy) and self._failure is None:
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self._cond.wait(left)
            drained = not self._queue and not self._busy and self._failure is None
        if not drained:
            return self._fail_finalize(
                f"flush of {self.stream_key} did not complete within "
                f"{self.config.write_timeout}s"
                + (f" ({self._failure})" if self._failure else "")
            )
        self._sender.join()
        try:
            self._sock.settimeout(max(0.1, deadline - time.monotonic()))
            self._sock.sendall(P.encode_frame(P.Finalize()))
            self._await_finalize_ack()
        except (OSError, P.ProtocolError, BrokerError) as exc:
            return self._fail_finalize(f"finalize handshake failed: {exc}")
        self._close_socket()
        self._stats = self._snapshot()
        return self._stats

    def _await_finalize_ack(self):
        decoder, backlog = P.FrameDecoder(), []
        while True:
            msg = P.recv_message(self._sock, decoder, backlog)
            if msg is None:
                raise BrokenPipe("endpoint closed before acknowledging FINALIZE")
            if isinstance(msg, P.Ack) and msg.ok and msg.detail == "finalized":
                return
            if isinstance(msg, P.Ack) and not msg.ok:
                # rejected APPENDs are reported asynchronously
                self.counters.append_errors += 1
                log.warning("%s: endpoint error: %s", self.stream_key, msg.detail)

    def _fail_finalize(self, message: str):
        self._close_socket()
        with self._cond:
            self._closing = True
            self._cond.notify_all()
        self._stats = self._snapshot()
        raise FinalizeError(message, self._stats)

    def _close_socket(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def broker_init(config: BrokerConfig, field_name: str, rank: int, world_size: int,
                element_count: int) -> BrokerContext:
    """Connect this rank to its group's endpoint and register the field."""
    descriptor = FieldDescriptor(field_name, rank, world_size, element_count)
    if len(config.endpoints) > world_size:
        raise InvalidArgument(
            f"{len(config.endpoints)} endpoints for only {world_size} ranks"
        )
    group_id = assign_group(rank, world_size, len(config.endpoints))
    address = config.endpoints[group_id]
    try:
        sock = socket.create_connection((address.host, address.port), config.connect_timeout)
    except OSError as exc:
        raise BrokerInitError(address, exc) from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        sock.settimeout(config.connect_timeout)
        sock.sendall(P.encode_frame(P.Register(field_name, rank, group_id, element_count)))
        reply = P.recv_message(sock, P.FrameDecoder(), [])
    except (OSError, P.ProtocolError) as exc:
        sock.close()
        raise BrokerInitError(address, exc) from exc
    if not isinstance(reply, P.Ack):
        sock.close()
        raise BrokerInitError(address, f"unexpected reply {reply!r}")
    if not reply.ok:
        sock.close()
        raise RegistrationError(reply.detail)
    return BrokerContext(config, descriptor, group_id, sock)


def broker_write(ctx: BrokerContext, step: int, data) -> WriteOutcome:
    return ctx.write(step, data)


def broker_finalize(ctx: BrokerContext) -> BrokerStats:
    return ctx.finalize()
