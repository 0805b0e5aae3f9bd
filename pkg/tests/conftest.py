import socket
import struct
import threading

import pytest

from streambridge.core import EndpointAddress
from streambridge.endpoint import serve


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def endpoint():
    server = serve(EndpointAddress("127.0.0.1", free_port()), retention=4096)
    yield server
    server.shutdown()


@pytest.fixture
def two_endpoints():
    servers = [serve(EndpointAddress("127.0.0.1", free_port())) for _ in range(2)]
    yield servers
    for s in servers:
        s.shutdown()


def _read_exact(conn, n):
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class StalledEndpoint:
    """Accepts one broker, ACKs its REGISTER, then stops reading until resumed.

    The receive buffer is shrunk so a large APPEND cannot be absorbed by the
    kernel while paused. After ``resume()`` it reads frames until FINALIZE and
    ACKs that.
    """

    def __init__(self):
        self.sock = socket.socket()
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.address = EndpointAddress("127.0.0.1", self.sock.getsockname()[1])
        self.resumed = threading.Event()
        self.frames = []
        self.conn = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _frame(self, conn):
        head = _read_exact(conn, 4)
        if head is None:
            return None
        (length,) = struct.unpack("!I", head)
        return _read_exact(conn, length)

    def _run(self):
        conn, _ = self.sock.accept()
        self.conn = conn
        body = self._frame(conn)
        assert body[0] == 0x01
        conn.sendall(b"\x00\x00\x00\x04\x10\x00\x00\x00")
        self.resumed.wait()
        while True:
            try:
                body = self._frame(conn)
            except OSError:
                return
            if body is None:
                return
            self.frames.append(body[0])
            if body[0] == 0x03:
                detail = b"finalized"
                payload = b"\x10\x00" + len(detail).to_bytes(2, "big") + detail
                conn.sendall(len(payload).to_bytes(4, "big") + payload)
                return

    def resume(self):
        self.resumed.set()

    def close(self):
        self.resumed.set()
        for s in (self.conn, self.sock):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


@pytest.fixture
def stalled_endpoint():
    ep = StalledEndpoint()
    yield ep
    ep.close()


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
