"""Two byte-frame transports behind one interface.

The in-process transport moves whole frames over queues; the TCP loopback
transport moves the same frames through real sockets with a length prefix
already embedded in the frame (the first four bytes of every encoded
message are its length field).  Both sides must behave identically, which
the acceptance suite checks by comparing full-run outputs byte for byte.
"""

from __future__ import annotations

import queue
import socket
import struct
from dataclasses import dataclass

from .errors import ClientFailure, TransportError

_TIMEOUT = 120.0


@dataclass
class _Abort:
    client_id: int
    error: BaseException


class InprocServerTransport:
    def __init__(self, client_ids: list[int]):
        self._ids = sorted(client_ids)
        self._to_client = {cid: queue.Queue() for cid in self._ids}
        self._to_server: queue.Queue = queue.Queue()

    def client_conn(self, client_id: int) -> "InprocClientConn":
        return InprocClientConn(client_id, self._to_client[client_id],
                                self._to_server)

    def broadcast(self, frame: bytes) -> None:
        for cid in self._ids:
            self._to_client[cid].put(frame)

    def gather(self) -> list[bytes]:
        frames = []
        for _ in self._ids:
            try:
                item = self._to_server.get(timeout=_TIMEOUT)
            except queue.Empty:
                raise TransportError("timed out waiting for client updates")
            if isinstance(item, _Abort):
                raise ClientFailure(
                    f"client {item.client_id} failed: {item.error!r}") from item.error
            frames.append(item)
        return frames

    def close(self) -> None:
        pass


class InprocClientConn:
    def __init__(self, client_id: int, inbox: queue.Queue, outbox: queue.Queue):
        self.client_id = client_id
        self._inbox = inbox
        self._outbox = outbox

    def recv(self) -> bytes:
        try:
            return self._inbox.get(timeout=_TIMEOUT)
        except queue.Empty:
            raise TransportError("timed out waiting for server frame")

    def send(self, frame: bytes) -> None:
        self._outbox.put(frame)

    def abort(self, error: BaseException) -> None:
        self._outbox.put(_Abort(self.client_id, error))

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        try:
            chunk = sock.recv(remaining)
        except OSError as e:
            raise TransportError(f"socket receive failed: {e}") from e
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", header)
    return header + _recv_exact(sock, length)


def _send_frame(sock: socket.socket, frame: bytes) -> None:
    try:
        sock.sendall(frame)
    except OSError as e:
        raise TransportError(f"socket send failed: {e}") from e


class TcpServerTransport:
    """Listens on a loopback port and accepts one connection per client."""

    def __init__(self, num_clients: int, port: int = 0):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", port))
        self._listener.listen(num_clients)
        self._listener.settimeout(_TIMEOUT)
        self._expected = num_clients
        self._conns: list[socket.socket] = []

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def accept_all(self) -> None:
        while len(self._conns) < self._expected:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                raise TransportError("timed out waiting for client connections")
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(_TIMEOUT)
            self._conns.append(conn)

    def broadcast(self, frame: bytes) -> None:
        for conn in self._conns:
            _send_frame(conn, frame)

    def gather(self) -> list[bytes]:
        return [_recv_frame(conn) for conn in self._conns]

    def close(self) -> None:
        for conn in self._conns:
            try:
                conn.close()
            except OSError:
                pass
        self._listener.close()


class TcpClientConn:
    def __init__(self, client_id: int, host: str, port: int):
        self.client_id = client_id
        self._sock = socket.create_connection((host, port), timeout=_TIMEOUT)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def recv(self) -> bytes:
        return _recv_frame(self._sock)

    def send(self, frame: bytes) -> None:
        _send_frame(self._sock, frame)

    def abort(self, error: BaseException) -> None:
        # closing mid-round surfaces as a TransportError on the server
        self.close()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
