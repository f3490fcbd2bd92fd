"""Length-prefixed JSON messages over TCP.

Frame: 4-byte big-endian payload length, then a UTF-8 JSON object with a
``type`` field.  Payloads are capped at 64 MiB.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
from typing import Callable

from ..errors import ProtocolError

log = logging.getLogger(__name__)

MAX_PAYLOAD = 64 * 1024 * 1024

MESSAGE_TYPES = frozenset(
    {
        "Hello", "Status", "StatusReply", "PhaseChange", "Ack", "SampleAction", "ActionReply",
        "StepsToGoQuery", "StepsToGoReply", "AppendItems", "BufferSize", "BufferSizeReply",
        "SampleBatch", "BatchReply", "Clear", "WeightsUpdate", "OperatorAbort", "Error", "Shutdown",
    }
)


def encode(msg: dict) -> bytes:
    payload = json.dumps(msg, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the 64 MiB limit")
    return struct.pack(">I", len(payload)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def decode_payload(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed JSON payload: {exc}") from exc
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise ProtocolError("message must be an object with a string 'type'")
    return msg


class FrameTooLarge(ProtocolError):
    pass


def recv_frame(sock: socket.socket) -> bytes | None:
    """One raw payload, or None on a clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_PAYLOAD:
        raise FrameTooLarge(f"announced payload of {n} bytes exceeds the limit")
    payload = _recv_exact(sock, n)
    if payload is None:
        raise ConnectionError("connection closed mid-frame")
    return payload


def send_msg(sock: socket.socket, msg: dict) -> None:
    sock.sendall(encode(msg))


def recv_msg(sock: socket.socket) -> dict | None:
    payload = recv_frame(sock)
    return None if payload is None else decode_payload(payload)


def error(code: str, detail: str) -> dict:
    return {"type": "Error", "code": code, "detail": detail}


class Connection:
    """Client side of a connection; ``request`` pairs a send with its reply."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        self._req_lock = threading.Lock()

    def send(self, msg: dict) -> None:
        with self._send_lock:
            send_msg(self.sock, msg)

    def recv(self) -> dict | None:
        return recv_msg(self.sock)

    def request(self, msg: dict) -> dict:
        with self._req_lock:
            self.send(msg)
            reply = self.recv()
        if reply is None:
            raise ConnectionError("peer closed the connection")
        return reply

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int, timeout: float = 30.0, base_delay: float = 0.02, max_delay: float = 1.0) -> Connection:
    """Connect with exponential backoff until ``timeout`` seconds have passed."""
    deadline = time.monotonic() + timeout
    delay = base_delay
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Connection(sock)
        except OSError:
            if time.monotonic() + delay > deadline:
                raise
            time.sleep(delay)
            delay = min(delay * 2, max_delay)


def check_reply(reply: dict, expected: str) -> dict:
    if reply.get("type") == "Error":
        raise ProtocolError(f"{reply.get('code')}: {reply.get('detail')}")
    if reply.get("type") != expected:
        raise ProtocolError(f"expected {expected}, got {reply.get('type')}")
    return reply


class _Handler(socketserver.BaseRequestHandler):
    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = Connection(self.request)

    def handle(self):
        server: MessageServer = self.server  # type: ignore[assignment]
        while not server.stopping.is_set():
            try:
                payload = recv_frame(self.request)
            except FrameTooLarge as exc:
                self.conn.send(error("too_large", str(exc)))
                return
            except (ConnectionError, OSError):
                break
            if payload is None:
                break
            try:
                msg = decode_payload(payload)
                if msg["type"] not in MESSAGE_TYPES:
                    raise ProtocolError(f"unknown message type {msg['type']!r}")
                reply = server.dispatch(msg, self.conn)
            except ProtocolError as exc:
                reply = error("protocol", str(exc))
            except Exception as exc:  # noqa: BLE001 - reported to the peer, connection kept
                log.exception("handler failure")
                reply = error("internal", f"{type(exc).__name__}: {exc}")
            if reply is not None:
                try:
                    self.conn.send(reply)
                except OSError:
                    break
        server.on_disconnect(self.conn)


class MessageServer(socketserver.ThreadingTCPServer):
    """Thread-per-connection server dispatching on the ``type`` field.

    Subclasses define ``on_<Type>(msg, conn)`` methods returning a reply dict
    (or None for no reply).
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str, port: int):
        super().__init__((host, port), _Handler)
        self.stopping = threading.Event()

    @property
    def port(self) -> int:
        return self.server_address[1]

    def dispatch(self, msg: dict, conn: Connection) -> dict | None:
        fn: Callable | None = getattr(self, f"on_{msg['type']}", None)
        if fn is None:
            return error("unsupported", f"{type(self).__name__} does not handle {msg['type']}")
        return fn(msg, conn)

    def on_disconnect(self, conn: Connection) -> None:
        pass

    def on_Shutdown(self, msg, conn):
        self.stopping.set()
        threading.Thread(target=self.shutdown, daemon=True).start()
        return {"type": "Ack"}

    def serve_in_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        t.start()
        return t
