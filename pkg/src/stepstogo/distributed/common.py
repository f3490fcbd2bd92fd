"""Helpers shared by the roles: weight blobs, reconnecting clients, JSONL sinks."""
from __future__ import annotations

import base64
import json
import logging
import threading
import time

from ..errors import ProtocolError
from ..nnet import DenseNet, checkpoint_bytes, checkpoint_from_bytes
from .wire import Connection, check_reply, connect

log = logging.getLogger(__name__)

ROLES = ("coordinator", "replay_server", "reward_server", "action_server", "actor", "learner")


def weights_blob(net: DenseNet, metadata: dict) -> str:
    return base64.b64encode(checkpoint_bytes(net, metadata)).decode("ascii")


def weights_from_blob(blob: str) -> tuple[DenseNet, dict]:
    try:
        raw = base64.b64decode(blob.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ProtocolError(f"weights blob is not valid base64: {exc}") from exc
    return checkpoint_from_bytes(raw)


class Client:
    """A connection to a fixed endpoint that reconnects with backoff after failures.

    ``request`` raises ``ConnectionError`` when the link drops mid-request; the
    next call reconnects.  ``reconnects`` counts how often that happened.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0, request_timeout: float | None = None):
        self.host, self.port = host, port
        self.timeout = timeout
        self.request_timeout = request_timeout
        self._conn: Connection | None = None
        self._lock = threading.Lock()
        self.reconnects = 0

    def _ensure(self) -> Connection:
        if self._conn is None:
            self._conn = connect(self.host, self.port, timeout=self.timeout)
            self._conn.sock.settimeout(self.request_timeout)
        return self._conn

    def request(self, msg: dict, expected: str | None = None) -> dict:
        with self._lock:
            conn = self._ensure()
            try:
                reply = conn.request(msg)
            except (OSError, ConnectionError) as exc:
                conn.close()
                self._conn = None
                self.reconnects += 1
                raise ConnectionError(f"{self.host}:{self.port}: {exc}") from exc
        return check_reply(reply, expected) if expected else reply

    def close(self) -> None:
        with self._lock:
            if self._conn is not None:
                self._conn.close()
                self._conn = None


class JsonlSink:
    def __init__(self, path):
        self._fh = open(path, "w") if path else None
        self._lock = threading.Lock()

    def write(self, rec: dict) -> None:
        if self._fh is None:
            return
        with self._lock:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def hello(coordinator: Client, role: str, name: str, host: str, port: int, **extra) -> dict:
    return coordinator.request({"type": "Hello", "role": role, "name": name, "host": host, "port": port, **extra}, "Ack")


def wait_until(pred, timeout: float, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > deadline:
            return False
        time.sleep(interval)
    return True
