"""Replay-buffer server: episode-atomic appends while collecting, sampling while learning.

Every AppendItems and SampleBatch carries the sender's phase epoch; a
mismatch with the server's epoch, or the wrong phase, is rejected.  Accepted
operations are logged so phase safety can be audited afterwards.
"""
from __future__ import annotations

import json
import logging
import threading

from ..errors import DataError
from ..selfimprove import ReplayBuffer, ReplayItem, phase_rng
from .wire import MessageServer, error

log = logging.getLogger(__name__)

COLLECTING, LEARNING = "collecting", "learning"


class ReplayServer(MessageServer):
    def __init__(self, host: str, port: int, seed: int, audit_path=None):
        super().__init__(host, port)
        self.seed = seed
        self.buffer = ReplayBuffer()
        self.phase = COLLECTING
        self.epoch = 0
        self.learning_index = 0
        self.lock = threading.Lock()  # the single logical writer
        self.ops: list[dict] = []
        self.rejections = 0
        self.episodes: set = set()
        self.consumed_per_phase: list[list[int]] = []
        self.audit_path = audit_path

    def _reject(self, code: str, detail: str) -> dict:
        self.rejections += 1
        return error(code, detail)

    def on_AppendItems(self, msg, conn):
        try:
            items = [ReplayItem.from_json(d) for d in msg.get("items", [])]
        except (KeyError, TypeError, ValueError, DataError) as exc:
            return self._reject("malformed", f"bad replay item: {exc}")
        with self.lock:
            if self.phase != COLLECTING or msg.get("epoch") != self.epoch:
                return self._reject("phase", f"append with epoch {msg.get('epoch')} during {self.phase} epoch {self.epoch}")
            key = msg.get("episode_id")
            if key is not None:
                key = json.dumps(key)
                if key in self.episodes:
                    return {"type": "BufferSizeReply", "n": len(self.buffer), "phase": self.phase,
                            "epoch": self.epoch, "duplicate": True}
                self.episodes.add(key)
            n = self.buffer.append_episode(items)
            self.ops.append({"op": "append", "epoch": self.epoch, "phase": self.phase, "n": len(items)})
            return {"type": "BufferSizeReply", "n": n, "phase": self.phase, "epoch": self.epoch}

    def on_BufferSize(self, msg, conn):
        with self.lock:
            return {"type": "BufferSizeReply", "n": len(self.buffer), "phase": self.phase, "epoch": self.epoch}

    def on_SampleBatch(self, msg, conn):
        b = msg.get("b")
        if not isinstance(b, int) or b < 1:
            return self._reject("malformed", "SampleBatch needs a positive integer b")
        if msg.get("without_replacement", True) is not True:
            return self._reject("unsupported", "only without-replacement sampling is served")
        with self.lock:
            if self.phase != LEARNING or msg.get("epoch") != self.epoch:
                return self._reject("phase", f"sample with epoch {msg.get('epoch')} during {self.phase} epoch {self.epoch}")
            try:
                ids, items = self.buffer.sample_batch(b)
            except DataError as exc:
                return self._reject("too_large", str(exc))
            self.ops.append({"op": "sample", "epoch": self.epoch, "phase": self.phase, "n": b})
            return {"type": "BatchReply", "ids": ids, "items": [i.to_json() for i in items]}

    def on_Clear(self, msg, conn):
        with self.lock:
            if self.buffer.in_phase:
                self.consumed_per_phase.append(list(self.buffer.consumed))
            self.buffer.clear()
            self.ops.append({"op": "clear", "epoch": self.epoch, "phase": self.phase, "n": 0})
            return {"type": "BufferSizeReply", "n": 0, "phase": self.phase, "epoch": self.epoch}

    def on_PhaseChange(self, msg, conn):
        phase, epoch = msg.get("phase"), msg.get("epoch")
        if phase not in (COLLECTING, LEARNING) or not isinstance(epoch, int):
            return error("malformed", "PhaseChange needs phase and integer epoch")
        with self.lock:
            if epoch <= self.epoch and not (epoch == self.epoch == 0):
                return error("phase", f"epoch {epoch} does not advance past {self.epoch}")
            self.phase, self.epoch = phase, epoch
            if phase == LEARNING:
                self.learning_index += 1
                self.buffer.start_phase(phase_rng(self.seed, self.learning_index))
            elif self.buffer.in_phase:
                # learner never cleared; drop the phase state so appends work again
                self.consumed_per_phase.append(list(self.buffer.consumed))
                self.buffer.clear()
            self.ops.append({"op": "phase", "epoch": epoch, "phase": phase, "n": len(self.buffer)})
        return {"type": "Ack", "epoch": epoch}

    def audit(self) -> dict:
        with self.lock:
            return audit_ops(self.ops, self.consumed_per_phase, self.rejections)

    def on_Status(self, msg, conn):
        with self.lock:
            status = {"phase": self.phase, "epoch": self.epoch, "n": len(self.buffer)}
        return {"type": "StatusReply", "role": "replay_server", **status, "audit": self.audit()}

    def write_audit(self) -> None:
        if self.audit_path:
            with open(self.audit_path, "w") as fh:
                json.dump(self.audit(), fh, indent=2, sort_keys=True)


def audit_ops(ops: list[dict], consumed: list[list[int]], rejections: int = 0) -> dict:
    """Count phase-safety violations in the accepted-operation log.

    An append is a violation if accepted outside ``collecting``; a sample if
    accepted outside ``learning`` or at an epoch older than an accepted append.
    """
    violations = 0
    last_append_epoch = -1
    for op in ops:
        if op["op"] == "append":
            violations += op["phase"] != COLLECTING
            last_append_epoch = max(last_append_epoch, op["epoch"])
        elif op["op"] == "sample":
            violations += op["phase"] != LEARNING or op["epoch"] < last_append_epoch
    repeats = sum(len(c) - len(set(c)) for c in consumed)
    return {
        "violations": int(violations),
        "rejections": rejections,
        "phases": len(consumed),
        "consumed_per_phase": [len(c) for c in consumed],
        "repeats": repeats,
    }


def run_replay_server(host: str, port: int, seed: int, audit_path=None, ready=None) -> dict:
    server = ReplayServer(host, port, seed, audit_path)
    if ready is not None:
        ready(server.port)
    try:
        server.serve_forever(poll_interval=0.05)
    finally:
        server.server_close()
        server.write_audit()
    return server.audit()
