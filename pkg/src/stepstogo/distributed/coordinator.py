"""Coordinator: registers nodes, watches the buffer size, and drives phase transitions."""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..errors import ProtocolError
from ..selfimprove import SelfImproveConfig, plateaued
from .common import Client
from .wire import MessageServer, error

log = logging.getLogger(__name__)


@dataclass
class Node:
    role: str
    name: str
    host: str
    port: int
    client: Client
    alive: bool = True
    info: dict = field(default_factory=dict)


class Coordinator(MessageServer):
    def __init__(self, host: str, port: int, si: SelfImproveConfig, dist, replay: tuple, reward: tuple,
                 summary_path=None, health=None):
        super().__init__(host, port)
        self.health = health  # optional callable raising when a supervised process died
        self.si, self.dist = si, dist
        self.replay = Client(*replay, request_timeout=dist.phase_timeout)
        self.reward = Client(*reward, request_timeout=dist.phase_timeout)
        self.nodes: dict[str, Node] = {}
        self.lock = threading.Lock()
        self.phase, self.epoch = "collecting", 0
        self.weights_version = 0
        self.weights_blob: str | None = None
        self.buffer_size = 0
        self.summary_path = summary_path
        self.iterations: list[dict] = []
        self.eval_history: list[float] = []
        self.forwarded_aborts = 0
        self.done = threading.Event()

    # -- messages
    def on_Hello(self, msg, conn):
        role, name = msg.get("role"), msg.get("name")
        if role not in ("actor", "learner") or not isinstance(name, str):
            return error("malformed", "Hello needs role actor|learner and a name")
        client = Client(msg.get("host", "127.0.0.1"), int(msg["port"]), request_timeout=self.dist.phase_timeout)
        with self.lock:
            node = Node(role, name, client.host, client.port, client)
            if role == "learner":
                self.weights_blob = msg.get("blob_b64")
                self.weights_version = int(msg.get("version", 0))
                if msg.get("eval_success") is not None:
                    self.eval_history.append(float(msg["eval_success"]))
            self.nodes[name] = node
        log.info("registered %s %s at %s:%d", role, name, client.host, client.port)
        return {"type": "Ack"}

    def on_Status(self, msg, conn):
        with self.lock:
            nodes = [{"name": n.name, "role": n.role, "alive": n.alive} for n in self.nodes.values()]
            return {"type": "StatusReply", "role": "coordinator", "phase": self.phase, "epoch": self.epoch,
                    "buffer_size": self.buffer_size, "weights_version": self.weights_version, "nodes": nodes,
                    "iterations": len(self.iterations), "done": self.done.is_set()}

    def on_OperatorAbort(self, msg, conn):
        target = msg.get("actor")
        with self.lock:
            node = self.nodes.get(target) or self.nodes.get(f"actor-{target}")
        if node is None or node.role != "actor":
            return error("unknown_node", f"no actor named {target!r}")
        reply = node.client.request({"type": "OperatorAbort", "actor": node.name})
        self.forwarded_aborts += reply.get("type") == "Ack"
        return reply

    # -- orchestration helpers
    def actors(self) -> list[Node]:
        with self.lock:
            return [n for n in self.nodes.values() if n.role == "actor" and n.alive]

    def learner(self) -> Node | None:
        with self.lock:
            return next((n for n in self.nodes.values() if n.role == "learner" and n.alive), None)

    def _send(self, node: Node, msg: dict) -> dict | None:
        try:
            reply = node.client.request(msg)
        except ConnectionError as exc:
            log.error("node %s unresponsive, marking dead: %s", node.name, exc)
            node.alive = False
            return None
        if reply.get("type") == "Error":
            log.error("node %s replied %s: %s", node.name, reply.get("code"), reply.get("detail"))
        return reply

    def _broadcast(self, nodes: list[Node], msg: dict) -> list[dict | None]:
        if not nodes:
            return []
        with ThreadPoolExecutor(max_workers=len(nodes)) as pool:
            return list(pool.map(lambda n: self._send(n, msg), nodes))

    def _wait_registration(self) -> None:
        deadline = time.monotonic() + self.dist.phase_timeout
        while True:
            with self.lock:
                n_act = sum(n.role == "actor" for n in self.nodes.values())
                has_learner = any(n.role == "learner" for n in self.nodes.values())
            if n_act >= self.dist.n_actors and has_learner:
                return
            if self.health is not None:
                self.health()
            if time.monotonic() > deadline:
                raise TimeoutError(f"only {n_act} actors and learner={has_learner} registered")
            time.sleep(self.dist.poll_interval)

    def _forward_weights(self) -> None:
        if self.dist.topology == "v2" and self.weights_blob is not None:
            self._broadcast(self.actors(), {"type": "WeightsUpdate", "version": self.weights_version,
                                            "blob_b64": self.weights_blob})

    def _set_phase(self, phase: str) -> None:
        with self.lock:
            self.epoch += 1
            self.phase = phase

    def run(self) -> dict:
        need = self.si.n_updates * self.si.batch_size
        self._wait_registration()
        reward_hash_before = self.reward.request({"type": "Status"}, "StatusReply")["param_hash"]
        self._forward_weights()
        self._broadcast(self.actors(), {"type": "PhaseChange", "phase": "collecting", "epoch": 0})
        stop_reason = "max_iterations"
        for it in range(1, self.si.max_iterations + 1):
            t0 = time.monotonic()
            while True:
                n = self.replay.request({"type": "BufferSize"}, "BufferSizeReply")["n"]
                self.buffer_size = n
                if n >= need:
                    break
                if not self.actors():
                    raise RuntimeError("no live actors left")
                if self.health is not None:
                    self.health()
                time.sleep(self.dist.poll_interval)
            collect_s = time.monotonic() - t0
            self._set_phase("learning")
            msg = {"type": "PhaseChange", "phase": "learning", "epoch": self.epoch}
            acks = self._broadcast(self.actors(), msg)
            paused = sum(1 for a in acks if a and a.get("type") == "Ack")
            self.replay.request(msg, "Ack")
            learner = self.learner()
            if learner is None:
                raise RuntimeError("learner is gone")
            reply = self._send(learner, msg)
            if reply is None or reply.get("type") != "Ack":
                raise RuntimeError(f"learning phase failed: {reply}")
            self.weights_version = reply["version"]
            self.weights_blob = reply["blob_b64"]
            self._forward_weights()
            rec = {"iteration": it, "epoch": self.epoch, "buffer_size": n, "actors_paused": paused,
                   "weights_version": self.weights_version, "status": reply.get("status"),
                   "param_hash": reply.get("param_hash"), "collect_seconds": collect_s}
            if "eval_success" in reply:
                rec["eval_success"] = reply["eval_success"]
                self.eval_history.append(reply["eval_success"])
            self._set_phase("collecting")
            msg = {"type": "PhaseChange", "phase": "collecting", "epoch": self.epoch}
            self.replay.request(msg, "Ack")
            self._send(learner, msg)
            self._broadcast(self.actors(), msg)
            self.iterations.append(rec)
            log.info("iteration %d: %s", it, rec)
            if "eval_success" in rec and plateaued(self.eval_history, self.si.plateau_window, self.si.plateau_tol):
                stop_reason = "plateau"
                break
        return self._finish(reward_hash_before, stop_reason)

    def _finish(self, reward_hash_before: str, stop_reason: str) -> dict:
        # pause actors so the final statuses are stable
        self._set_phase("learning")
        self._broadcast(self.actors(), {"type": "PhaseChange", "phase": "learning", "epoch": self.epoch})
        replay_status = self.replay.request({"type": "Status"}, "StatusReply")
        reward_hash_after = self.reward.request({"type": "Status"}, "StatusReply")["param_hash"]
        with self.lock:
            nodes = list(self.nodes.values())
        statuses = {n.name: self._send(n, {"type": "Status"}) for n in nodes if n.alive}
        summary = {
            "iterations": self.iterations,
            "stop_reason": stop_reason,
            "final_epoch": self.epoch,
            "eval_history": self.eval_history,
            "reward_hash_before": reward_hash_before,
            "reward_hash_after": reward_hash_after,
            "replay_audit": replay_status["audit"],
            "nodes": {k: v for k, v in statuses.items()},
            "dead_nodes": [n.name for n in nodes if not n.alive],
            "forwarded_aborts": self.forwarded_aborts,
        }
        if self.summary_path:
            with open(self.summary_path, "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
        return summary

    def shutdown_all(self) -> None:
        with self.lock:
            nodes = list(self.nodes.values())
        for n in nodes:
            try:
                n.client.request({"type": "Shutdown"})
            except (ConnectionError, ProtocolError):
                pass
            n.client.close()
        for c in (self.replay, self.reward):
            try:
                c.request({"type": "Shutdown"})
            except (ConnectionError, ProtocolError):
                pass
            c.close()


def run_coordinator(host: str, port: int, si: SelfImproveConfig, dist, replay: tuple, reward: tuple,
                    summary_path=None, ready=None, health=None) -> dict:
    coord = Coordinator(host, port, si, dist, replay, reward, summary_path, health)
    coord.serve_in_thread()
    if ready is not None:
        ready(coord.port)
    try:
        summary = coord.run()
    finally:
        coord.done.set()
        coord.shutdown_all()
        coord.shutdown()
        coord.server_close()
    return summary
