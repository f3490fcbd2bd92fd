"""Actor: collects episodes with the current policy and ships them to the replay server.

Topology v1 asks the learner for every action; v2 acts with the most recent
WeightsUpdate.  The success detector runs either in lockstep (synchronous
mode) or on a background thread that checks the latest observation, so
termination may lag the first detectable success by a step or two.
"""
from __future__ import annotations

import logging
import threading
import time

import numpy as np

from ..dataset import ActionBinning
from ..envs import EnvConfig, make_env
from ..errors import DataError, ProtocolError
from ..policy import act
from ..selfimprove import SelfImproveConfig, collect_episode, episode_seed
from .common import Client, JsonlSink, hello, weights_from_blob
from .wire import MessageServer, error

log = logging.getLogger(__name__)


class Interrupted(Exception):
    """The in-flight episode is abandoned (phase change or lost connection)."""


class AsyncSuccessCheck:
    """Background detector that always checks the most recent observation it was given."""

    def __init__(self, reward: Client):
        self.reward = reward
        self._cv = threading.Condition()
        self._pending = None  # (t, obs, goal)
        self._result = None  # (t, success)
        self._closed = False
        self.failure: Exception | None = None
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while True:
            with self._cv:
                while self._pending is None and not self._closed:
                    self._cv.wait()
                if self._closed:
                    return
                t, obs, goal = self._pending
                self._pending = None
            try:
                reply = self.reward.request({"type": "StepsToGoQuery", "obs": obs.tolist(), "goal": goal.tolist()},
                                            "StepsToGoReply")
            except (ConnectionError, ProtocolError) as exc:
                self.failure = exc
                continue
            with self._cv:
                if self._result is None or t > self._result[0]:
                    self._result = (t, bool(reply["success"]))

    def __call__(self, obs, goal, t):
        if self.failure is not None:
            raise Interrupted(f"reward server lost: {self.failure}")
        with self._cv:
            self._pending = (t, np.asarray(obs), np.asarray(goal))
            self._cv.notify()
            return self._result is not None and self._result[1]

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify()


class ActorNode(MessageServer):
    """Control endpoint (driven by the coordinator) plus the collection loop."""

    def __init__(self, host: str, index: int, env_cfg: EnvConfig, si: SelfImproveConfig, dist, replay: Client,
                 reward: Client, learner: Client | None, metrics_path=None, config_hash: str = ""):
        super().__init__(host, 0)
        self.index = index
        self.name = f"actor-{index}"
        self.env_cfg, self.si, self.dist = env_cfg, si, dist
        self.replay, self.reward, self.learner = replay, reward, learner
        self.env = make_env(env_cfg, terminate_on_success=False)
        self.sink = JsonlSink(metrics_path)
        self.config_hash = config_hash
        self.cv = threading.Condition()
        self.phase, self.epoch = "learning", -1  # idle until the first PhaseChange(collecting)
        self.busy = False
        self.pending_weights = None  # (version, net, ab)
        self.weights = None
        self.abort_requested = False
        self.episode_index = 0
        self.stats = {"episodes": 0, "discarded": 0, "aborted": 0, "rejected_appends": 0, "steps": 0,
                      "max_lag": 0, "reconnects": 0}
        self.need = si.n_updates * si.batch_size
        self.sync_done_epoch = None
        self.s: float | None = None

    # -- control messages
    def on_PhaseChange(self, msg, conn):
        phase, epoch = msg.get("phase"), msg.get("epoch")
        if phase not in ("collecting", "learning") or not isinstance(epoch, int):
            return error("malformed", "PhaseChange needs phase and integer epoch")
        with self.cv:
            if epoch <= self.epoch:
                return error("phase", f"stale epoch {epoch}")
            self.phase, self.epoch = phase, epoch
            self.cv.notify_all()
            if phase == "learning":
                deadline = time.monotonic() + self.dist.phase_timeout
                while self.busy:
                    if not self.cv.wait(timeout=max(0.0, deadline - time.monotonic())):
                        return error("timeout", "episode did not finish before the phase timeout")
        return {"type": "Ack", "epoch": epoch}

    def on_WeightsUpdate(self, msg, conn):
        try:
            version = int(msg["version"])
            net, meta = weights_from_blob(msg["blob_b64"])
            ab = ActionBinning(**meta["action_binning"])
        except (KeyError, TypeError, ValueError) as exc:
            return error("malformed", f"bad weights package: {exc}")
        with self.cv:
            current = self.pending_weights or self.weights
            if current is not None and version <= current[0]:
                return error("stale", f"weights version {version} is not newer than {current[0]}")
            self.pending_weights = (version, net, ab)
            self.cv.notify_all()
        return {"type": "Ack", "version": version}

    def on_OperatorAbort(self, msg, conn):
        with self.cv:
            self.abort_requested = True
        return {"type": "Ack"}

    def on_Shutdown(self, msg, conn):
        with self.cv:
            self.cv.notify_all()
        return super().on_Shutdown(msg, conn)

    def on_Status(self, msg, conn):
        with self.cv:
            return {"type": "StatusReply", "role": "actor", "name": self.name, "phase": self.phase, "epoch": self.epoch,
                    "weights_version": self.weights[0] if self.weights else None, **self.stats}

    # -- collection
    def _ready_to_collect(self) -> bool:
        if self.phase != "collecting" or self.sync_done_epoch == self.epoch:
            return False
        return self.dist.topology == "v1" or self.weights is not None or self.pending_weights is not None

    def _policy_fn(self, weights):
        step_time = self.dist.step_time

        def remote(obs, goal, u):
            if step_time:
                time.sleep(step_time)
            reply = self._call(self.learner, {"type": "SampleAction", "obs": obs.tolist(), "goal": goal.tolist(),
                                              "u": u.tolist()}, "ActionReply")
            return np.asarray(reply["action"], dtype=np.float64)

        def local(obs, goal, u):
            if step_time:
                time.sleep(step_time)
            return act(weights[1], weights[2], obs, goal, u)[0]

        return remote if self.dist.topology == "v1" else local

    def _call(self, client: Client, msg: dict, expected: str) -> dict:
        try:
            return client.request(msg, expected)
        except ConnectionError as exc:
            self.stats["reconnects"] += 1
            raise Interrupted(str(exc)) from exc
        except ProtocolError as exc:
            raise Interrupted(str(exc)) from exc

    def _abort_hook(self, epoch: int):
        def hook():
            with self.cv:
                if self.phase != "collecting" or self.epoch != epoch:
                    if self.dist.in_flight == "discard":
                        raise Interrupted("phase changed mid-episode")
                if self.abort_requested:
                    self.abort_requested = False
                    return True
            return False

        return hook

    def run_episode(self, epoch: int) -> None:
        with self.cv:
            if self.pending_weights is not None:
                self.weights, self.pending_weights = self.pending_weights, None
            weights = self.weights
        version = weights[0] if weights else None
        dims = self.env.action_dim
        seed = episode_seed(self.si.seed, self.index, self.episode_index)
        self.episode_index += 1
        policy_fn = self._policy_fn(weights)
        checker = None
        if self.dist.synchronous or not self.dist.async_success_check:
            def success_fn(obs, goal, t):
                return bool(self._call(self.reward, {"type": "StepsToGoQuery", "obs": obs.tolist(),
                                                     "goal": goal.tolist()}, "StepsToGoReply")["success"])
        else:
            checker = success_fn = AsyncSuccessCheck(Client(self.reward.host, self.reward.port))

        def label_fn(observations, goal):
            reply = self._call(self.reward, {"type": "StepsToGoQuery", "obs": observations.tolist(),
                                             "goal": goal.tolist(), "batch": True}, "StepsToGoReply")
            return np.asarray(reply["d"], dtype=np.float64)

        try:
            if self.s is None:
                self.s = float(self._call(self.reward, {"type": "Status"}, "StatusReply")["s"])
            s = self.s
            out = collect_episode(self.env, seed, dims, policy_fn, success_fn, label_fn, self.si, s,
                                  self._abort_hook(epoch))
        except (Interrupted, DataError) as exc:
            self.stats["discarded"] += 1
            log.info("%s discarded episode %d: %s", self.name, self.episode_index - 1, exc)
            return
        finally:
            if checker is not None:
                checker.close()
                checker.reward.close()
        hit = np.flatnonzero(out.d_values <= s)
        lag = int(out.record.length - hit[0]) if len(hit) and out.record.reason == "detector_success" else None
        if lag is not None:
            self.stats["max_lag"] = max(self.stats["max_lag"], lag)
        self.stats["episodes"] += 1
        self.stats["steps"] += out.record.length
        self.stats["aborted"] += out.record.reason == "operator_abort"
        appended = None
        try:
            reply = self._call(self.replay, {"type": "AppendItems", "episode_id": [self.index, self.episode_index - 1],
                                             "epoch": epoch, "items": [i.to_json() for i in out.items]},
                               "BufferSizeReply")
            appended = reply["n"]
        except Interrupted as exc:
            self.stats["rejected_appends"] += 1
            log.info("%s append rejected: %s", self.name, exc)
        self.sink.write({"actor": self.index, "episode": self.episode_index - 1, "seed": seed, "epoch": epoch,
                         "weights_version": version, "length": out.record.length, "reason": out.record.reason,
                         "gt_success": out.gt_success, "lag": lag, "buffer": appended,
                         "config_hash": self.config_hash})
        if self.dist.synchronous and appended is not None and appended >= self.need:
            self.sync_done_epoch = epoch

    def collect_forever(self) -> None:
        while not self.stopping.is_set():
            with self.cv:
                while not self._ready_to_collect() and not self.stopping.is_set():
                    self.cv.wait(timeout=0.1)
                if self.stopping.is_set():
                    break
                self.busy = True
                epoch = self.epoch
            try:
                self.run_episode(epoch)
            finally:
                with self.cv:
                    self.busy = False
                    self.cv.notify_all()


def run_actor(host: str, index: int, coordinator: tuple, replay: tuple, reward: tuple, learner: tuple | None,
              env_cfg: EnvConfig, si: SelfImproveConfig, dist, metrics_path=None, config_hash: str = "",
              ready=None) -> dict:
    node = ActorNode(host, index, env_cfg, si, dist, Client(*replay), Client(*reward),
                     Client(*learner) if learner else None, metrics_path, config_hash)
    node.serve_in_thread()
    if ready is not None:
        ready(node.port)
    coord = Client(*coordinator)
    hello(coord, "actor", node.name, host, node.port, index=index)
    coord.close()
    node.collect_forever()
    node.server_close()
    node.sink.close()
    return dict(node.stats)
