"""Learner: REINFORCE updates from replay batches; in topology v1 it also serves actions."""
from __future__ import annotations

import logging
import math
import threading
import time

import numpy as np

from ..dataset import ActionBinning
from ..errors import NumericError, ProtocolError
from ..nnet import AdamWState, load_checkpoint, snapshot32
from ..policy import act
from ..rng import derive_seed
from ..selfimprove import ReplayItem, SelfImproveConfig, reinforce_update
from ..envs import EnvConfig
from .common import Client, JsonlSink, hello, weights_blob
from .wire import MessageServer, error

log = logging.getLogger(__name__)


class LearnerServer(MessageServer):
    def __init__(self, host: str, port: int, policy_ckpt, si: SelfImproveConfig, env_cfg: EnvConfig,
                 replay: Client, topology: str = "v2", metrics_path=None, config_hash: str = ""):
        super().__init__(host, port)
        self.policy, meta = load_checkpoint(policy_ckpt)
        self.meta = {k: v for k, v in meta.items() if k != "architecture"}
        self.ab = ActionBinning(**meta["action_binning"])
        self.si = si
        self.env_cfg = env_cfg
        self.opt = AdamWState.for_params(self.policy.params(), lr=si.lr, weight_decay=si.weight_decay)
        self.replay = replay
        self.topology = topology
        self.version = 0
        self.acting = snapshot32(self.policy)
        self.phase, self.epoch = "collecting", 0
        self.phases = 0
        self.sink = JsonlSink(metrics_path)
        self.config_hash = config_hash
        self.param_hashes: list[str] = []
        self.evals: list[dict] = []
        self._state_lock = threading.Lock()
        if si.eval_every > 0:
            self._evaluate()

    def _evaluate(self) -> float:
        from ..sft import evaluate_policy

        res = evaluate_policy(self.acting, self.ab, self.env_cfg, self.si.eval_episodes,
                              derive_seed(self.si.seed, "stage2.eval"), greedy=self.si.eval_greedy)
        rec = {"version": self.version, "phase": self.phases, "eval_success": res.success_rate,
               "eval_mean_length": res.mean_length}
        self.evals.append(rec)
        self.sink.write({"event": "eval", **rec, "config_hash": self.config_hash})
        return res.success_rate

    def blob(self) -> str:
        return weights_blob(self.acting, {**self.meta, "weights_version": self.version})

    def on_SampleAction(self, msg, conn):
        if self.topology != "v1":
            return error("unsupported", "this learner does not serve actions (topology v2)")
        with self._state_lock:
            if self.phase != "collecting":
                return error("phase", "action inference is paused while learning")
            net, version = self.acting, self.version
        try:
            obs = np.asarray(msg["obs"], dtype=np.float64)
            goal = np.asarray(msg["goal"], dtype=np.float64)
            u = msg.get("u")
            u = None if u is None else np.asarray(u, dtype=np.float64)
            a, idx = act(net, self.ab, obs, goal, u)
        except (KeyError, TypeError, ValueError) as exc:
            return error("malformed", f"bad SampleAction: {exc}")
        return {"type": "ActionReply", "action": a.tolist(), "version": version}

    def on_PhaseChange(self, msg, conn):
        phase, epoch = msg.get("phase"), msg.get("epoch")
        if phase == "collecting":
            with self._state_lock:
                self.phase, self.epoch = phase, epoch
            return {"type": "Ack", "epoch": epoch}
        if phase != "learning":
            return error("malformed", f"unknown phase {phase!r}")
        with self._state_lock:
            self.phase, self.epoch = phase, epoch
        return self._learn(epoch)

    def _learn(self, epoch: int) -> dict:
        t0 = time.monotonic()
        saved = [p.copy() for p in self.policy.params()]
        saved_opt = self.opt.copy()
        status, detail, losses, ids = "ok", "", [], []
        try:
            for _ in range(self.si.n_updates):
                reply = self.replay.request({"type": "SampleBatch", "b": self.si.batch_size, "epoch": epoch,
                                             "without_replacement": True}, "BatchReply")
                items = [ReplayItem.from_json(d) for d in reply["items"]]
                ids.extend(reply["ids"])
                losses.append(reinforce_update(self.policy, self.opt, self.ab, items, self.si.c))
        except (NumericError, ProtocolError, ConnectionError) as exc:
            status, detail = ("nan" if isinstance(exc, NumericError) else "error"), str(exc)
            log.error("learning phase at epoch %d aborted: %s", epoch, exc)
            for p, s in zip(self.policy.params(), saved):
                p[...] = s
            self.opt = saved_opt
        try:
            self.replay.request({"type": "Clear", "epoch": epoch}, "BufferSizeReply")
        except (ProtocolError, ConnectionError) as exc:
            log.error("replay clear failed: %s", exc)
        self.phases += 1
        self.version += 1  # a failed phase republishes the previous weights under a new version
        self.acting = snapshot32(self.policy)
        h = self.policy.param_hash()
        self.param_hashes.append(h)
        rec = {"event": "phase", "phase": self.phases, "epoch": epoch, "version": self.version, "status": status,
               "reinforce_loss": float(np.mean(losses)) if losses else math.nan, "consumed": len(ids),
               "distinct": len(set(ids)), "param_hash": h, "seconds": time.monotonic() - t0,
               "config_hash": self.config_hash}
        self.sink.write(rec)
        reply = {"type": "Ack", "epoch": epoch, "version": self.version, "blob_b64": self.blob(), "status": status,
                 "param_hash": h}
        if status != "ok":
            reply["error"] = {"code": status, "detail": detail}
        if self.si.eval_every > 0 and self.phases % self.si.eval_every == 0:
            reply["eval_success"] = self._evaluate()
        return reply

    def on_Status(self, msg, conn):
        return {"type": "StatusReply", "role": "learner", "version": self.version, "phase": self.phase,
                "epoch": self.epoch, "param_hashes": self.param_hashes, "evals": self.evals}


def run_learner(host: str, port: int, coordinator: tuple, replay: tuple, policy_ckpt, si: SelfImproveConfig,
                env_cfg: EnvConfig, topology: str = "v2", metrics_path=None, config_hash: str = "",
                name: str = "learner", ready=None) -> dict:
    server = LearnerServer(host, port, policy_ckpt, si, env_cfg, Client(*replay), topology, metrics_path, config_hash)
    server.serve_in_thread()
    if ready is not None:
        ready(server.port)
    coord = Client(*coordinator)
    initial_eval = server.evals[0]["eval_success"] if server.evals else None
    hello(coord, "learner", name, host, server.port, version=0, blob_b64=server.blob(), eval_success=initial_eval)
    coord.close()
    server.stopping.wait()
    server.server_close()
    server.sink.close()
    return {"param_hashes": server.param_hashes, "evals": server.evals, "version": server.version}
