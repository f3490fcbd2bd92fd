"""Steps-to-go inference server over a frozen Stage 1 checkpoint."""
from __future__ import annotations

import logging

import numpy as np

from ..errors import StgError
from ..selfimprove import RewardSource
from .wire import MessageServer, error

log = logging.getLogger(__name__)


class RewardServer(MessageServer):
    """Stateless per request; the network is only ever read."""

    def __init__(self, host: str, port: int, source: RewardSource):
        super().__init__(host, port)
        self.source = source
        self.hash_at_start = source.param_hash()
        self.queries = 0

    def on_StepsToGoQuery(self, msg, conn):
        hs = self.source.net.head_spec
        try:
            obs = np.asarray(msg["obs"], dtype=np.float64)
            goal = np.asarray(msg["goal"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            return error("malformed", f"bad query: {exc}")
        batch = bool(msg.get("batch", False))
        want = 2 if batch else 1
        if obs.ndim != want or obs.shape[-1] != hs.obs_dim or goal.shape != (hs.goal_dim,):
            return error("malformed", f"expected obs of rank {want} with width {hs.obs_dim} and goal of width {hs.goal_dim}")
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(goal))):
            return error("malformed", "non-finite observation or goal")
        try:
            probs = self.source.probs(obs, goal)
            d = self.source.d_values(obs, goal) if batch else self.source.d_value(obs, goal)
        except StgError as exc:
            return error("numeric", str(exc))
        self.queries += 1
        success = (np.asarray(d) <= self.source.s).tolist()
        d_out = np.asarray(d).tolist()
        return {"type": "StepsToGoReply", "probs": probs.tolist(), "d": d_out, "success": success, "s": self.source.s}

    def on_Status(self, msg, conn):
        return {"type": "StatusReply", "role": "reward_server", "param_hash": self.source.param_hash(),
                "hash_at_start": self.hash_at_start, "queries": self.queries, "s": self.source.s}


def run_reward_server(host: str, port: int, ckpt, success_threshold=None, success_bonus: float = 0.0, ready=None) -> dict:
    source = RewardSource.from_checkpoint(ckpt, success_threshold, success_bonus)
    server = RewardServer(host, port, source)
    if ready is not None:
        ready(server.port)
    try:
        server.serve_forever(poll_interval=0.05)
    finally:
        server.server_close()
    return {"hash_at_start": server.hash_at_start, "hash_at_end": source.param_hash(), "queries": server.queries}
