"""Start a whole deployment on one host: one process per role, coordinator in the caller."""
from __future__ import annotations

import dataclasses
import logging
import multiprocessing as mp
import os
import socket
from pathlib import Path

from ..config import RunConfig, from_dict
from ..errors import ConfigError
from .common import Client
from .coordinator import run_coordinator

log = logging.getLogger(__name__)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _setup_logging():
    level = os.environ.get("STG_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(asctime)s %(processName)s %(name)s %(levelname)s %(message)s")


def run_role(role: str, cfg: RunConfig, index: int = 0, health=None) -> dict:
    """Run one non-coordinator role in the current process until shut down."""
    from .actor import run_actor
    from .learner import run_learner
    from .replay import run_replay_server
    from .reward import run_reward_server

    d = cfg.distributed
    host = d.host
    out = Path(d.out_dir) if d.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    coord, replay, reward, learner = (host, d.coordinator_port), (host, d.replay_port), (host, d.reward_port), (host, d.learner_port)
    si = cfg.selfimprove
    h = cfg.config_hash()
    if role == "replay":
        return run_replay_server(host, d.replay_port, si.seed, out / "replay_audit.json" if out else None)
    if role == "reward":
        if not d.reward_ckpt:
            raise ConfigError("distributed.reward_ckpt is required for the reward role")
        return run_reward_server(host, d.reward_port, d.reward_ckpt, si.success_threshold, si.success_bonus)
    if role == "learner":
        if not d.policy_ckpt:
            raise ConfigError("distributed.policy_ckpt is required for the learner role")
        return run_learner(host, d.learner_port, coord, replay, d.policy_ckpt, si, cfg.env, d.topology,
                           out / "learner_metrics.jsonl" if out else None, h)
    if role == "actor":
        return run_actor(host, index, coord, replay, reward, learner if d.topology == "v1" else None, cfg.env, si, d,
                         out / f"actor_{index}.jsonl" if out else None, h)
    if role == "coordinator":
        return run_coordinator(host, d.coordinator_port, si, d, replay, reward,
                               out / "coordinator.json" if out else None, health=health)
    raise ConfigError(f"unknown role {role!r}")


def _child(role: str, cfg_dict: dict, index: int) -> None:
    _setup_logging()
    run_role(role, from_dict(RunConfig, cfg_dict), index)


def launch_local(cfg: RunConfig, policy_ckpt=None, reward_ckpt=None, out_dir=None, *, timeout: float = 600.0, **overrides) -> dict:
    """Run a deployment with fresh local ports; returns the coordinator summary.

    ``overrides`` replace fields of the ``distributed`` section (topology,
    n_actors, synchronous, ...).
    """
    d = dataclasses.replace(cfg.distributed, **overrides)
    d = dataclasses.replace(
        d,
        coordinator_port=free_port(d.host), replay_port=free_port(d.host), reward_port=free_port(d.host),
        learner_port=free_port(d.host),
        policy_ckpt=str(policy_ckpt or d.policy_ckpt), reward_ckpt=str(reward_ckpt or d.reward_ckpt),
        out_dir=str(out_dir) if out_dir is not None else d.out_dir,
    )
    run_cfg = dataclasses.replace(cfg, distributed=d)
    cfg_dict = run_cfg.to_dict()
    ctx = mp.get_context("spawn")
    procs = [ctx.Process(target=_child, args=("replay", cfg_dict, 0), name="replay"),
             ctx.Process(target=_child, args=("reward", cfg_dict, 0), name="reward"),
             ctx.Process(target=_child, args=("learner", cfg_dict, 0), name="learner")]
    procs += [ctx.Process(target=_child, args=("actor", cfg_dict, i), name=f"actor-{i}") for i in range(d.n_actors)]
    for p in procs:
        p.daemon = True
        p.start()
    def health():
        dead = [p.name for p in procs if p.exitcode not in (None, 0)]
        if dead:
            raise RuntimeError(f"role process(es) exited early: {dead}")

    try:
        summary = run_role("coordinator", run_cfg, health=health)
    finally:
        for p in procs:
            p.join(timeout=30)
            if p.is_alive():
                log.error("process %s did not exit; terminating", p.name)
                p.terminate()
                p.join(timeout=5)
    summary["exit_codes"] = {p.name: p.exitcode for p in procs}
    return summary


def query_status(host: str, port: int) -> dict:
    c = Client(host, port, timeout=5.0)
    try:
        return c.request({"type": "Status"}, "StatusReply")
    finally:
        c.close()


def send_operator_abort(host: str, port: int, actor) -> dict:
    c = Client(host, port, timeout=5.0)
    try:
        return c.request({"type": "OperatorAbort", "actor": actor})
    finally:
        c.close()
