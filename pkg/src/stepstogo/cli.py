"""Command-line driver: ``stg <command> ...`` (also ``python -m stepstogo``).

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
runtime failures.  ``STG_LOG`` (error|info|debug) sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config_file
from .dataset import (
    ActionBinning,
    Binning,
    default_binning,
    generate_demos,
    read_dataset,
    split,
    write_dataset,
)
from .errors import ConfigError, StgError
from .nnet import describe, file_hash, load_checkpoint, save_checkpoint
from .selfimprove import RewardSource, self_improve_loop
from .sft import evaluate_policy, sft_train

log = logging.getLogger("stepstogo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _write_config(cfg: RunConfig, out_dir: Path) -> None:
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _check_env(cfg: RunConfig, meta: dict, what: str) -> None:
    kind = meta.get("env_kind")
    if kind is not None and kind != cfg.env.kind:
        raise ConfigError(f"{what} was trained on {kind!r} but the config selects {cfg.env.kind!r}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config_file(args.config, args.seed)
    n = args.n if args.n is not None else cfg.dataset.n_episodes
    binning = default_binning(cfg.env.kind)
    if cfg.dataset.stg_max_steps or cfg.dataset.stg_bins:
        binning = Binning(cfg.dataset.stg_max_steps or binning.max_steps, cfg.dataset.stg_bins or binning.num_bins)
    ds = generate_demos(cfg.env, cfg.dataset.demonstrator, n, cfg.dataset.seed, binning, cfg.config_hash())
    write_dataset(ds, args.out)
    _emit({"out": str(args.out), "episodes": len(ds.episodes), "steps": ds.total_steps,
           "mean_length": ds.mean_length(), "regenerated": ds.header["regenerated"], "config_hash": cfg.config_hash()})
    return 0


def cmd_train_sft(args) -> int:
    cfg = load_config_file(args.config, args.seed)
    ds = read_dataset(args.data)
    if ds.header["env"]["kind"] != cfg.env.kind:
        raise ConfigError(f"dataset env {ds.header['env']['kind']!r} does not match config env {cfg.env.kind!r}")
    train, val = split(ds, cfg.dataset.val_fraction, cfg.dataset.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    res = sft_train(cfg.sft, train, val, out, cfg.config_hash())
    last = res.log[-1]
    _emit({"out_dir": str(out), "aborted": res.aborted, "best_bc_step": res.best_bc_step,
           "best_stg_step": res.best_stg_step, "final_val_bc": last["val_bc"], "final_val_stg": last["val_stg"],
           "success_threshold": res.metadata["success_threshold"], "checkpoints": res.paths})
    return 2 if res.aborted else 0


def cmd_self_improve(args) -> int:
    cfg = load_config_file(args.config, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    si = cfg.selfimprove
    reward_hash = file_hash(args.reward_ckpt)
    if args.distributed:
        from .distributed import launch_local

        summary = launch_local(cfg, args.policy_ckpt, args.reward_ckpt, out)
        summary["reward_file_hash_unchanged"] = file_hash(args.reward_ckpt) == reward_hash
        _emit({k: summary[k] for k in ("stop_reason", "eval_history", "replay_audit", "reward_hash_before",
                                       "reward_hash_after", "reward_file_hash_unchanged", "exit_codes")})
        return 0
    policy, meta = load_checkpoint(args.policy_ckpt)
    _check_env(cfg, meta, "policy checkpoint")
    ab = ActionBinning(**meta["action_binning"])
    rs = RewardSource.from_checkpoint(args.reward_ckpt, si.success_threshold, si.success_bonus)
    res = self_improve_loop(policy, rs, cfg.env, si, ab, out / "stage2_metrics.jsonl", config_hash=cfg.config_hash())
    final_meta = {k: v for k, v in meta.items() if k != "architecture"}
    final_meta.update({"tool_version": __version__, "config_hash": cfg.config_hash(), "objective": "stage2",
                       "stage2": {"iterations": len(res.param_hashes), "env_steps": res.env_steps,
                                  "success_threshold": rs.s, "selfimprove_config": dataclasses.asdict(si)}})
    save_checkpoint(res.policy, final_meta, out / "stage2_policy.stgc")
    evals = [m["eval_success"] for m in res.metrics if "eval_success" in m]
    _emit({"out_dir": str(out), "iterations": len(res.param_hashes), "env_steps": res.env_steps, "eval_history": evals,
           "success_threshold": rs.s, "reward_hash_unchanged": res.reward_hash_before == res.reward_hash_after
           and file_hash(args.reward_ckpt) == reward_hash})
    return 0


def cmd_serve(args) -> int:
    from .distributed.launch import run_role

    cfg = load_config_file(args.config, args.seed)
    if args.topology:
        cfg.distributed.topology = args.topology
    role = {"replay": "replay", "reward": "reward", "learner": "learner", "actor": "actor",
            "coordinator": "coordinator"}[args.role]
    result = run_role(role, cfg, args.index)
    _emit(result)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config_file(args.config, args.seed)
    net, meta = load_checkpoint(args.policy_ckpt)
    _check_env(cfg, meta, "policy checkpoint")
    ab = ActionBinning(**meta["action_binning"])
    n = args.n if args.n is not None else cfg.eval.n_episodes
    greedy = cfg.eval.greedy if args.greedy is None else args.greedy
    res = evaluate_policy(net, ab, cfg.env, n, cfg.eval.seed, greedy=greedy)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "success", "length", "config_hash", "tool_version"])
            for i, (s, length) in enumerate(zip(res.successes, res.lengths)):
                w.writerow([i, int(s), length, cfg.config_hash(), __version__])
    print(f"success {res.success_rate:.3f} (95% CI {res.ci_low:.3f}-{res.ci_high:.3f}) over {res.n} episodes, "
          f"mean length {res.mean_length:.2f}")
    return 0


def label_episodes(rs: RewardSource, ds, plateau_tol: float):
    """Per-frame ``d`` and bin distribution for every episode, plus an audit."""
    rows, increases, terminal_ok, successes = [], 0, 0, 0
    for e, ep in enumerate(ds.episodes):
        probs = rs.probs(ep.observations, ep.goal)
        d = probs @ rs.binning.midpoints()
        increases += int(np.sum(np.diff(d) > plateau_tol))
        if ep.success:
            successes += 1
            terminal_ok += bool(d[-1] <= rs.s)
        for t in range(len(d)):
            rows.append({"episode": e, "t": t, "steps_to_go": int(ep.labels[t]), "d": float(d[t]),
                         "detected": bool(d[t] <= rs.s), "probs": probs[t].tolist()})
    audit = {"frames": len(rows), "monotonic_violations": increases, "plateau_tol": plateau_tol,
             "successful_episodes": successes,
             "terminal_detected_fraction": terminal_ok / successes if successes else None}
    return rows, audit


def cmd_label(args) -> int:
    rs = RewardSource.from_checkpoint(args.reward_ckpt, args.threshold)
    ds = read_dataset(args.episodes)
    tol = args.plateau_tol if args.plateau_tol is not None else rs.binning.width / 2
    rows, audit = label_episodes(rs, ds, tol)
    audit.update({"reward_ckpt_hash": file_hash(args.reward_ckpt), "tool_version": __version__, "s": rs.s})
    out = Path(args.out)
    if out.suffix == ".json":
        out.write_text(json.dumps({"audit": audit, "frames": rows}))
    else:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "t", "steps_to_go", "d", "detected"] + [f"p{i}" for i in range(rs.binning.num_bins)])
            for r in rows:
                w.writerow([r["episode"], r["t"], r["steps_to_go"], repr(r["d"]), int(r["detected"])] + r["probs"])
    _emit(audit)
    return 0


def cmd_inspect(args) -> int:
    if args.data:
        ds = read_dataset(args.data)
        lengths = [e.length for e in ds.episodes]
        _emit({"header": ds.header, "episodes": len(ds.episodes), "steps": ds.total_steps,
               "mean_length": ds.mean_length(), "min_length": min(lengths, default=0),
               "max_length": max(lengths, default=0), "file_hash": file_hash(args.data)})
    else:
        net, meta = load_checkpoint(args.ckpt)
        _emit({"metadata": meta, "network": describe(net), "file_hash": file_hash(args.ckpt)})
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stg", description="Steps-to-go self-improvement pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="top-level seed, overriding the config")

    sp = sub.add_parser("gen-data", help="roll out the scripted demonstrator into a dataset file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, help="number of episodes (default: dataset.n_episodes)")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-sft", help="Stage 1: behavioral cloning plus steps-to-go")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_train_sft)

    sp = sub.add_parser("self-improve", help="Stage 2 with the frozen steps-to-go reward")
    common(sp)
    sp.add_argument("--policy-ckpt", required=True)
    sp.add_argument("--reward-ckpt", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--distributed", action="store_true", help="run every role as a local process")
    sp.set_defaults(fn=cmd_self_improve)

    sp = sub.add_parser("serve", help="run one distributed role until shut down")
    common(sp)
    sp.add_argument("--role", required=True, choices=["coordinator", "replay", "reward", "learner", "actor"])
    sp.add_argument("--topology", choices=["v1", "v2"])
    sp.add_argument("--index", type=int, default=0, help="actor index")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("eval", help="ground-truth success rate of a policy checkpoint")
    common(sp)
    sp.add_argument("--policy-ckpt", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--out", help="per-episode CSV")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--greedy", dest="greedy", action="store_true", default=None)
    g.add_argument("--sample", dest="greedy", action="store_false")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("label", help="per-frame expected steps-to-go for recorded episodes")
    sp.add_argument("--reward-ckpt", required=True)
    sp.add_argument("--episodes", required=True, help="dataset file")
    sp.add_argument("--out", required=True, help=".csv or .json")
    sp.add_argument("--threshold", type=float, help="success threshold (default: from the checkpoint)")
    sp.add_argument("--plateau-tol", type=float, help="allowed increase of d between frames (default: half a bin)")
    sp.set_defaults(fn=cmd_label)

    sp = sub.add_parser("inspect", help="print a dataset or checkpoint header")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--data")
    g.add_argument("--ckpt")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    level = os.environ.get("STG_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"stg: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"stg: config error: {exc}", file=sys.stderr)
        return 1
    except (StgError, OSError, RuntimeError, TimeoutError) as exc:
        print(f"stg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
