"""Stage 1: joint behavioral-cloning and steps-to-go training."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DEFAULT_SUCCESS_THRESHOLD, ActionBinning, Binning, Dataset, TupleIndex
from .envs import EnvConfig, make_demonstrator, make_env, rollout
from .errors import ConfigError, DataError, NumericError
from .nnet import (
    TASK_ACTION,
    TASK_STG,
    AdamWState,
    DenseNet,
    HeadSpec,
    adamw_step,
    backward,
    batch_cross_entropy,
    build_input,
    forward_cache,
    save_checkpoint,
    softmax,
    stg_logits,
)
from .policy import act
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass
class SftConfig:
    batch_size: int = 128
    lr: float = 3e-4
    weight_decay: float = 0.01
    total_steps: int = 20000
    val_interval: int = 500
    seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    activation: str = "tanh"
    action_bins: int = 21
    success_quantile: float = 0.9
    freeze_encoder: bool = False  # accepted for parity, there is no encoder to freeze

    def __post_init__(self):
        if self.batch_size % 2 or self.batch_size < 2:
            raise ConfigError("batch_size must be even (split evenly between the two objectives)")
        if self.val_interval < 1 or self.total_steps < 0:
            raise ConfigError("val_interval must be >= 1 and total_steps >= 0")


def make_model(ds: Dataset, cfg: SftConfig) -> DenseNet:
    head = HeadSpec(ds.obs_dim, int(ds.header["goal_dim"]), ds.action_dim, cfg.action_bins, ds.binning.num_bins)
    widths = list(cfg.hidden) + [head.n_outputs]
    acts = [cfg.activation] * len(cfg.hidden) + ["linear"]
    return DenseNet.create(head.input_dim, widths, acts, derive_seed(cfg.seed, "sft.init"), head)


# ---------------------------------------------------------------- losses


def _bc_terms(net: DenseNet, logits: np.ndarray, actions: np.ndarray, ab: ActionBinning):
    """Per-row summed-over-dims NLL and dL/dlogits (unscaled) for the action head."""
    hs = net.head_spec
    idx = ab.index(actions)
    n = logits.shape[0]
    a_logits = logits[:, : hs.stg_offset].reshape(n, hs.action_dims, hs.action_bins)
    nll = np.zeros(n)
    grad = np.zeros_like(logits)
    for d in range(hs.action_dims):
        l, g = batch_cross_entropy(a_logits[:, d, :], idx[:, d])
        nll += l
        grad[:, d * hs.action_bins : (d + 1) * hs.action_bins] = g
    return nll, grad


def _stg_terms(net: DenseNet, logits: np.ndarray, labels: np.ndarray, binning: Binning):
    hs = net.head_spec
    grad = np.zeros_like(logits)
    nll, g = batch_cross_entropy(logits[:, hs.stg_offset :], binning.index(labels))
    grad[:, hs.stg_offset :] = g
    return nll, grad


def bc_loss(net: DenseNet, obs, goals, actions, ab: ActionBinning) -> tuple[float, list[np.ndarray]]:
    """Mean over the batch of the summed per-dimension action NLL, and its gradients."""
    actions = np.asarray(actions, dtype=np.float64)
    out, cache = forward_cache(net, build_input(obs, goals, TASK_ACTION))
    nll, g = _bc_terms(net, out, actions, ab)
    n = len(nll)
    return float(nll.mean()), backward(net, cache, g / n)


def stg_loss(net: DenseNet, obs, goals, labels, binning: Binning) -> tuple[float, list[np.ndarray]]:
    """Mean NLL of the steps-to-go bin, and its gradients."""
    out, cache = forward_cache(net, build_input(obs, goals, TASK_STG))
    nll, g = _stg_terms(net, out, np.asarray(labels), binning)
    n = len(nll)
    return float(nll.mean()), backward(net, cache, g / n)


def joint_loss(net, bc_batch, stg_batch, ab: ActionBinning, binning: Binning):
    """One forward/backward over a batch made of a BC half and a steps-to-go half.

    The loss is the mean over all rows of the batch.
    Returns ``(loss, grads, bc_mean, stg_mean)``.
    """
    obs_b, goal_b, act_b = bc_batch
    obs_s, goal_s, lab_s = stg_batch
    x = np.concatenate([build_input(obs_b, goal_b, TASK_ACTION), build_input(obs_s, goal_s, TASK_STG)])
    out, cache = forward_cache(net, x)
    nb = len(obs_b)
    bc_nll, g_bc = _bc_terms(net, out[:nb], act_b, ab)
    stg_nll, g_stg = _stg_terms(net, out[nb:], lab_s, binning)
    n = out.shape[0]
    grads = backward(net, cache, np.concatenate([g_bc, g_stg]) / n)
    loss = (bc_nll.sum() + stg_nll.sum()) / n
    return float(loss), grads, float(bc_nll.mean()), float(stg_nll.mean())


def validation_losses(net: DenseNet, index: TupleIndex, ab: ActionBinning, binning: Binning) -> tuple[float, float]:
    obs, acts, goals, _ = index.all_states(include_terminal=False)
    bc, _ = bc_loss(net, obs, goals, acts, ab)
    obs, _, goals, labels = index.all_states(include_terminal=True)
    stg, _ = stg_loss(net, obs, goals, labels, binning)
    return bc, stg


def calibrate_success_threshold(net: DenseNet, index: TupleIndex, binning: Binning, floor: float, quantile: float) -> float:
    """Threshold on expected steps-to-go that the given quantile of goal-reaching
    observations satisfy, never below ``floor``."""
    ends = index.obs_offsets + index.lengths
    d = softmax(stg_logits(net, index.obs[ends], index.goals)) @ binning.midpoints()
    return float(max(floor, np.quantile(d, quantile)))


# ---------------------------------------------------------------- training


@dataclass
class SftResult:
    log: list[dict]
    best_bc: DenseNet
    best_stg: DenseNet
    final: DenseNet
    best_bc_step: int
    best_stg_step: int
    metadata: dict
    aborted: bool = False
    paths: dict = field(default_factory=dict)


def action_binning_for(ds: Dataset, cfg: SftConfig) -> ActionBinning:
    return ActionBinning(float(ds.header["a_max"]), cfg.action_bins)


def sft_train(
    cfg: SftConfig,
    train: Dataset,
    val: Dataset,
    out_dir=None,
    config_hash: str = "",
    net: DenseNet | None = None,
) -> SftResult:
    """Train both heads; keep the best-validation checkpoint for each objective plus the final one."""
    if not train.episodes or not val.episodes:
        raise DataError("sft_train needs non-empty train and validation splits")
    ab = action_binning_for(train, cfg)
    binning = train.binning
    net = net if net is not None else make_model(train, cfg)
    opt = AdamWState.for_params(net.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    tr_index, va_index = TupleIndex(train), TupleIndex(val)
    clamped = ab.out_of_range(tr_index.actions)
    if clamped:
        log.warning("%d training action components fall outside [-a_max, a_max] and are clamped", clamped)
    rng = derive_rng(cfg.seed, "sft.batches")
    half = cfg.batch_size // 2
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "training_log.jsonl").write_text("")
    base_meta = {
        "tool_version": __version__,
        "config_hash": config_hash,
        "env_kind": train.header["env"]["kind"],
        "binning": binning.to_dict(),
        "action_binning": {"a_max": ab.a_max, "num_bins": ab.num_bins},
        "sft_config": asdict(cfg),
        "clamped_actions": clamped,
    }

    floor = DEFAULT_SUCCESS_THRESHOLD.get(base_meta["env_kind"], binning.width)

    def meta(step, vbc, vstg, objective):
        s = calibrate_success_threshold(net, va_index, binning, floor, cfg.success_quantile)
        return {**base_meta, "step": step, "val_losses": {"bc": vbc, "stg": vstg}, "objective": objective,
                "success_threshold": s}

    records: list[dict] = []
    best = {"bc": (math.inf, None, -1), "stg": (math.inf, None, -1)}
    last_good = net.copy()
    acc_bc = acc_stg = 0.0
    acc_n = 0
    aborted = False
    t0 = time.perf_counter()
    paths = {}

    def checkpoint(step):
        nonlocal last_good
        vbc, vstg = validation_losses(net, va_index, ab, binning)
        rec = {
            "step": step,
            "train_bc": acc_bc / acc_n if acc_n else None,
            "train_stg": acc_stg / acc_n if acc_n else None,
            "val_bc": vbc,
            "val_stg": vstg,
            "bc_samples": acc_n * half,
            "stg_samples": acc_n * half,
            "wall_time": round(time.perf_counter() - t0, 3),
        }
        records.append(rec)
        if out is not None:
            with open(out / "training_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for key, v in (("bc", vbc), ("stg", vstg)):
            if v < best[key][0]:
                best[key] = (v, net.copy(), step)
                if out is not None:
                    paths[f"best_{key}"] = str(out / f"best_{key}.stgc")
                    save_checkpoint(net, meta(step, vbc, vstg, f"best_{key}"), paths[f"best_{key}"])
        last_good = net.copy()
        if out is not None:
            paths["last_good"] = str(out / "last_good.stgc")
            save_checkpoint(net, meta(step, vbc, vstg, "last_good"), paths["last_good"])
        log.info("step %d val_bc %.4f val_stg %.4f", step, vbc, vstg)
        return vbc, vstg

    checkpoint(0)
    step = 0
    for step in range(1, cfg.total_steps + 1):
        bc_batch = tr_index.sample(rng, half, include_terminal=False)
        stg_batch = tr_index.sample(rng, half, include_terminal=True)
        try:
            loss, grads, lbc, lstg = joint_loss(
                net, (bc_batch[0], bc_batch[2], bc_batch[1]), (stg_batch[0], stg_batch[2], stg_batch[3]), ab, binning
            )
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            adamw_step(net.params(), grads, opt, net.param_names())
            acc_bc += lbc
            acc_stg += lstg
            acc_n += 1
            if step % cfg.val_interval == 0 or step == cfg.total_steps:
                checkpoint(step)
                acc_bc = acc_stg = 0.0
                acc_n = 0
        except NumericError as exc:
            log.error("aborting Stage 1 at step %d: %s", step, exc)
            aborted = True
            net = last_good
            break
    final_step = records[-1]["step"]
    vbc, vstg = records[-1]["val_bc"], records[-1]["val_stg"]
    if out is not None:
        paths["final"] = str(out / "final.stgc")
        save_checkpoint(net, meta(final_step, vbc, vstg, "final"), paths["final"])
    return SftResult(
        log=records,
        best_bc=best["bc"][1],
        best_stg=best["stg"][1],
        final=net.copy(),
        best_bc_step=best["bc"][2],
        best_stg_step=best["stg"][2],
        metadata=meta(final_step, vbc, vstg, "final"),
        aborted=aborted,
        paths=paths,
    )


# ---------------------------------------------------------------- evaluation


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class EvalResult:
    n: int
    success_rate: float
    ci_low: float
    ci_high: float
    mean_length: float
    lengths: list[int] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "n": self.n,
            "success_rate": self.success_rate,
            "ci95": [self.ci_low, self.ci_high],
            "mean_length": self.mean_length,
        }


def _eval_result(successes: list[bool], lengths: list[int]) -> EvalResult:
    n = len(successes)
    k = int(sum(successes))
    lo, hi = wilson_interval(k, n)
    return EvalResult(n, k / n, lo, hi, float(np.mean(lengths)), lengths, successes)


def evaluate_policy(
    net: DenseNet,
    ab: ActionBinning,
    env_cfg: EnvConfig,
    n_episodes: int,
    seed: int,
    greedy: bool = True,
) -> EvalResult:
    """Roll out the action head; episodes end on ground-truth success or max length."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    env = make_env(env_cfg, terminate_on_success=True)
    successes, lengths = [], []
    for i in range(n_episodes):
        ep_seed = derive_seed(seed, "eval.episode", i)
        obs, goal = env.reset(ep_seed)
        rng = derive_rng(ep_seed, "eval.actions")
        while True:
            u = None if greedy else rng.random(net.head_spec.action_dims)
            a, _ = act(net, ab, obs, goal, u)
            res = env.step(a)
            obs = res.observation
            if res.terminated:
                break
        successes.append(res.reason == "ground_truth_success")
        lengths.append(env.t)
    return _eval_result(successes, lengths)


def evaluate_demonstrator(env_cfg: EnvConfig, demo_cfg, n_episodes: int, seed: int) -> EvalResult:
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    env = make_env(env_cfg, terminate_on_success=True)
    demo = make_demonstrator(env_cfg, demo_cfg)
    successes, lengths = [], []
    for i in range(n_episodes):
        _, acts, _, reason = rollout(env, demo, derive_seed(seed, "eval.episode", i))
        successes.append(reason == "ground_truth_success")
        lengths.append(len(acts))
    return _eval_result(successes, lengths)
