"""Stage 2: self-improvement with rewards from a frozen steps-to-go predictor.

Rewards are differences of the predictor's expected steps-to-go ``d(o, g)``
between consecutive observations; episodes end when ``d`` drops below a
threshold, at the length limit, or when an operator aborts.  The policy is
updated with REINFORCE on discounted Monte Carlo returns.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

from .dataset import (
    DEFAULT_SUCCESS_THRESHOLD,
    REASON_DETECTOR_SUCCESS,
    REASON_OPERATOR_ABORT,
    ActionBinning,
    Binning,
    EpisodeRecord,
)
from .envs import REASON_MAX_LENGTH, EnvConfig, make_env
from .errors import ConfigError, DataError, NumericError
from .nnet import (
    AdamWState,
    DenseNet,
    adamw_step,
    backward,
    build_input,
    forward_cache,
    load_checkpoint,
    log_softmax,
    snapshot32,
    softmax,
    stg_logits,
    TASK_ACTION,
)
from .policy import act
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass
class SelfImproveConfig:
    gamma: float = 0.9
    c: float = 5e-2
    n_updates: int = 16
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    max_episode_length: int | None = None
    success_threshold: float | None = None
    success_bonus: float = 0.0
    seed: int = 0
    max_iterations: int = 20
    max_env_steps: int | None = None
    eval_every: int = 5
    eval_episodes: int = 100
    eval_greedy: bool = False
    plateau_window: int = 5
    plateau_tol: float = 0.01
    include_aborted: bool = False
    policy_init: str = "best_bc"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.c <= 0:
            raise ConfigError("c must be positive")
        if self.n_updates < 1 or self.batch_size < 1:
            raise ConfigError("n_updates and batch_size must be >= 1")
        if self.success_bonus < 0:
            raise ConfigError("success_bonus must be >= 0")
        if self.policy_init not in ("best_bc", "final"):
            raise ConfigError("policy_init must be 'best_bc' or 'final'")


# ---------------------------------------------------------------- reward pieces


@dataclass
class StepsToGoDistribution:
    probs: np.ndarray
    binning: Binning

    def expected(self) -> float:
        return expected_steps_to_go(self.probs, self.binning)


def expected_steps_to_go(probs, binning: Binning, tol: float = 1e-6):
    """``d(o, g)``: expected steps-to-go, each bin standing for its midpoint.

    Accepts one distribution or a batch (rows).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] != binning.num_bins:
        raise ConfigError("distribution length does not match binning")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise NumericError("steps-to-go distribution is not normalized")
    d = p @ binning.midpoints()
    return float(d) if np.ndim(d) == 0 else d


def reward(d_t: float, d_next: float, success_next: bool, beta: float = 0.0) -> float:
    """Progress toward the goal in predicted steps, plus an optional success bonus."""
    return d_t - d_next + (beta if success_next else 0.0)


def detect_success(d: float, s: float) -> bool:
    if s <= 0:
        raise ConfigError("success threshold must be positive")
    return d <= s


def monte_carlo_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns by backward recursion ``R_t = r_t + gamma * R_{t+1}``."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def episode_rewards(d: np.ndarray, s: float, beta: float) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    rewards = d[:-1] - d[1:]
    if beta:
        rewards = rewards + beta * (d[1:] <= s)
    return rewards


def c_heuristic(gamma: float, n_speedup: float) -> float:
    """REINFORCE scale keeping ``c * R_t`` roughly in [-1, 1] when the policy
    gains ``n_speedup`` steps per timestep: ``(1 - gamma) / n_speedup``.

    Evaluated in decimal on the shortest repr of each argument, so
    ``c_heuristic(0.9, 2)`` is exactly ``0.05`` rather than ``0.0499...``.
    """
    if not 0.0 <= gamma < 1.0 or n_speedup <= 0:
        raise ConfigError("need 0 <= gamma < 1 and n_speedup > 0")
    return float((1 - Decimal(repr(float(gamma)))) / Decimal(repr(float(n_speedup))))


def shaping_decomposition_check(d_values, gamma: float, rewards=None) -> np.ndarray:
    """Per-step residual between the reward and its core + shaping split.

    With ``V = -d`` the reward ``d_t - d_{t+1}`` equals
    ``(1 - gamma) V(o_{t+1}) + [gamma V(o_{t+1}) - V(o_t)]``.  ``rewards``
    defaults to the bonus-free rewards, in which case every residual is
    rounding error; with a success bonus the residual equals the bonus at
    success steps.
    """
    d = np.asarray(d_values, dtype=np.float64)
    r = d[:-1] - d[1:] if rewards is None else np.asarray(rewards, dtype=np.float64)
    v, v_next = -d[:-1], -d[1:]
    core = (1.0 - gamma) * v_next
    shaping = gamma * v_next - v
    return np.abs(r - (core + shaping))


def telescoped_returns(d_values, gamma: float) -> np.ndarray:
    """Closed form of the returns of bonus-free rewards, with ``V = -d``:

    ``R_t = (1 - gamma) * sum_{i=t}^{T-1} gamma^(i-t) V(o_{i+1}) + gamma^(T-t) V(o_T) - V(o_t)``.

    The middle term is the value left at the final observation; it vanishes
    when ``V(o_T) = 0``.
    """
    d = np.asarray(d_values, dtype=np.float64)
    v = -d
    T = len(d) - 1
    out = np.empty(T)
    for t in range(T):
        powers = gamma ** np.arange(T - t)
        out[t] = (1.0 - gamma) * np.dot(powers, v[t + 1 :]) + gamma ** (T - t) * v[T] - v[t]
    return out


class RewardSource:
    """Frozen steps-to-go predictor used for rewards and success detection."""

    def __init__(self, net: DenseNet, binning: Binning, success_threshold: float, success_bonus: float = 0.0):
        if success_threshold <= 0:
            raise ConfigError("success threshold must be positive")
        self.net = net
        self.binning = binning
        self.s = float(success_threshold)
        self.beta = float(success_bonus)
        self.initial_hash = net.param_hash()

    @classmethod
    def from_checkpoint(cls, path, success_threshold: float | None = None, success_bonus: float = 0.0) -> "RewardSource":
        net, meta = load_checkpoint(path)
        binning = Binning(**meta["binning"])
        if success_threshold is None:
            success_threshold = meta.get("success_threshold") or DEFAULT_SUCCESS_THRESHOLD.get(meta.get("env_kind"), binning.width)
        return cls(net, binning, success_threshold, success_bonus)

    def probs(self, obs, goal) -> np.ndarray:
        return softmax(stg_logits(self.net, obs, goal))

    def distribution(self, obs, goal) -> StepsToGoDistribution:
        return StepsToGoDistribution(self.probs(obs, goal), self.binning)

    def d_value(self, obs, goal) -> float:
        """``d`` for one observation (single-row forward pass)."""
        return expected_steps_to_go(self.probs(obs, goal), self.binning)

    def d_values(self, observations, goal) -> np.ndarray:
        """``d`` for a whole episode's observations in one batched pass."""
        return expected_steps_to_go(self.probs(np.asarray(observations), goal), self.binning)

    def success(self, obs, goal) -> bool:
        return detect_success(self.d_value(obs, goal), self.s)

    def param_hash(self) -> str:
        return self.net.param_hash()


# ---------------------------------------------------------------- collection


@dataclass
class ReplayItem:
    obs: np.ndarray
    action: np.ndarray
    goal: np.ndarray
    ret: float

    def to_json(self) -> dict:
        return {"obs": self.obs.tolist(), "action": self.action.tolist(), "goal": self.goal.tolist(), "ret": self.ret}

    @classmethod
    def from_json(cls, d: dict) -> "ReplayItem":
        ret = float(d["ret"])
        if not math.isfinite(ret):
            raise DataError("replay item with non-finite return")
        return cls(np.asarray(d["obs"], dtype=np.float64), np.asarray(d["action"], dtype=np.float64),
                   np.asarray(d["goal"], dtype=np.float64), ret)


@dataclass
class EpisodeOutcome:
    record: EpisodeRecord
    items: list[ReplayItem]
    d_values: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    gt_success: bool
    seed: int


def collect_episode(
    env,
    episode_seed: int,
    action_dims: int,
    policy_fn: Callable,
    success_fn: Callable,
    label_fn: Callable,
    cfg: SelfImproveConfig,
    s: float,
    abort_hook: Callable[[], bool] | None = None,
) -> EpisodeOutcome:
    """Run one episode of the current policy and turn it into replay items.

    ``policy_fn(obs, goal, u)`` returns an action from per-dimension uniforms
    ``u``; ``success_fn(obs, goal, t)`` is the (possibly remote) detector;
    ``label_fn(observations, goal)`` returns ``d`` for every observation.
    """
    obs, goal = env.reset(episode_seed)
    rng = derive_rng(episode_seed, "actor.actions")
    observations, actions = [obs], []
    max_len = cfg.max_episode_length or env.max_len
    reason = REASON_DETECTOR_SUCCESS if success_fn(obs, goal, 0) else None
    while reason is None:
        if abort_hook is not None and abort_hook():
            reason = REASON_OPERATOR_ABORT
            break
        u = rng.random(action_dims)
        a = np.asarray(policy_fn(obs, goal, u), dtype=np.float64)
        res = env.step(a)
        obs = res.observation
        actions.append(a)
        observations.append(obs)
        if success_fn(obs, goal, len(actions)):
            reason = REASON_DETECTOR_SUCCESS
        elif len(actions) >= max_len or res.reason == REASON_MAX_LENGTH:
            reason = REASON_MAX_LENGTH
    T = len(actions)
    obs_arr = np.array(observations)
    act_arr = np.array(actions).reshape(T, env.action_dim)
    d = np.asarray(label_fn(obs_arr, goal), dtype=np.float64)
    if d.shape != (T + 1,) or not np.all(np.isfinite(d)):
        raise DataError("reward source returned malformed steps-to-go labels")
    rewards = episode_rewards(d, s, cfg.success_bonus)
    returns = monte_carlo_returns(rewards, cfg.gamma)
    record = EpisodeRecord(obs_arr, act_arr, np.asarray(goal), reason == REASON_DETECTOR_SUCCESS, reason,
                           np.arange(T, -1, -1))
    emit = reason != REASON_OPERATOR_ABORT or cfg.include_aborted
    items = [ReplayItem(obs_arr[t], act_arr[t], np.asarray(goal), float(returns[t])) for t in range(T)] if emit else []
    return EpisodeOutcome(record, items, d, rewards, returns, bool(env.success(obs, goal)), episode_seed)


def local_fns(policy: DenseNet, ab: ActionBinning, rs: RewardSource):
    """Policy / detector / labeler callables backed by in-process networks."""

    def policy_fn(obs, goal, u):
        return act(policy, ab, obs, goal, u)[0]

    def success_fn(obs, goal, t):
        return rs.success(obs, goal)

    def label_fn(observations, goal):
        return rs.d_values(observations, goal)

    return policy_fn, success_fn, label_fn


def episode_seed(seed: int, actor: int, index: int) -> int:
    return derive_seed(seed, "actor.episode", actor, index)


# ---------------------------------------------------------------- replay


class ReplayBuffer:
    """Episode-atomic append, then without-replacement sampling per learning phase."""

    def __init__(self):
        self.items: list[ReplayItem] = []
        self._perm: np.ndarray | None = None
        self._cursor = 0
        self.consumed: list[int] = []

    def __len__(self) -> int:
        return len(self.items)

    def append_episode(self, items: list[ReplayItem]) -> int:
        if self._perm is not None:
            raise DataError("cannot append during a learning phase")
        self.items.extend(items)
        return len(self.items)

    def start_phase(self, rng: np.random.Generator) -> None:
        self._perm = rng.permutation(len(self.items))
        self._cursor = 0
        self.consumed = []

    @property
    def in_phase(self) -> bool:
        return self._perm is not None

    def sample_batch(self, b: int) -> tuple[list[int], list[ReplayItem]]:
        if self._perm is None:
            raise DataError("sampling outside a learning phase")
        if self._cursor + b > len(self._perm):
            raise DataError(f"batch of {b} exceeds the {len(self._perm) - self._cursor} unconsumed items")
        ids = [int(i) for i in self._perm[self._cursor : self._cursor + b]]
        self._cursor += b
        self.consumed.extend(ids)
        return ids, [self.items[i] for i in ids]

    def clear(self) -> None:
        self.items = []
        self._perm = None
        self._cursor = 0


# ---------------------------------------------------------------- REINFORCE


def stack_items(items: list[ReplayItem]):
    return (
        np.stack([i.obs for i in items]),
        np.stack([i.action for i in items]),
        np.stack([i.goal for i in items]),
        np.array([i.ret for i in items]),
    )


def reinforce_loss(net: DenseNet, ab: ActionBinning, obs, actions, goals, returns, c: float):
    """Mean over the batch of ``-c * R_t * sum_dim log p(a_t,dim | o_t, g)`` and its gradients."""
    hs = net.head_spec
    out, cache = forward_cache(net, build_input(obs, goals, TASK_ACTION))
    n = out.shape[0]
    a_logits = out[:, : hs.stg_offset].reshape(n, hs.action_dims, hs.action_bins)
    lp = log_softmax(a_logits)
    idx = ab.index(actions)
    logp = np.take_along_axis(lp, idx[..., None], axis=-1)[..., 0].sum(axis=-1)
    returns = np.asarray(returns, dtype=np.float64)
    loss = float(np.mean(-c * returns * logp))
    g = np.exp(lp)
    np.put_along_axis(g, idx[..., None], np.take_along_axis(g, idx[..., None], axis=-1) - 1.0, axis=-1)
    g *= (c * returns / n)[:, None, None]
    upstream = np.zeros_like(out)
    upstream[:, : hs.stg_offset] = g.reshape(n, -1)
    return loss, backward(net, cache, upstream)


def reinforce_update(net: DenseNet, opt: AdamWState, ab: ActionBinning, items: list[ReplayItem], c: float) -> float:
    """One AdamW step on the REINFORCE loss; parameters are restored on a numeric failure."""
    obs, actions, goals, returns = stack_items(items)
    loss, grads = reinforce_loss(net, ab, obs, actions, goals, returns, c)
    saved = [p.copy() for p in net.params()]
    saved_opt = opt.copy()
    try:
        if not math.isfinite(loss):
            raise NumericError("non-finite REINFORCE loss")
        adamw_step(net.params(), grads, opt, net.param_names())
        if not all(np.all(np.isfinite(p)) for p in net.params()):
            raise NumericError("non-finite parameters after update")
    except NumericError:
        for p, s in zip(net.params(), saved):
            p[...] = s
        opt.m, opt.v, opt.step = saved_opt.m, saved_opt.v, saved_opt.step
        raise
    return loss


def learning_phase(net, opt, ab, sample_batch: Callable[[int], list[ReplayItem]], cfg: SelfImproveConfig) -> list[float]:
    """``n_updates`` REINFORCE steps on batches drawn by ``sample_batch``."""
    return [reinforce_update(net, opt, ab, sample_batch(cfg.batch_size), cfg.c) for _ in range(cfg.n_updates)]


def phase_rng(seed: int, iteration: int) -> np.random.Generator:
    return derive_rng(seed, "replay.phase", iteration)


# ---------------------------------------------------------------- loop


@dataclass
class SelfImproveResult:
    policy: DenseNet
    metrics: list[dict]
    reward_hash_before: str
    reward_hash_after: str
    env_steps: int
    param_hashes: list[str] = field(default_factory=list)
    consumed: list[list[int]] = field(default_factory=list)


def plateaued(history: list[float], window: int, tol: float) -> bool:
    """True when the last ``window`` evaluations improved on the best earlier one by less than ``tol``."""
    if window < 1 or len(history) <= window:
        return False
    before = max(history[:-window])
    return max(history[-window:]) - before < tol


def self_improve_loop(
    policy: DenseNet,
    reward_source: RewardSource,
    env_cfg: EnvConfig,
    cfg: SelfImproveConfig,
    ab: ActionBinning,
    metrics_path=None,
    evaluate: Callable[[DenseNet], float] | None = None,
    abort_hook: Callable[[], bool] | None = None,
    config_hash: str = "",
) -> SelfImproveResult:
    """Alternate collection until ``n_updates * batch_size`` items, then ``n_updates`` updates."""
    from .sft import evaluate_policy

    policy = policy.copy()
    opt = AdamWState.for_params(policy.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    env = make_env(env_cfg, terminate_on_success=False)
    s = reward_source.s
    hash_before = reward_source.param_hash()
    if evaluate is None:
        def evaluate(net):
            return evaluate_policy(net, ab, env_cfg, cfg.eval_episodes, derive_seed(cfg.seed, "stage2.eval"),
                                   greedy=cfg.eval_greedy).success_rate

    need = cfg.n_updates * cfg.batch_size
    # collection overshoots ``need`` by at most one episode, so reserve that much of the budget
    worst_case = need + (cfg.max_episode_length or env.max_len) - 1
    buffer = ReplayBuffer()
    metrics: list[dict] = []
    hashes: list[str] = []
    consumed: list[list[int]] = []
    eval_history: list[float] = []
    env_steps = 0
    episode_index = 0
    fh = open(metrics_path, "w") if metrics_path else None

    def emit(rec):
        metrics.append(rec)
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    try:
        if cfg.eval_every > 0:
            eval_history.append(evaluate(snapshot32(policy)))
            emit({"iteration": 0, "eval_success": eval_history[-1], "env_steps": 0, "config_hash": config_hash})
        for it in range(1, cfg.max_iterations + 1):
            if cfg.max_env_steps is not None and env_steps + worst_case > cfg.max_env_steps:
                break
            acting = snapshot32(policy)
            policy_fn, success_fn, label_fn = local_fns(acting, ab, reward_source)
            outcomes = []
            discarded = 0
            while len(buffer) < need:
                try:
                    out = collect_episode(env, episode_seed(cfg.seed, 0, episode_index), ab_dims(acting),
                                          policy_fn, success_fn, label_fn, cfg, s, abort_hook)
                except DataError as exc:
                    log.warning("episode discarded: %s", exc)
                    discarded += 1
                    continue
                finally:
                    episode_index += 1
                env_steps += out.record.length
                outcomes.append(out)
                buffer.append_episode(out.items)
            buffer.start_phase(phase_rng(cfg.seed, it))
            saved = [p.copy() for p in policy.params()]
            saved_opt = opt.copy()
            try:
                losses = learning_phase(policy, opt, ab, lambda b: buffer.sample_batch(b)[1], cfg)
            except NumericError as exc:
                log.error("iteration %d aborted: %s", it, exc)
                for p, sv in zip(policy.params(), saved):
                    p[...] = sv
                opt = saved_opt
                losses = [math.nan]
            consumed.append(list(buffer.consumed))
            buffer.clear()
            hashes.append(policy.param_hash())
            rec = {
                "iteration": it,
                "episodes": len(outcomes),
                "discarded": discarded,
                "mean_episode_length": float(np.mean([o.record.length for o in outcomes])),
                "detector_success": float(np.mean([o.record.success for o in outcomes])),
                "gt_success": float(np.mean([o.gt_success for o in outcomes])),
                "mean_return": float(np.mean(np.concatenate([o.returns for o in outcomes]))) if env_steps else 0.0,
                "reinforce_loss": float(np.mean(losses)),
                "env_steps": env_steps,
                "param_hash": hashes[-1],
                "config_hash": config_hash,
            }
            if cfg.eval_every > 0 and it % cfg.eval_every == 0:
                eval_history.append(evaluate(snapshot32(policy)))
                rec["eval_success"] = eval_history[-1]
            emit(rec)
            log.info("iteration %d: %s", it, rec)
            if "eval_success" in rec and plateaued(eval_history, cfg.plateau_window, cfg.plateau_tol):
                break
    finally:
        if fh:
            fh.close()
    hash_after = reward_source.param_hash()
    return SelfImproveResult(snapshot32(policy), metrics, hash_before, hash_after, env_steps, hashes, consumed)


def ab_dims(net: DenseNet) -> int:
    return net.head_spec.action_dims
