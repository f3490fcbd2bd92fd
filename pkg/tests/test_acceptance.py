"""Acceptance criteria 1-9.

Each test prints one ``C<k> PASS|FAIL`` line with the measured numbers; the
same lines are repeated in the terminal summary (see conftest.py).  The
pointmass and gridworld runs use the default configuration and take several
minutes in total on one core.
"""
import dataclasses

import numpy as np
import pytest

from stepstogo.config import load_config
from stepstogo.dataset import (
    DEFAULT_SUCCESS_THRESHOLD,
    ActionBinning,
    Binning,
    TupleIndex,
    generate_demos,
    split,
    subsample,
)
from stepstogo.distributed import launch_local
from stepstogo.distributed.common import Client
from stepstogo.distributed.replay import ReplayServer
from stepstogo.envs import make_env
from stepstogo.nnet import file_hash, load_checkpoint, stg_logits
from stepstogo.rng import derive_rng, derive_seed
from stepstogo.selfimprove import (
    ReplayItem,
    RewardSource,
    c_heuristic,
    episode_rewards,
    monte_carlo_returns,
    reinforce_loss,
    self_improve_loop,
    shaping_decomposition_check,
    telescoped_returns,
)
from stepstogo.sft import action_binning_for, bc_loss, evaluate_policy, sft_train, stg_loss

from conftest import ACCEPTANCE_LINES, finite_diff, max_rel_error, small_net

SEEDS = (0, 1, 2)


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------- shared runs


def _pointmass_run(seed, out):
    cfg = load_config({"seed": seed})
    ds = generate_demos(cfg.env, cfg.dataset.demonstrator, cfg.dataset.n_episodes, cfg.dataset.seed)
    train, val = split(ds, cfg.dataset.val_fraction, cfg.dataset.seed)
    res = sft_train(cfg.sft, train, val, out, cfg.config_hash())
    ab = action_binning_for(train, cfg.sft)
    policy, _ = load_checkpoint(out / "best_bc.stgc")

    def evaluate(net):
        return evaluate_policy(net, ab, cfg.env, cfg.eval.n_episodes, cfg.eval.seed, greedy=cfg.eval.greedy)

    stage1 = evaluate(policy)
    budget = int(0.2 * ds.total_steps)
    si = dataclasses.replace(cfg.selfimprove, max_env_steps=budget)
    reward_ckpt = out / "best_stg.stgc"
    hash_before = file_hash(reward_ckpt)
    rs = RewardSource.from_checkpoint(reward_ckpt, si.success_threshold, si.success_bonus)
    loop = self_improve_loop(policy, rs, cfg.env, si, ab, out / "stage2_metrics.jsonl", config_hash=cfg.config_hash())
    stage2 = evaluate(loop.policy)
    return {
        "cfg": cfg, "dataset": ds, "sft": res, "stage1": stage1, "stage2": stage2, "loop": loop, "budget": budget,
        "demo_mean_length": ds.mean_length(), "reward_ckpt": reward_ckpt, "policy_ckpt": out / "best_bc.stgc",
        "reward_file_unchanged": file_hash(reward_ckpt) == hash_before,
    }


@pytest.fixture(scope="session")
def pointmass_runs(tmp_path_factory):
    return {seed: _pointmass_run(seed, tmp_path_factory.mktemp(f"pm_seed{seed}")) for seed in SEEDS}


@pytest.fixture(scope="session")
def gridworld_run(tmp_path_factory):
    cfg = load_config({"env": {"kind": "gridworld"}})
    ds = generate_demos(cfg.env, cfg.dataset.demonstrator, cfg.dataset.n_episodes, cfg.dataset.seed)
    train, val = split(ds, cfg.dataset.val_fraction, cfg.dataset.seed)
    res = sft_train(cfg.sft, train, val, tmp_path_factory.mktemp("gridworld"), cfg.config_hash())
    held = generate_demos(cfg.env, cfg.dataset.demonstrator, 200, derive_seed(cfg.seed, "acceptance.heldout") % 2**31)
    return cfg, train, held, res


# ---------------------------------------------------------------- 1


def test_c1_pointmass_end_to_end(pointmass_runs):
    rows, ok = [], True
    for seed, r in pointmass_runs.items():
        s1, s2 = r["stage1"], r["stage2"]
        length_gap = abs(s1.mean_length - r["demo_mean_length"]) / r["demo_mean_length"]
        ratio = s2.mean_length / s1.mean_length
        seed_ok = (s1.success_rate >= 0.60 and length_gap <= 0.25 and r["loop"].env_steps <= r["budget"]
                   and s2.success_rate >= 0.90 and ratio <= 0.6)
        ok &= seed_ok
        rows.append(f"seed {seed}: stage1 {s1.success_rate:.2f}@{s1.mean_length:.1f} (demo {r['demo_mean_length']:.1f}, "
                    f"gap {length_gap:.0%}), stage2 {s2.success_rate:.2f}@{s2.mean_length:.1f} (x{ratio:.2f}) "
                    f"using {r['loop'].env_steps}/{r['budget']} extra steps")
    report("C1", ok, "; ".join(rows))
    assert ok


# ---------------------------------------------------------------- 2


def _argmax_accuracy(net, ds):
    obs, _, goals, labels = TupleIndex(ds).all_states(True)
    pred = np.argmax(stg_logits(net, obs, goals), axis=1)
    return float(np.mean(pred == ds.binning.index(labels)))


def test_c2_gridworld_oracle_equivalence(gridworld_run):
    cfg, train, held, res = gridworld_run
    assert train.binning.width == 1.0
    acc_train, acc_held = _argmax_accuracy(res.best_stg, train), _argmax_accuracy(res.best_stg, held)
    ok = acc_train >= 0.95 and acc_held >= 0.85
    report("C2", ok, f"argmax bin exact match: train {acc_train:.4f} (>= 0.95), held-out {acc_held:.4f} (>= 0.85)")
    assert ok


def test_gridworld_validation_stg_loss_halves(gridworld_run):
    _, _, _, res = gridworld_run
    first, best = res.log[0]["val_stg"], min(r["val_stg"] for r in res.log)
    assert best <= 0.5 * first


# ---------------------------------------------------------------- 3


def test_c3_identity_suite():
    rng = derive_rng(0, "acceptance.identities")
    worst = {"shaping": 0.0, "telescoping": 0.0, "recursion": 0.0, "closed_form": 0.0}
    for _ in range(1000):
        T = int(rng.integers(1, 201))
        d = rng.uniform(0.0, 64.0, size=T + 1)
        gamma = float(rng.uniform(0.0, 1.0))
        worst["shaping"] = max(worst["shaping"], float(shaping_decomposition_check(d, gamma).max()))
        r1 = episode_rewards(d, 1.0, 0.0)
        worst["telescoping"] = max(worst["telescoping"], abs(monte_carlo_returns(r1, 1.0)[0] - (d[0] - d[-1])))
        r = episode_rewards(d, 1.0, 0.0)
        R = monte_carlo_returns(r, gamma)
        rec = R - (r + gamma * np.append(R[1:], 0.0))
        worst["recursion"] = max(worst["recursion"], float(np.abs(rec).max()))
        worst["closed_form"] = max(worst["closed_form"], float(np.abs(R - telescoped_returns(d, gamma)).max()))
    ok = (worst["shaping"] < 1e-12 and worst["telescoping"] <= 1e-9 and worst["recursion"] < 1e-12
          and worst["closed_form"] <= 1e-9)
    report("C3", ok, "max residuals over 1000 trajectories: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- 4


def test_c4_gradient_suite():
    rng = derive_rng(0, "acceptance.gradients")
    worst = {"bc": 0.0, "stg": 0.0, "reinforce": 0.0}
    for i in range(50):
        obs_dim, goal_dim, dims = (int(x) for x in rng.integers(1, 4, size=3))
        bins, stg_bins = int(rng.integers(2, 7)), int(rng.integers(2, 9))
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
        act = str(rng.choice(["tanh", "relu"]))
        net = small_net(int(rng.integers(2**31)), obs_dim, goal_dim, dims, bins, stg_bins, hidden, act)
        # random biases keep relu pre-activations off their kink (zero biases put dead units exactly on it)
        for layer in net.layers:
            layer.bias[...] = rng.normal(scale=0.5, size=layer.bias.shape)
        ab, binning = ActionBinning(1.0, bins), Binning(2 * stg_bins, stg_bins)
        n = int(rng.integers(1, 7))
        obs, goals = rng.normal(size=(n, obs_dim)), rng.normal(size=(n, goal_dim))
        actions = ab.values(rng.integers(bins, size=(n, dims)))
        labels = rng.integers(0, 2 * stg_bins, size=n)
        returns = rng.normal(size=n) * 20
        losses = {
            "bc": lambda: bc_loss(net, obs, goals, actions, ab),
            "stg": lambda: stg_loss(net, obs, goals, labels, binning),
            "reinforce": lambda: reinforce_loss(net, ab, obs, actions, goals, returns, 5e-2),
        }
        for name, fn in losses.items():
            fd = finite_diff(lambda: fn()[0], net.params())
            worst[name] = max(worst[name], max_rel_error(fn()[1], fd))
    ok = max(worst.values()) < 1e-4
    report("C4", ok, "max relative error over 50 networks: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- 5


def test_c5_replay_semantics(pm_ckpts):
    out, _ = pm_ckpts
    policy, meta = load_checkpoint(out / "best_bc.stgc")
    ab = ActionBinning(**meta["action_binning"])
    cfg = load_config({"selfimprove": {"max_iterations": 20, "eval_every": 0}}).selfimprove
    need = cfg.n_updates * cfg.batch_size
    loop = self_improve_loop(policy, RewardSource.from_checkpoint(out / "best_stg.stgc"), load_config().env, cfg, ab)
    loop_ok = len(loop.consumed) == 20 and all(len(c) == len(set(c)) == need for c in loop.consumed)

    # the same schedule through the replay server
    server = ReplayServer("127.0.0.1", 0, seed=0)
    server.serve_in_thread()
    c = Client("127.0.0.1", server.port)
    rng = derive_rng(0, "acceptance.replay")
    epoch, server_ok, empties = 0, True, []
    try:
        for it in range(20):
            n = 0
            while n < need:
                k = int(rng.integers(1, 200))
                items = [ReplayItem(rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), float(x)).to_json()
                         for x in rng.normal(size=k)]
                n = c.request({"type": "AppendItems", "epoch": epoch, "items": items}, "BufferSizeReply")["n"]
            epoch += 1
            c.request({"type": "PhaseChange", "phase": "learning", "epoch": epoch}, "Ack")
            ids = []
            for _ in range(cfg.n_updates):
                ids += c.request({"type": "SampleBatch", "b": cfg.batch_size, "epoch": epoch}, "BatchReply")["ids"]
            server_ok &= len(ids) == len(set(ids)) == need
            empties.append(c.request({"type": "Clear", "epoch": epoch}, "BufferSizeReply")["n"])
            epoch += 1
            c.request({"type": "PhaseChange", "phase": "collecting", "epoch": epoch}, "Ack")
        audit = c.request({"type": "Status"}, "StatusReply")["audit"]
    finally:
        c.close()
        server.shutdown()
        server.server_close()
    server_ok &= audit["consumed_per_phase"] == [need] * 20 and audit["repeats"] == 0 and set(empties) == {0}
    ok = loop_ok and server_ok
    report("C5", ok, f"20 phases of N*B={need}: loop distinct {[len(set(c)) for c in loop.consumed][:3]}..., "
                     f"server consumed {audit['consumed_per_phase'][:3]}..., repeats {audit['repeats']}, "
                     f"buffer after clear {sorted(set(empties))}")
    assert ok


# ---------------------------------------------------------------- 6


def test_c6_success_detector_on_gridworld(gridworld_run):
    cfg, _, held, res = gridworld_run
    s = DEFAULT_SUCCESS_THRESHOLD["gridworld"]
    env = make_env(cfg.env)
    binning = held.binning
    tp = fp = fn = 0
    for ep in held.episodes:
        logits = stg_logits(res.best_stg, ep.observations, np.broadcast_to(ep.goal, (len(ep.observations), len(ep.goal))))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        detected = p @ binning.midpoints() <= s
        truth = np.array([env.success(o, ep.goal) for o in ep.observations])
        tp += int(np.sum(detected & truth))
        fp += int(np.sum(detected & ~truth))
        fn += int(np.sum(~detected & truth))
    precision, recall = tp / max(tp + fp, 1), tp / max(tp + fn, 1)
    ok = precision >= 0.95 and recall >= 0.95
    report("C6", ok, f"s={s}: precision {precision:.4f}, recall {recall:.4f} over {len(held.episodes)} held-out episodes "
                     f"(tp {tp}, fp {fp}, fn {fn})")
    assert ok


# ---------------------------------------------------------------- 7 and 8


@pytest.fixture(scope="session")
def weak_policy(pointmass_runs, tmp_path_factory):
    """A briefly trained policy with room to improve; the reward stays the fully trained one."""
    r = pointmass_runs[0]
    cfg = r["cfg"]
    ds = subsample(r["dataset"], 0.3, cfg.dataset.seed)
    train, val = split(ds, cfg.dataset.val_fraction, cfg.dataset.seed)
    out = tmp_path_factory.mktemp("weak")
    sft_train(dataclasses.replace(cfg.sft, total_steps=4000, val_interval=500), train, val, out)
    return out / "best_bc.stgc"


@pytest.fixture(scope="session")
def distributed_runs(pointmass_runs, weak_policy, tmp_path_factory):
    r = pointmass_runs[0]
    cfg = load_config({"seed": 0, "selfimprove": {"max_iterations": 3, "eval_every": 0}})
    policy, meta = load_checkpoint(r["policy_ckpt"])
    ref = self_improve_loop(policy, RewardSource.from_checkpoint(r["reward_ckpt"]), cfg.env, cfg.selfimprove,
                            ActionBinning(**meta["action_binning"]))
    reward_hash = file_hash(r["reward_ckpt"])
    runs = {"reference": ref}
    for topology in ("v1", "v2"):
        runs[topology] = launch_local(cfg, r["policy_ckpt"], r["reward_ckpt"], tmp_path_factory.mktemp(topology),
                                      timeout=900, topology=topology, synchronous=True, n_actors=1)
    cfg4 = load_config({"seed": 0, "selfimprove": {"max_iterations": 10, "eval_every": 5, "eval_episodes": 100}})
    runs["four"] = launch_local(cfg4, weak_policy, r["reward_ckpt"], tmp_path_factory.mktemp("four"), timeout=900,
                                topology="v2", n_actors=4, async_success_check=False)
    runs["reward_file_unchanged"] = file_hash(r["reward_ckpt"]) == reward_hash
    return runs


def test_c7_distributed_equivalence(distributed_runs):
    ref = distributed_runs["reference"].param_hashes
    exact = {t: [it["param_hash"] for it in distributed_runs[t]["iterations"]] == ref for t in ("v1", "v2")}
    four = distributed_runs["four"]
    audit = four["replay_audit"]
    evals = four["eval_history"]
    # every evaluation after training beats the starting policy (success saturates at 1.0, so a strict
    # chain between later evaluations is not required)
    improving = len(evals) == 3 and all(e > evals[0] for e in evals[1:])
    exits_ok = all(set(distributed_runs[t]["exit_codes"].values()) == {0} for t in ("v1", "v2", "four"))
    ok = (all(exact.values()) and len(ref) == 3 and len(four["iterations"]) == 10 and audit["violations"] == 0
          and improving and exits_ok)
    report("C7", ok, f"bit-exact v1 {exact['v1']}, v2 {exact['v2']} over {len(ref)} iterations; 4 actors: "
                     f"{len(four['iterations'])} iterations, {audit['violations']} violations, "
                     f"eval success {evals}, exit codes ok {exits_ok}")
    assert ok


def test_c8_frozen_reward(pointmass_runs, distributed_runs):
    single = [r["reward_file_unchanged"] and r["loop"].reward_hash_before == r["loop"].reward_hash_after
              for r in pointmass_runs.values()]
    dist = [distributed_runs[t]["reward_hash_before"] == distributed_runs[t]["reward_hash_after"]
            for t in ("v1", "v2", "four")]
    ok = all(single) and all(dist) and distributed_runs["reward_file_unchanged"]
    report("C8", ok, f"reward hash unchanged: single-process {single}, distributed {dist}, "
                     f"checkpoint file {distributed_runs['reward_file_unchanged']}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_c_heuristic():
    value = c_heuristic(0.9, 2)
    ok = value == 0.05
    report("C9", ok, f"c_heuristic(0.9, 2) = {value!r}")
    assert ok


def test_default_c_matches_heuristic():
    si = load_config().selfimprove
    assert si.c == c_heuristic(si.gamma, 2)

