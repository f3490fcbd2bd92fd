import json
import math

import numpy as np
import pytest

from stepstogo.dataset import ActionBinning, Binning, TupleIndex, generate_demos
from stepstogo.envs import DemoConfig, EnvConfig
from stepstogo.errors import ConfigError, NumericError
from stepstogo.nnet import load_checkpoint
from stepstogo.sft import (
    SftConfig,
    bc_loss,
    calibrate_success_threshold,
    evaluate_demonstrator,
    evaluate_policy,
    joint_loss,
    make_model,
    sft_train,
    stg_loss,
    wilson_interval,
)

from conftest import finite_diff, max_rel_error, small_net


def _zero_head(net):
    net.layers[-1].weight[...] = 0.0
    net.layers[-1].bias[...] = 0.0
    return net


def _batch(rng, n, ab, binning):
    obs = rng.uniform(-1, 1, size=(n, 2))
    goals = rng.uniform(-1, 1, size=(n, 2))
    actions = ab.values(rng.integers(ab.num_bins, size=(n, 2)))
    labels = rng.integers(0, binning.max_steps, size=n)
    return obs, goals, actions, labels


def test_uniform_logits_give_log_bin_count():
    net = _zero_head(small_net(action_bins=21, stg_bins=50))
    ab, binning = ActionBinning(0.05, 21), Binning(200, 50)
    obs, goals, actions, labels = _batch(np.random.default_rng(0), 8, ab, binning)
    assert bc_loss(net, obs, goals, actions, ab)[0] == pytest.approx(2 * math.log(21), abs=1e-12)
    assert stg_loss(net, obs, goals, labels, binning)[0] == pytest.approx(math.log(50), abs=1e-12)


def test_dominant_correct_logits_give_near_zero_loss():
    net = _zero_head(small_net(action_bins=21, stg_bins=50))
    ab, binning = ActionBinning(0.05, 21), Binning(200, 50)
    hs = net.head_spec
    net.layers[-1].bias[3] = 100.0  # dim 0, bin 3
    net.layers[-1].bias[21 + 17] = 100.0  # dim 1, bin 17
    net.layers[-1].bias[hs.stg_offset + 5] = 100.0
    obs, goals, _, _ = _batch(np.random.default_rng(1), 4, ab, binning)
    actions = np.tile(ab.values(np.array([3, 17])), (4, 1))
    labels = np.full(4, 5 * 4 + 1)
    assert bc_loss(net, obs, goals, actions, ab)[0] < 1e-12
    assert stg_loss(net, obs, goals, labels, binning)[0] < 1e-12


@pytest.mark.parametrize("which", ["bc", "stg", "joint"])
def test_losses_match_finite_differences(which):
    net = small_net(seed=3, action_bins=5, stg_bins=6)
    ab, binning = ActionBinning(1.0, 5), Binning(12, 6)
    obs, goals, actions, labels = _batch(np.random.default_rng(4), 6, ab, binning)
    if which == "bc":
        fn = lambda: bc_loss(net, obs, goals, actions, ab)
    elif which == "stg":
        fn = lambda: stg_loss(net, obs, goals, labels, binning)
    else:
        fn = lambda: joint_loss(net, (obs[:3], goals[:3], actions[:3]), (obs[3:], goals[3:], labels[3:]), ab, binning)[:2]
    analytic = fn()[1]
    numeric = finite_diff(lambda: fn()[0], net.params())
    assert max_rel_error(analytic, numeric) < 1e-4


def test_joint_loss_is_mean_of_both_halves():
    net = small_net(seed=5, action_bins=5, stg_bins=6)
    ab, binning = ActionBinning(1.0, 5), Binning(12, 6)
    obs, goals, actions, labels = _batch(np.random.default_rng(6), 8, ab, binning)
    loss, _, lbc, lstg = joint_loss(net, (obs[:4], goals[:4], actions[:4]), (obs[4:], goals[4:], labels[4:]), ab, binning)
    assert loss == pytest.approx((lbc + lstg) / 2, abs=1e-12)
    assert lbc == pytest.approx(bc_loss(net, obs[:4], goals[:4], actions[:4], ab)[0], abs=1e-12)


def test_odd_batch_rejected():
    with pytest.raises(ConfigError):
        SftConfig(batch_size=33)


def test_training_is_deterministic_and_balanced(pm_small):
    ds, train, val, cfg = pm_small
    a = sft_train(cfg, train, val)
    b = sft_train(cfg, train, val)
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_time"} for r in log]
    assert strip(a.log) == strip(b.log)
    assert a.final.param_hash() == b.final.param_hash()
    for r in a.log:
        assert r["bc_samples"] == r["stg_samples"]
    assert a.log[-1]["val_stg"] < a.log[0]["val_stg"]


def test_zero_learning_rate_keeps_losses_constant(pm_small):
    ds, train, val, cfg = pm_small
    frozen = SftConfig(total_steps=40, val_interval=10, hidden=cfg.hidden, batch_size=16, lr=0.0, weight_decay=0.0)
    res = sft_train(frozen, train, val)
    assert len({(r["val_bc"], r["val_stg"]) for r in res.log}) == 1


def test_outputs_on_disk(pm_ckpts):
    out, res = pm_ckpts
    for name in ("best_bc", "best_stg", "final", "last_good"):
        net, meta = load_checkpoint(out / f"{name}.stgc")
        assert meta["tool_version"] and "val_losses" in meta and "success_threshold" in meta
    _, meta = load_checkpoint(out / "best_bc.stgc")
    assert meta["step"] == res.best_bc_step
    _, meta = load_checkpoint(out / "best_stg.stgc")
    assert meta["step"] == res.best_stg_step
    lines = (out / "training_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [r["step"] for r in res.log]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_and_keeps_last_good(pm_small, tmp_path):
    ds, train, val, cfg = pm_small
    blowup = SftConfig(total_steps=50, val_interval=5, hidden=cfg.hidden, batch_size=16, lr=1e300)
    res = sft_train(blowup, train, val, tmp_path)
    assert res.aborted
    good, _ = load_checkpoint(tmp_path / "last_good.stgc")
    final, meta = load_checkpoint(tmp_path / "final.stgc")
    assert all(np.all(np.isfinite(p)) for p in final.params())
    assert final.param_hash() == good.param_hash()


def test_non_finite_initial_model_is_reported(pm_small):
    ds, train, val, cfg = pm_small
    net = make_model(train, cfg)
    net.layers[0].weight[0, 0] = np.nan
    with pytest.raises(NumericError):
        sft_train(SftConfig(total_steps=5, val_interval=5, hidden=cfg.hidden, batch_size=16), train, val, net=net)


def test_calibrated_threshold_never_below_floor(pm_ckpts, pm_small):
    _, res = pm_ckpts
    _, _, val, _ = pm_small
    s = calibrate_success_threshold(res.best_stg, TupleIndex(val), val.binning, 4.0, 0.9)
    assert s >= 4.0
    assert calibrate_success_threshold(res.best_stg, TupleIndex(val), val.binning, 1e6, 0.9) == 1e6


def test_random_policy_rarely_succeeds():
    ds = generate_demos(EnvConfig(), DemoConfig(), 4, 0)
    net = make_model(ds, SftConfig(seed=1, hidden=[16]))
    res = evaluate_policy(net, ActionBinning(0.05, 21), EnvConfig(), 100, 0, greedy=True)
    assert res.success_rate <= 0.05


def test_demonstrator_evaluates_near_perfect():
    res = evaluate_demonstrator(EnvConfig(), DemoConfig(), 100, 0)
    assert res.success_rate == 1.0


def test_zero_episode_evaluation_rejected():
    ds = generate_demos(EnvConfig(), DemoConfig(), 2, 0)
    with pytest.raises(ConfigError):
        evaluate_policy(make_model(ds, SftConfig(hidden=[4])), ActionBinning(0.05), EnvConfig(), 0, 0)


def test_wilson_interval_brackets_the_rate():
    lo, hi = wilson_interval(45, 100)
    assert lo < 0.45 < hi
    assert wilson_interval(0, 10)[0] == 0.0 and wilson_interval(10, 10)[1] == pytest.approx(1.0)
