import numpy as np
import pytest

from stepstogo.dataset import generate_demos, split
from stepstogo.envs import DemoConfig, EnvConfig
from stepstogo.nnet import DenseNet, HeadSpec
from stepstogo.sft import SftConfig, sft_train


def small_net(seed=0, obs_dim=2, goal_dim=2, action_dims=2, action_bins=5, stg_bins=4, hidden=(6, 5), act="tanh"):
    head = HeadSpec(obs_dim, goal_dim, action_dims, action_bins, stg_bins)
    widths = list(hidden) + [head.n_outputs]
    acts = [act] * len(hidden) + ["linear"]
    return DenseNet.create(head.input_dim, widths, acts, seed, head)


def finite_diff(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_fn()
            p[i] = old - h
            down = loss_fn()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a_list, b_list, floor=1e-8):
    worst = 0.0
    for a, b in zip(a_list, b_list):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


@pytest.fixture(scope="session")
def pm_small():
    """A short, weakly trained pointmass Stage 1 run (seconds, not minutes)."""
    ds = generate_demos(EnvConfig(), DemoConfig(), 60, 3)
    train, val = split(ds, 0.2, 3)
    cfg = SftConfig(total_steps=200, val_interval=100, hidden=[32, 32], batch_size=32)
    return ds, train, val, cfg


@pytest.fixture(scope="session")
def pm_ckpts(tmp_path_factory, pm_small):
    ds, train, val, cfg = pm_small
    out = tmp_path_factory.mktemp("pm_small")
    res = sft_train(cfg, train, val, out)
    return out, res


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
