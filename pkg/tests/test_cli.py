import csv
import json
import subprocess
import sys

import pytest

from stepstogo.cli import main
from stepstogo.dataset import read_dataset


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"seed": 2, "sft": {"total_steps": 60, "val_interval": 30, "hidden": [16], "batch_size": 16},
           "selfimprove": {"max_iterations": 2, "n_updates": 2, "batch_size": 8, "eval_every": 1, "eval_episodes": 4},
           "eval": {"n_episodes": 6}}
    p = d / "cfg.json"
    p.write_text(json.dumps(cfg))
    return d, p


def test_gen_data_is_byte_identical_and_inspect_agrees(capsys, tiny_config):
    d, cfg = tiny_config
    code, out1, _ = run(capsys, "gen-data", "--config", str(cfg), "--n", "12", "--out", str(d / "a.stgd"))
    assert code == 0
    run(capsys, "gen-data", "--config", str(cfg), "--n", "12", "--out", str(d / "b.stgd"))
    assert (d / "a.stgd").read_bytes() == (d / "b.stgd").read_bytes()
    code, out2, _ = run(capsys, "inspect", "--data", str(d / "a.stgd"))
    summary, info = json.loads(out1), json.loads(out2)
    assert info["mean_length"] == summary["mean_length"] and info["episodes"] == 12
    code, out3, _ = run(capsys, "gen-data", "--config", str(cfg), "--seed", "3", "--n", "12", "--out", str(d / "c.stgd"))
    assert (d / "c.stgd").read_bytes() != (d / "a.stgd").read_bytes()


def test_full_pipeline(capsys, tiny_config):
    d, cfg = tiny_config
    data = d / "pipe.stgd"
    assert run(capsys, "gen-data", "--config", str(cfg), "--n", "20", "--out", str(data))[0] == 0
    code, out, _ = run(capsys, "train-sft", "--config", str(cfg), "--data", str(data), "--out-dir", str(d / "s1"))
    assert code == 0
    res = json.loads(out)
    assert (d / "s1" / "config.json").exists() and res["success_threshold"] > 0
    bc, stg = d / "s1" / "best_bc.stgc", d / "s1" / "best_stg.stgc"

    code, out, _ = run(capsys, "inspect", "--ckpt", str(bc))
    assert json.loads(out)["metadata"]["env_kind"] == "pointmass"

    code, out, _ = run(capsys, "eval", "--config", str(cfg), "--policy-ckpt", str(bc), "--out", str(d / "e.csv"))
    assert code == 0 and out.startswith("success ")
    rows = list(csv.DictReader((d / "e.csv").open()))
    assert len(rows) == 6 and set(rows[0]) >= {"episode", "success", "length"}

    code, out, _ = run(capsys, "label", "--reward-ckpt", str(stg), "--episodes", str(data), "--out", str(d / "l.csv"))
    assert code == 0
    ds = read_dataset(data)
    with (d / "l.csv").open() as fh:
        n_rows = sum(1 for _ in fh) - 1
    assert n_rows == sum(e.length + 1 for e in ds.episodes) == json.loads(out)["frames"]
    run(capsys, "label", "--reward-ckpt", str(stg), "--episodes", str(data), "--out", str(d / "l.json"))
    assert len(json.loads((d / "l.json").read_text())["frames"]) == n_rows

    code, out, _ = run(capsys, "self-improve", "--config", str(cfg), "--policy-ckpt", str(bc), "--reward-ckpt",
                       str(stg), "--out-dir", str(d / "s2"))
    assert code == 0
    res = json.loads(out)
    assert res["iterations"] == 2 and res["reward_hash_unchanged"] is True
    assert len(res["eval_history"]) == 3
    assert (d / "s2" / "stage2_policy.stgc").exists()
    assert (d / "s2" / "stage2_metrics.jsonl").read_text().count("\n") >= 2


def test_usage_and_config_errors_exit_1(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sft": {"learning_rate": 1}}))
    code, _, err = run(capsys, "gen-data", "--config", str(bad), "--out", str(tmp_path / "x.stgd"))
    assert code == 1 and "unknown" in err
    assert run(capsys, "gen-data")[0] == 1
    assert run(capsys, "no-such-command")[0] == 1


def test_runtime_errors_exit_2(capsys, tmp_path):
    (tmp_path / "junk.stgd").write_bytes(b"not a dataset")
    code, _, err = run(capsys, "inspect", "--data", str(tmp_path / "junk.stgd"))
    assert code == 2 and err.startswith("stg:")
    assert run(capsys, "inspect", "--ckpt", str(tmp_path / "missing.stgc"))[0] == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stepstogo", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
    r = subprocess.run([sys.executable, "-m", "stepstogo", "inspect"], capture_output=True, text=True)
    assert r.returncode == 1
