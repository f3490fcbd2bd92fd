import json

import pytest

from stepstogo.config import RunConfig, load_config, load_config_file
from stepstogo.errors import ConfigError
from stepstogo.rng import derive_seed


def test_defaults_validate():
    cfg = load_config({})
    assert isinstance(cfg, RunConfig)
    assert cfg.selfimprove.gamma == 0.9 and cfg.selfimprove.n_updates == 16
    assert cfg.selfimprove.batch_size == 64


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        load_config({"sft": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError, match="unknown"):
        load_config({"bogus": 1})


@pytest.mark.parametrize(
    "raw",
    [
        {"seed": "1"},
        {"sft": {"total_steps": 1.5}},
        {"selfimprove": {"gamma": True}},
        {"distributed": {"synchronous": 1}},
        {"sft": {"hidden": "64"}},
    ],
)
def test_type_errors(raw):
    with pytest.raises(ConfigError):
        load_config(raw)


def test_section_seeds_derive_from_the_root_seed():
    a, b = load_config({"seed": 5}), load_config({"seed": 5})
    assert a.sft.seed == b.sft.seed == derive_seed(5, "sft") % 2**31
    assert a.sft.seed != a.dataset.seed
    assert load_config({"seed": 5, "sft": {"seed": 9}}).sft.seed == 9
    assert load_config({}, seed=6).sft.seed != a.sft.seed


def test_distributed_constraints():
    with pytest.raises(ConfigError, match="synchronous"):
        load_config({"distributed": {"synchronous": True, "n_actors": 4}})
    with pytest.raises(ConfigError):
        load_config({"distributed": {"topology": "v3"}})
    load_config({"distributed": {"synchronous": True, "n_actors": 1}})


def test_config_file_round_trip(tmp_path):
    cfg = load_config({"seed": 3, "sft": {"total_steps": 10}})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = load_config_file(p)
    assert back.config_hash() == cfg.config_hash()
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(p)
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")
