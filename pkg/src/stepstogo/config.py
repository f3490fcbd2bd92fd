"""Run configuration: one JSON document, strictly validated.

Every field has a default; unknown keys are rejected.  A single top-level
``seed`` feeds every component whose section does not set its own.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .envs import DemoConfig, EnvConfig
from .errors import ConfigError
from .rng import derive_seed
from .selfimprove import SelfImproveConfig
from .sft import SftConfig


@dataclass
class DatasetConfig:
    n_episodes: int = 1000
    seed: int = 0
    val_fraction: float = 0.1
    stg_max_steps: int | None = None
    stg_bins: int | None = None
    demonstrator: DemoConfig = field(default_factory=DemoConfig)


@dataclass
class EvalConfig:
    n_episodes: int = 100
    seed: int = 0
    greedy: bool = False


@dataclass
class DistributedConfig:
    topology: str = "v2"
    n_actors: int = 1
    host: str = "127.0.0.1"
    coordinator_port: int = 7401
    replay_port: int = 7402
    reward_port: int = 7403
    learner_port: int = 7404
    synchronous: bool = False
    async_success_check: bool = True
    step_time: float = 0.0
    in_flight: str = "discard"
    phase_timeout: float = 120.0
    poll_interval: float = 0.01
    policy_ckpt: str | None = None
    reward_ckpt: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.topology not in ("v1", "v2"):
            raise ConfigError("topology must be 'v1' or 'v2'")
        if self.in_flight not in ("discard", "complete"):
            raise ConfigError("in_flight must be 'discard' or 'complete'")
        if self.n_actors < 1:
            raise ConfigError("n_actors must be >= 1")
        if self.synchronous and self.n_actors != 1:
            raise ConfigError("synchronous mode requires exactly one actor")


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    selfimprove: SelfImproveConfig = field(default_factory=SelfImproveConfig)
    distributed: DistributedConfig = field(default_factory=DistributedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]


SEEDED_SECTIONS = ("dataset", "sft", "selfimprove", "eval")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _convert(a, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{where}: {value!r} matches none of {args}")
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in section {where or '<root>'!r}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(data: dict | None = None, seed: int | None = None) -> RunConfig:
    """Validate a raw JSON dict into a RunConfig, deriving unset section seeds."""
    data = dict(data or {})
    if seed is not None:
        data["seed"] = seed
    cfg = from_dict(RunConfig, data)
    for name in SEEDED_SECTIONS:
        if "seed" not in (data.get(name) or {}):
            getattr(cfg, name).seed = derive_seed(cfg.seed, name) % (2**31)
    return cfg


def load_config_file(path, seed: int | None = None) -> RunConfig:
    if path is None:
        return load_config({}, seed)
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return load_config(raw, seed)
