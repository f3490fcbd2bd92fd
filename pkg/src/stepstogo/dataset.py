"""Imitation dataset: generation, binary storage, tuple sampling, binning."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .envs import (
    REASON_GT_SUCCESS,
    REASON_MAX_LENGTH,
    REASON_NONE,
    DemoConfig,
    EnvConfig,
    make_demonstrator,
    make_env,
    rollout,
)
from .errors import ConfigError, DataError, FormatError
from .rng import derive_rng, derive_seed

log = logging.getLogger(__name__)

DATA_MAGIC = b"STGD"
DATA_VERSION = 1

REASON_DETECTOR_SUCCESS = "detector_success"
REASON_OPERATOR_ABORT = "operator_abort"
REASON_CODES = {
    REASON_NONE: 0,
    REASON_GT_SUCCESS: 1,
    REASON_MAX_LENGTH: 2,
    REASON_DETECTOR_SUCCESS: 3,
    REASON_OPERATOR_ABORT: 4,
}
REASON_NAMES = {v: k for k, v in REASON_CODES.items()}

# steps-to-go range / bin count per env kind
DEFAULT_STG_BINNING = {"pointmass": (200, 50), "gridworld": (64, 64)}
# lower bound on the learned success threshold, in steps
DEFAULT_SUCCESS_THRESHOLD = {"pointmass": 4.0, "gridworld": 0.75}


@dataclass(frozen=True)
class Binning:
    """Uniform bins over ``[0, max_steps]``; bin ``b`` stands for its midpoint."""

    max_steps: int
    num_bins: int

    def __post_init__(self):
        if self.max_steps <= 0 or self.num_bins <= 0:
            raise ConfigError("binning needs positive max_steps and num_bins")

    @property
    def width(self) -> float:
        return self.max_steps / self.num_bins

    def index(self, steps):
        idx = np.floor(np.asarray(steps, dtype=np.float64) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)

    def midpoints(self) -> np.ndarray:
        return (np.arange(self.num_bins) + 0.5) * self.width

    def to_dict(self) -> dict:
        return {"max_steps": self.max_steps, "num_bins": self.num_bins}


def bin_index(steps: int, binning: Binning) -> int:
    if steps < 0:
        raise ConfigError("steps-to-go must be non-negative")
    return int(binning.index(steps))


def default_binning(env_kind: str) -> Binning:
    return Binning(*DEFAULT_STG_BINNING[env_kind])


@dataclass(frozen=True)
class ActionBinning:
    """``num_bins`` evenly spaced levels spanning ``[-a_max, a_max]`` per dimension."""

    a_max: float
    num_bins: int = 21

    @property
    def spacing(self) -> float:
        return 2.0 * self.a_max / (self.num_bins - 1)

    def index(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64)
        idx = np.rint((a + self.a_max) / self.spacing).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)

    def values(self, idx) -> np.ndarray:
        return -self.a_max + np.asarray(idx, dtype=np.float64) * self.spacing

    def out_of_range(self, action) -> int:
        return int(np.sum(np.abs(np.asarray(action)) > self.a_max + 1e-12))


@dataclass
class EpisodeRecord:
    observations: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, action_dim)
    goal: np.ndarray
    success: bool
    reason: str
    labels: np.ndarray  # (T+1,) steps-to-go

    @property
    def length(self) -> int:
        return len(self.actions)

    def __post_init__(self):
        T = len(self.actions)
        if len(self.observations) != T + 1 or len(self.labels) != T + 1:
            raise DataError("episode arrays have inconsistent lengths")


@dataclass
class SupervisedTuple:
    obs: np.ndarray
    action: np.ndarray | None  # None for the terminal observation
    goal: np.ndarray
    steps_to_go: int


@dataclass
class Dataset:
    header: dict
    episodes: list[EpisodeRecord] = field(default_factory=list)

    @property
    def obs_dim(self) -> int:
        return int(self.header["obs_dim"])

    @property
    def action_dim(self) -> int:
        return int(self.header["action_dim"])

    @property
    def binning(self) -> Binning:
        return Binning(**self.header["binning"])

    @property
    def total_steps(self) -> int:
        return sum(e.length for e in self.episodes)

    def mean_length(self) -> float:
        return self.total_steps / max(1, len(self.episodes))

    def with_episodes(self, episodes: list[EpisodeRecord], **extra) -> "Dataset":
        header = dict(self.header)
        header.update(extra)
        header["counts"] = {"episodes": len(episodes), "steps": sum(e.length for e in episodes)}
        return Dataset(header, episodes)


def success_labels(T: int) -> np.ndarray:
    return np.arange(T, -1, -1, dtype=np.int64)


def generate_demos(
    env_cfg: EnvConfig,
    demo_cfg: DemoConfig,
    n_episodes: int,
    seed: int,
    binning: Binning | None = None,
    config_hash: str = "",
) -> Dataset:
    """Roll out the scripted demonstrator for ``n_episodes`` successful episodes."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    env = make_env(env_cfg, terminate_on_success=True)
    demo = make_demonstrator(env_cfg, demo_cfg)
    binning = binning or default_binning(env_cfg.kind)
    episodes, failures, attempt = [], 0, 0
    while len(episodes) < n_episodes:
        ep_seed = derive_seed(seed, "dataset.episode", attempt)
        attempt += 1
        obs, acts, goal, reason = rollout(env, demo, ep_seed)
        if reason != REASON_GT_SUCCESS:
            failures += 1
            if attempt >= 20 and failures > attempt / 2:
                raise DataError(f"demonstrator failed {failures}/{attempt} rollouts; aborting")
            continue
        T = len(acts)
        episodes.append(
            EpisodeRecord(np.array(obs), np.array(acts).reshape(T, env.action_dim), goal, True, reason, success_labels(T))
        )
    if failures:
        log.info("regenerated %d failed demonstrator rollouts", failures)
    header = {
        "tool_version": __version__,
        "config_hash": config_hash,
        "env": asdict(env_cfg),
        "demonstrator": {**asdict(demo_cfg), "resolved_kind": demo.kind},
        "seed": seed,
        "obs_dim": env.obs_dim,
        "goal_dim": env.goal_dim,
        "action_dim": env.action_dim,
        "a_max": env.a_max,
        "binning": binning.to_dict(),
        "split": "all",
        "regenerated": failures,
        "counts": {"episodes": len(episodes), "steps": sum(e.length for e in episodes)},
    }
    return Dataset(header, episodes)


# ---------------------------------------------------------------- file format


def dataset_bytes(ds: Dataset) -> bytes:
    header = dict(ds.header)
    header["counts"] = {"episodes": len(ds.episodes), "steps": ds.total_steps}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<I", DATA_VERSION))
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for ep in ds.episodes:
        buf.write(struct.pack("<I", ep.length))
        buf.write(np.ascontiguousarray(ep.goal, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ep.observations, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ep.actions, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ep.labels, dtype="<u4").tobytes())
        buf.write(struct.pack("<BB", int(ep.success), REASON_CODES[ep.reason]))
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:4] != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if len(data) < 16:
        raise FormatError("truncated dataset header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != DATA_VERSION:
        raise FormatError(f"dataset version {version} unsupported")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    pos = 16 + hlen
    if pos > len(data):
        raise FormatError("truncated dataset header")
    try:
        header = json.loads(data[16:pos].decode("utf-8"))
        n_eps = int(header["counts"]["episodes"])
        od, gd, ad = int(header["obs_dim"]), int(header["goal_dim"]), int(header["action_dim"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"corrupt dataset header: {exc}") from exc

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated episode record")
        out = data[pos : pos + n]
        pos += n
        return out

    episodes = []
    for _ in range(n_eps):
        (T,) = struct.unpack("<I", take(4))
        goal = np.frombuffer(take(8 * gd), dtype="<f8").astype(np.float64)
        obs = np.frombuffer(take(8 * od * (T + 1)), dtype="<f8").reshape(T + 1, od).astype(np.float64)
        acts = np.frombuffer(take(8 * ad * T), dtype="<f8").reshape(T, ad).astype(np.float64)
        labels = np.frombuffer(take(4 * (T + 1)), dtype="<u4").astype(np.int64)
        success, reason = struct.unpack("<BB", take(2))
        if reason not in REASON_NAMES:
            raise FormatError(f"unknown termination code {reason}")
        episodes.append(EpisodeRecord(obs, acts, goal, bool(success), REASON_NAMES[reason], labels))
    if pos != len(data):
        raise FormatError("trailing bytes after last episode")
    if sum(e.length for e in episodes) != int(header["counts"]["steps"]):
        raise FormatError("header step count does not match payload")
    return Dataset(header, episodes)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- sampling


def sample_tuple(ds: Dataset, rng: np.random.Generator, include_terminal: bool = False) -> SupervisedTuple:
    """Episode-uniform, then timestep-uniform sample of ``(o_t, a_t, g, t' - t)``.

    With ``include_terminal`` the final observation (no action, label 0 for a
    successful episode) is also eligible; that is only meaningful for the
    steps-to-go objective.
    """
    if not ds.episodes:
        raise DataError("cannot sample from an empty dataset")
    ep = ds.episodes[int(rng.integers(len(ds.episodes)))]
    hi = ep.length + 1 if include_terminal else ep.length
    if hi == 0:
        raise DataError("episode has no sampleable timesteps")
    t = int(rng.integers(hi))
    action = ep.actions[t] if t < ep.length else None
    return SupervisedTuple(ep.observations[t], action, ep.goal, int(ep.labels[t]))


class TupleIndex:
    """Flattened view of a dataset for fast vectorized batch sampling.

    Uses the same two-level (episode, then timestep) distribution as
    ``sample_tuple``.
    """

    def __init__(self, ds: Dataset):
        if not ds.episodes:
            raise DataError("cannot index an empty dataset")
        self.lengths = np.array([e.length for e in ds.episodes], dtype=np.int64)
        self.obs_offsets = np.concatenate([[0], np.cumsum(self.lengths + 1)])[:-1]
        self.act_offsets = np.concatenate([[0], np.cumsum(self.lengths)])[:-1]
        self.obs = np.concatenate([e.observations for e in ds.episodes])
        self.actions = np.concatenate([e.actions for e in ds.episodes])
        self.labels = np.concatenate([e.labels for e in ds.episodes])
        self.goals = np.stack([e.goal for e in ds.episodes])
        self.n_episodes = len(ds.episodes)

    def sample(self, rng: np.random.Generator, n: int, include_terminal: bool):
        ep = rng.integers(self.n_episodes, size=n)
        hi = self.lengths[ep] + (1 if include_terminal else 0)
        t = np.minimum((rng.random(n) * hi).astype(np.int64), hi - 1)
        return self.gather(ep, t)

    def gather(self, ep: np.ndarray, t: np.ndarray):
        oi = self.obs_offsets[ep] + t
        ai = self.act_offsets[ep] + np.minimum(t, self.lengths[ep] - 1)
        return self.obs[oi], self.actions[ai], self.goals[ep], self.labels[oi]

    def all_states(self, include_terminal: bool):
        """Every (episode, t) pair in deterministic order."""
        eps, ts = [], []
        for i, T in enumerate(self.lengths):
            n = T + 1 if include_terminal else T
            eps.append(np.full(n, i))
            ts.append(np.arange(n))
        return self.gather(np.concatenate(eps), np.concatenate(ts))


def split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Episode-level train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in (0, 1)")
    n = len(ds.episodes)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise DataError(f"split of {n} episodes at {val_fraction} leaves an empty partition")
    perm = derive_rng(seed, "dataset.split").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    train = ds.with_episodes([ds.episodes[i] for i in train_idx], split="train")
    val = ds.with_episodes([ds.episodes[i] for i in val_idx], split="val")
    return train, val


def subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform episode-level subsample keeping ``round(n * fraction)`` episodes (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    n = len(ds.episodes)
    k = max(1, int(round(n * fraction)))
    if k == n:
        return ds.with_episodes(list(ds.episodes))
    keep = np.sort(derive_rng(seed, "dataset.subsample").permutation(n)[:k])
    return ds.with_episodes([ds.episodes[i] for i in keep], subsample_fraction=fraction)
