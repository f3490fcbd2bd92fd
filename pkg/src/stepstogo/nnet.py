"""Minimal dense network stack: forward/backward, losses, AdamW, checkpoints.

Tensors are plain numpy ``float64`` arrays in memory.  A single input is a
1-D vector of length ``input_dim``; batches are 2-D ``(n, input_dim)``.
Checkpoints store parameters as little-endian float32.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from .rng import derive_rng

ACTIVATIONS = ("tanh", "relu", "linear")

CKPT_MAGIC = b"STGC"
CKPT_VERSION = 1

# Task tags appended to the network input; they select which head is read.
TASK_ACTION = 0
TASK_STG = 1
N_TASKS = 2


@dataclass(frozen=True)
class HeadSpec:
    """Layout of the output vector of a shared-trunk, two-head network.

    The output is ``action_dims`` consecutive blocks of ``action_bins`` logits
    followed by ``stg_bins`` steps-to-go logits.
    """

    obs_dim: int
    goal_dim: int
    action_dims: int
    action_bins: int
    stg_bins: int

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.goal_dim + N_TASKS

    @property
    def n_outputs(self) -> int:
        return self.action_dims * self.action_bins + self.stg_bins

    @property
    def stg_offset(self) -> int:
        return self.action_dims * self.action_bins

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "goal_dim": self.goal_dim,
            "action_dims": self.action_dims,
            "action_bins": self.action_bins,
            "stg_bins": self.stg_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(**{k: int(d[k]) for k in ("obs_dim", "goal_dim", "action_dims", "action_bins", "stg_bins")})


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str


@dataclass
class DenseNet:
    layers: list[DenseLayer]
    input_dim: int
    head_spec: HeadSpec | None = None

    def __post_init__(self):
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.weight.shape[1] != prev:
                raise ConfigError(f"layer {i}: weight shape {layer.weight.shape} does not take input width {prev}")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ConfigError(f"layer {i}: bias shape {layer.bias.shape} does not match weight")
            prev = layer.weight.shape[0]
        if self.head_spec is not None:
            if self.head_spec.input_dim != self.input_dim:
                raise ConfigError("head spec input width does not match network input_dim")
            if self.head_spec.n_outputs != prev:
                raise ConfigError("head spec output width does not match final layer")

    @classmethod
    def create(
        cls,
        input_dim: int,
        widths: list[int],
        activations: list[str],
        seed: int,
        head_spec: HeadSpec | None = None,
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases, one derived stream per layer."""
        if len(widths) != len(activations):
            raise ConfigError("need one activation per layer")
        layers = []
        fan_in = input_dim
        for i, (w, act) in enumerate(zip(widths, activations)):
            limit = math.sqrt(6.0 / (fan_in + w))
            rng = derive_rng(seed, "nnet.init", i)
            weight = rng.uniform(-limit, limit, size=(w, fan_in))
            layers.append(DenseLayer(weight, np.zeros(w), act))
            fan_in = w
        return cls(layers, input_dim, head_spec)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def copy(self) -> "DenseNet":
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return DenseNet(layers, self.input_dim, self.head_spec)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ConfigError(f"input has width {x.shape[-1]}, network expects {net.input_dim}")
    return x, single


def forward(net: DenseNet, x) -> np.ndarray:
    """Logits for a single input vector or a batch of rows."""
    a, single = _as_batch(net, x)
    for layer in net.layers:
        a = _act(layer.activation, a @ layer.weight.T + layer.bias)
    return a[0] if single else a


def forward_cache(net: DenseNet, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass that keeps every layer's input and output."""
    a, _ = _as_batch(net, x)
    acts = [a]
    for layer in net.layers:
        a = _act(layer.activation, a @ layer.weight.T + layer.bias)
        acts.append(a)
    return a, acts


def backward(net: DenseNet, acts: list[np.ndarray], upstream: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given cached activations and dL/d(output).

    Returns gradients in ``net.params()`` order, summed over the batch.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != acts[-1].shape:
        raise ConfigError(f"upstream gradient shape {upstream.shape} != output shape {acts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    delta = upstream
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        out = acts[i + 1]
        if layer.activation == "tanh":
            delta = delta * (1.0 - out * out)
        elif layer.activation == "relu":
            delta = delta * (out > 0.0)
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layer.weight
    return grads


def log_softmax(logits) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 1:
        raise ConfigError("log_softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("log_softmax received non-finite logits")
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, target_index: int) -> tuple[float, np.ndarray]:
    """Categorical NLL of one target and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_index < z.shape[-1]:
        raise ConfigError(f"target index {target_index} outside [0, {z.shape[-1]})")
    lp = log_softmax(z)
    grad = np.exp(lp)
    grad[target_index] -= 1.0
    return float(-lp[target_index]), grad


def batch_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise NLL and per-row gradient for a ``(n, k)`` logit matrix."""
    lp = log_softmax(logits)
    rows = np.arange(lp.shape[0])
    grad = np.exp(lp)
    grad[rows, targets] -= 1.0
    return -lp[rows, targets], grad


# ---------------------------------------------------------------- heads


def build_input(obs, goal, task: int) -> np.ndarray:
    """Concatenate observation(s), goal(s) and a one-hot task tag."""
    obs = np.asarray(obs, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if obs.ndim == 1:
        tag = np.zeros(N_TASKS)
        tag[task] = 1.0
        return np.concatenate([obs, goal, tag])
    n = obs.shape[0]
    if goal.ndim == 1:
        goal = np.broadcast_to(goal, (n, goal.shape[0]))
    tag = np.zeros((n, N_TASKS))
    tag[:, task] = 1.0
    return np.concatenate([obs, goal, tag], axis=1)


def action_logits(net: DenseNet, obs, goal) -> np.ndarray:
    """Per-dimension action logits, shape ``(..., action_dims, action_bins)``."""
    hs = net.head_spec
    out = forward(net, build_input(obs, goal, TASK_ACTION))
    out = out[..., : hs.stg_offset]
    return out.reshape(out.shape[:-1] + (hs.action_dims, hs.action_bins))


def stg_logits(net: DenseNet, obs, goal) -> np.ndarray:
    hs = net.head_spec
    out = forward(net, build_input(obs, goal, TASK_STG))
    return out[..., hs.stg_offset :]


# ---------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], **hyper) -> "AdamWState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
            [m.copy() for m in self.m], [v.copy() for v in self.v],
        )


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState, names: list[str] | None = None) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or state.m[i].shape != params[i].shape:
            raise ConfigError(f"shape mismatch for tensor {i}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"tensor {i}"
            raise NumericError(f"non-finite gradient in {label}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(net: DenseNet, metadata: dict | None = None) -> bytes:
    meta = dict(metadata or {})
    meta["architecture"] = {
        "input_dim": net.input_dim,
        "activations": [l.activation for l in net.layers],
        "head_spec": net.head_spec.to_dict() if net.head_spec else None,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    names = net.param_names()
    buf.write(struct.pack("<I", len(names)))
    for name, p in zip(names, net.params()):
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated data")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> tuple[DenseNet, dict]:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        arch = meta["architecture"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        r.take(nlen)
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise FormatError("corrupt tensor record")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
        tensors.append(arr)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    acts = arch["activations"]
    if count != 2 * len(acts):
        raise FormatError("tensor count does not match architecture")
    layers = [DenseLayer(tensors[2 * i], tensors[2 * i + 1], a) for i, a in enumerate(acts)]
    head = HeadSpec.from_dict(arch["head_spec"]) if arch.get("head_spec") else None
    try:
        net = DenseNet(layers, int(arch["input_dim"]), head)
    except ConfigError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
    meta.pop("architecture")
    return net, meta


def save_checkpoint(net: DenseNet, metadata: dict | None, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, metadata))


def load_checkpoint(path) -> tuple[DenseNet, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def snapshot32(net: DenseNet) -> DenseNet:
    """Copy of ``net`` with parameters rounded through float32 (checkpoint precision)."""
    out = net.copy()
    for p in out.params():
        p[...] = p.astype(np.float32).astype(np.float64)
    return out


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def describe(net: DenseNet) -> dict[str, Any]:
    return {
        "input_dim": net.input_dim,
        "layers": [[list(l.weight.shape), l.activation] for l in net.layers],
        "head_spec": net.head_spec.to_dict() if net.head_spec else None,
        "param_hash": net.param_hash(),
    }
