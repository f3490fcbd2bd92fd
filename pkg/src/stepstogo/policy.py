"""Acting with the action head: greedy decoding and inverse-CDF sampling."""
from __future__ import annotations

import numpy as np

from .dataset import ActionBinning
from .nnet import DenseNet, action_logits, log_softmax, softmax


def sample_bins(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row of ``probs`` using the uniforms ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def act(net: DenseNet, binning: ActionBinning, obs, goal, u=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(action, bin indices)``; greedy when ``u`` is None, sampled otherwise."""
    logits = action_logits(net, obs, goal)
    if u is None:
        idx = np.argmax(logits, axis=-1)
    else:
        idx = sample_bins(softmax(logits), u)
    return binning.values(idx), idx


def action_log_prob(net: DenseNet, binning: ActionBinning, obs, goal, action) -> np.ndarray:
    """Sum over action dimensions of log p(bin | o, g), one value per row."""
    lp = log_softmax(action_logits(net, obs, goal))
    idx = binning.index(action)
    return np.take_along_axis(lp, idx[..., None], axis=-1)[..., 0].sum(axis=-1)
