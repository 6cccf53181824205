"""Training objectives.  Each returns ``(loss, gradient)``; gradients are
taken with respect to softmax outputs (probabilities)."""
from __future__ import annotations

import math
import warnings

import numpy as np

from ..errors import ConfigError
from .layers import ShapeError

PROB_FLOOR = 1e-30
PAIR_CLAMP = 1e-12


class ClampWarning(RuntimeWarning):
    pass


def categorical_cross_entropy(probs, targets):
    """Mean over rows of ``-log p[true class]``.

    ``targets`` is either a one-hot matrix or an integer class vector.
    True-class probabilities below 1e-30 are clamped (with a warning);
    clamped entries get zero gradient.
    """
    probs = np.asarray(probs)
    m = len(probs)
    if np.ndim(targets) == 1:
        idx = np.asarray(targets, dtype=np.int64)
    else:
        if np.shape(targets) != probs.shape:
            raise ShapeError(f"targets {np.shape(targets)} vs probabilities {probs.shape}")
        idx = np.asarray(targets).argmax(axis=1)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= probs.shape[1]:
        raise ShapeError("class index outside the head's outputs")
    rows = np.arange(m)
    p_true = probs[rows, idx]
    small = p_true < PROB_FLOOR
    if small.any():
        warnings.warn(f"{small.sum()} true-class probabilities clamped to {PROB_FLOOR}", ClampWarning)
    loss = -np.log(np.maximum(p_true, PROB_FLOOR)).mean()
    grad = np.zeros_like(probs)
    grad[rows, idx] = np.where(small, 0.0, -1.0 / (m * np.maximum(p_true, PROB_FLOOR)))
    return float(loss), grad


def pairwise_cluster_loss(S, probs):
    """Binary cross-entropy between similarities and pair co-assignment.

    ``p_ij = probs_i . probs_j`` models the probability that samples i and j
    share a cluster.  The loss is ``-(1/W^2) sum_ij [S_ij log p_ij +
    (1 - S_ij) log(1 - p_ij)]`` over all ordered pairs, diagonal included,
    with ``p_ij`` clamped to [1e-12, 1 - 1e-12].
    """
    S = np.asarray(S, dtype=probs.dtype)
    w = len(probs)
    if S.shape != (w, w):
        raise ShapeError(f"similarity matrix {S.shape} does not match batch of {w}")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-9:
        raise ConfigError("similarity matrix is not symmetric")
    p = probs @ probs.T
    pc = np.clip(p, PAIR_CLAMP, 1 - PAIR_CLAMP)
    loss = -(S * np.log(pc) + (1 - S) * np.log1p(-pc)).sum() / (w * w)
    g = -(S / pc - (1 - S) / (1 - pc)) / (w * w)
    g[(p < PAIR_CLAMP) | (p > 1 - PAIR_CLAMP)] = 0.0
    grad = (g + g.T) @ probs
    return float(loss), grad


def consistency_loss(outputs, augmented):
    """Mean over samples of the squared distance between head outputs on a
    batch and on its augmented copy.  Gradients flow into both arguments."""
    if np.shape(outputs) != np.shape(augmented):
        raise ShapeError(f"consistency: {np.shape(outputs)} vs {np.shape(augmented)}")
    m = len(outputs)
    if m == 0:
        return 0.0, np.zeros_like(outputs), np.zeros_like(augmented)
    d = outputs - augmented
    loss = (d * d).sum() / m
    return float(loss), 2 * d / m, -2 * d / m


def ramp_up_weight(epoch: float, ramp_length: float, scale: float) -> float:
    """Sigmoid-shaped ramp-up ``scale * exp(-5 (1 - epoch/ramp_length)^2)``,
    flat at ``scale`` once ``epoch >= ramp_length``."""
    if ramp_length <= 0 or scale <= 0 or epoch < 0:
        raise ConfigError("ramp-up needs epoch >= 0, ramp_length > 0, scale > 0")
    frac = min(epoch, ramp_length) / ramp_length
    return scale * math.exp(-5.0 * (1.0 - frac) ** 2)
