"""Training losses: occupancy BCE and quantile-weighted MSE."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, make_node
from .errors import ShapeMismatch

BCE_EPS = 1e-7


def bce_loss(pred_probs, labels, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over candidates, probabilities clamped to [eps, 1-eps]."""
    pred_probs = ag.as_tensor(pred_probs)
    p = pred_probs.data
    o = np.asarray(labels, dtype=p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64)
    if p.size != o.size:
        raise ShapeMismatch(f"{p.size} probabilities for {o.size} labels")
    o = o.reshape(p.shape)
    n = p.size
    pc = np.clip(p, eps, 1.0 - eps)
    value = -np.mean(o * np.log(pc) + (1.0 - o) * np.log1p(-pc))
    inside = (p > eps) & (p < 1.0 - eps)

    def bw(g):
        return (g * inside * (-(o / pc) + (1.0 - o) / (1.0 - pc)) / n,)

    return make_node(np.asarray(value), (pred_probs,), bw)


def wmse_weights(errors: np.ndarray, tau: float, w_high: float, w_low: float):
    """Per-point weights; the threshold is the linear-interpolation tau-quantile."""
    threshold = np.quantile(errors, tau, method="linear")
    return np.where(errors > threshold, w_high, w_low), threshold


def wmse_loss(recolored, enhanced, tau: float = 0.4, w_high: float = 2.0,
              w_low: float = 0.5) -> Tensor:
    """``mean_i w_i * ||recolored_i - enhanced_i||^2`` with quantile-thresholded weights.

    The weights are held constant in the backward pass.
    """
    recolored, enhanced = ag.as_tensor(recolored), ag.as_tensor(enhanced)
    if recolored.shape != enhanced.shape:
        raise ShapeMismatch(f"shapes {recolored.shape} and {enhanced.shape} differ")
    diff = recolored.data - enhanced.data
    sq = np.sum(diff * diff, axis=1)
    w, _ = wmse_weights(np.sqrt(sq), tau, w_high, w_low)
    n = sq.shape[0]
    value = np.sum(w * sq) / n

    def bw(g):
        gr = g * 2.0 * w[:, None] * diff / n
        return gr, -gr

    return make_node(np.asarray(value), (recolored, enhanced), bw)
