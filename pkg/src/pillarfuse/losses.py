"""Training objective: smooth-L1 localization, focal classification, direction.

Terms are summed over their contributing anchors and combined as
(b_loc * L_loc + b_cls * L_cls + b_dir * L_dir) / max(n_pos, 1).  Anchor
states follow the matcher: +1 positive, 0 ignore, -1 negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import tensor as T

_PROB_FLOOR = 1e-7


@dataclass
class LossWeights:
    beta_loc: float = 2.0
    beta_cls: float = 1.0
    beta_dir: float = 0.2
    alpha: float = 0.25
    gamma: float = 2.0
    beta_s: float = 1.0 / 9.0

    def __post_init__(self):
        for name in ("beta_loc", "beta_cls", "beta_dir", "alpha", "gamma", "beta_s"):
            if getattr(self, name) < 0 or (name != "gamma" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


def smooth_l1(residual: T.Tensor, beta: float) -> T.Tensor:
    """Elementwise 0.5 r^2 / beta inside |r| < beta, |r| - beta/2 outside."""
    quad = T.mul(T.mul(residual, residual), 0.5 / beta)
    lin = T.sub(T.tabs(residual), beta / 2)
    return T.where_mask(np.abs(residual.data) < beta, quad, lin)


def localization_loss(pred_deltas: T.Tensor, target_deltas: np.ndarray,
                      pos_mask: np.ndarray, beta_s: float = 1.0 / 9.0) -> T.Tensor:
    """Sum of per-component smooth-L1 over positive anchors.

    pred_deltas is (A, 7); the positive mask zeroes every other anchor's
    contribution while keeping the graph dense.
    """
    residual = T.sub(pred_deltas, T.Tensor(target_deltas.astype(pred_deltas.dtype)))
    per = smooth_l1(residual, beta_s)
    masked = T.mul(per, pos_mask.astype(pred_deltas.dtype)[:, None])
    return T.tsum(masked)


def focal_loss(class_logits: T.Tensor, labels: np.ndarray,
               anchor_states: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> T.Tensor:
    """-alpha (1-p)^gamma log p summed over positive and negative anchors.

    p is the probability of the anchor's true assignment: the sigmoid score
    of its class for positives, one minus the best class score for negatives.
    Ignore-state anchors contribute exactly zero.
    """
    dt = class_logits.dtype
    a = class_logits.shape[0]
    probs = T.sigmoid(class_logits)
    onehot = np.zeros(class_logits.shape, dtype=bool)
    pos = anchor_states > 0
    neg = anchor_states < 0
    onehot[np.arange(a)[pos], np.asarray(labels)[pos]] = True
    p_pos = T.tsum(T.mul(probs, onehot.astype(dt)), axis=1)
    p_neg = T.sub(1.0, T.amax(probs, axis=1))
    p_true = T.where_mask(pos, p_pos, p_neg)
    # ignore anchors read as perfectly classified, which zeroes their term
    p_true = T.masked_fill(p_true, pos | neg, 1.0)
    p_true = T.clip(p_true, _PROB_FLOOR, 1.0)
    weight = T.pow_const(T.sub(1.0, p_true), gamma) if gamma else T.Tensor(
        np.ones(a, dtype=dt))
    term = T.mul(T.mul(weight, T.log(p_true)), -alpha)
    return T.tsum(term)


def direction_loss(dir_logits: T.Tensor, dir_targets: np.ndarray,
                   pos_mask: np.ndarray) -> T.Tensor:
    """Two-bin softmax cross-entropy over positive anchors."""
    dt = dir_logits.dtype
    a = dir_logits.shape[0]
    ls = T.log_softmax(dir_logits, axis=1)
    onehot = np.zeros(dir_logits.shape, dtype=bool)
    pos = np.asarray(pos_mask, dtype=bool)
    onehot[np.arange(a)[pos], np.asarray(dir_targets)[pos]] = True
    picked = T.tsum(T.mul(ls, onehot.astype(dt)), axis=1)
    return T.mul(T.tsum(T.mul(picked, pos.astype(dt))), -1.0)


def total_loss(loc, cls, direction, n_pos: int,
               weights: LossWeights | None = None):
    """Weighted sum over max(n_pos, 1); works on floats or graph tensors."""
    w = weights or LossWeights()
    denom = float(max(int(n_pos), 1))
    if isinstance(loc, T.Tensor) or isinstance(cls, T.Tensor) \
            or isinstance(direction, T.Tensor):
        total = T.add(T.add(T.mul(loc, w.beta_loc), T.mul(cls, w.beta_cls)),
                      T.mul(direction, w.beta_dir))
        return T.mul(total, 1.0 / denom)
    return (w.beta_loc * loc + w.beta_cls * cls + w.beta_dir * direction) / denom
