"""Physics-informed training loss: output MSE, negative-loss penalty and a
correction-norm regularizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # negativity penalty
    beta: float = 1e-3  # correction 2-norm (unsquared)
    zeta: float = 1.0  # confidence bound on the loss gap, metadata only

    def __post_init__(self):
        for name in ("alpha", "beta", "zeta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")

    def to_dict(self):
        return asdict(self)


def negativity_penalty(u):
    """``sum_i u_i^2 [u_i < 0]`` over the last axis."""
    neg = np.minimum(u, 0.0)
    return np.sum(neg * neg, axis=-1)


def loss_terms(y_target, y_pred, u_corrected, correction):
    """Unweighted per-sample (mse, penalty, norm), each averaged over leading axes."""
    err = np.asarray(y_pred) - np.asarray(y_target)
    mse = np.mean(err * err)
    pen = np.mean(negativity_penalty(np.asarray(u_corrected)))
    reg = np.mean(np.linalg.norm(np.asarray(correction), axis=-1))
    return float(mse), float(pen), float(reg)


def physics_loss(y_target, y_pred, u_corrected, correction, weights: LossWeights) -> float:
    mse, pen, reg = loss_terms(y_target, y_pred, u_corrected, correction)
    return mse + weights.alpha * pen + weights.beta * reg
