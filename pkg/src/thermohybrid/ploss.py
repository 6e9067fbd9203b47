"""Static power-loss map and its parameter perturbations.

Each of the ``m`` loss channels dissipates

    u_j = r_j I^2 (1 + k_j (T_fb - T_ref)) + s_j |I|

i.e. a conduction term with a linear temperature coefficient plus a switching
term proportional to the current magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_REF = 298.15
K_BOUND = 0.01


@dataclass(frozen=True)
class LossParams:
    r: np.ndarray  # W/A^2
    k: np.ndarray  # 1/K
    s: np.ndarray  # W/A

    def __post_init__(self):
        for name in ("r", "k", "s"):
            v = np.array(getattr(self, name), dtype=float).reshape(-1)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if not (len(self.r) == len(self.k) == len(self.s)):
            raise ValueError("r, k and s must have one entry per channel")
        if not all(np.all(np.isfinite(v)) for v in (self.r, self.k, self.s)):
            raise ValueError("loss parameters must be finite")
        if np.any(self.r <= 0) or np.any(self.s < 0) or np.any(np.abs(self.k) >= K_BOUND):
            raise ValueError("loss parameters violate r > 0, s >= 0, |k| < 0.01")

    @property
    def m(self) -> int:
        return len(self.r)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.k, self.s])

    @classmethod
    def from_vector(cls, phi) -> "LossParams":
        r, k, s = np.split(np.asarray(phi, dtype=float), 3)
        return cls(r, k, s)

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "k": self.k.tolist(), "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LossParams":
        return cls(d["r"], d["k"], d["s"])


def eval_losses(params: LossParams, current, t_fb, t_ref: float = T_REF) -> np.ndarray:
    """Per-channel losses in W. ``current`` and ``t_fb`` broadcast together; the
    channel axis is appended last."""
    current = np.asarray(current, dtype=float)[..., None]
    dT = np.asarray(t_fb, dtype=float)[..., None] - t_ref
    return params.r * current**2 * (1.0 + params.k * dT) + params.s * np.abs(current)


def clamp_loss_vector(phi, m: int) -> np.ndarray:
    """Project a raw parameter vector onto the valid LossParams region."""
    r, k, s = np.split(np.array(phi, dtype=float), 3)
    tiny = np.finfo(float).tiny
    r = np.maximum(r, tiny)
    k = np.clip(k, -K_BOUND * (1 - 1e-9), K_BOUND * (1 - 1e-9))
    s = np.maximum(s, 0.0)
    return np.concatenate([r, k, s])


def perturb_loss_params(nominal: LossParams, magnitude, delta, seed) -> LossParams:
    """Draw ``phi = phi_nom + e`` with ``e ~ U([m - d, m + d])`` per scalar.

    ``magnitude`` and ``delta`` are signed/unsigned fractions of ``|phi_nom|``
    (scalars or per-parameter arrays of length 3m).
    """
    phi = nominal.to_vector()
    scale = np.abs(phi)
    mag = np.broadcast_to(np.asarray(magnitude, dtype=float), phi.shape) * scale
    half = np.broadcast_to(np.asarray(delta, dtype=float), phi.shape) * scale
    if np.any(half < 0):
        raise ValueError("delta must be nonnegative")
    rng = np.random.default_rng(seed)
    e = rng.uniform(mag - half, mag + half) if np.any(half > 0) else mag
    return LossParams.from_vector(clamp_loss_vector(phi + e, nominal.m))


def true_loss_gap(true_p: LossParams, nominal_p: LossParams, current, t_fb,
                  t_ref: float = T_REF) -> np.ndarray:
    """``g(true) - g(nominal)``: the error an ideal corrector would emit."""
    return eval_losses(true_p, current, t_fb, t_ref) - eval_losses(nominal_p, current, t_fb, t_ref)


def gap_bound(true_sets, nominal_p: LossParams, current_max: float, dT_max: float,
              n_grid: int = 41) -> float:
    """Largest 2-norm of the loss gap over a current/temperature grid, across all
    parameter sets. Recorded as the nominal-model confidence bound."""
    I = np.linspace(-current_max, current_max, n_grid)
    T = T_REF + np.linspace(-dT_max, dT_max, n_grid)
    II, TT = np.meshgrid(I, T)
    worst = 0.0
    for p in true_sets:
        gap = true_loss_gap(p, nominal_p, II, TT)
        worst = max(worst, float(np.max(np.linalg.norm(gap, axis=-1))))
    return worst
