"""Reverse-mode differentiation through the closed-loop cascade

    features(x_k) -> corrector -> u_k = u_nom_k + eps_k -> x_{k+1} = A x_k + B u_k
    -> y_{k+1} = C x_{k+1} -> loss

The cascade is small and fixed, so the backward pass is written out by hand.
Gradients flow through the ROM recursion, through the state-dependent features
and, for the Elman corrector, through the hidden-state recursion. The ROM
matrices are constants; only the network weights get parameter gradients, while
the ROM inputs get adjoints for sensitivity analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .loss import LossWeights, negativity_penalty
from .rom import DiscreteRom, NumericalError


@dataclass(frozen=True)
class CascadeModel:
    """Normalized ROM plus the constant part of the feature map.

    State-dependent features are ``F x - offset`` with ``F = [C; P]`` stacking the
    output matrix and the PCA loadings, ``offset = [0; P mean]``.
    """

    rom: DiscreteRom
    F: np.ndarray
    offset: np.ndarray

    @classmethod
    def build(cls, rom: DiscreteRom, pca=None):
        if pca is None:
            F, off = rom.C, np.zeros(rom.p)
        else:
            P = pca.components_
            F = np.vstack([rom.C, P])
            off = np.concatenate([np.zeros(rom.p), P @ pca.mean_])
        return cls(rom, np.ascontiguousarray(F), off)


@dataclass
class WindowBatch:
    """Windows of ``W`` closed-loop steps for ``B`` samples.

    ``exo[:, t]`` holds the exogenous features (normalized current and feedback
    temperature) at step t, ``u_nom[:, t]`` the normalized nominal losses and
    ``y_target[:, t]`` the normalized measured outputs after the step.
    """

    x0: np.ndarray  # (B, n)
    exo: np.ndarray  # (B, W, e)
    u_nom: np.ndarray  # (B, W, m)
    y_target: np.ndarray  # (B, W, p)

    @property
    def shape(self):
        return self.exo.shape[:2]


@dataclass
class CascadeResult:
    loss: float
    mse: float
    penalty: float
    reg: float
    grad: np.ndarray | None = None
    u_grad: np.ndarray | None = None  # (B, W, m) dL/du at the ROM input
    y_pred: np.ndarray | None = None
    u: np.ndarray | None = None
    eps: np.ndarray | None = None
    x: np.ndarray | None = None  # (B, W, n) states the corrector saw

    def terms(self):
        return {"loss": self.loss, "mse": self.mse, "penalty": self.penalty, "reg": self.reg}


class GradientError(NumericalError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.diagnostics, fh, indent=1)


def backward_cascade(model: CascadeModel, net, batch: WindowBatch, weights: LossWeights,
                     *, need_grad=True, keep=False) -> CascadeResult:
    """Loss over a window batch and its exact gradient w.r.t. the net weights.

    ``net=None`` runs the nominal cascade with zero correction.
    """
    rom = model.rom
    Ad, Bd, C = rom.Ad, rom.Bd, rom.C
    AdT, BdT, CT, FT = Ad.T, Bd.T, C.T, model.F.T
    B, W = batch.shape
    x = np.array(batch.x0, dtype=float)
    stateful = net is not None and net.stateful
    h = np.zeros((B, net.n_hidden)) if stateful else None

    caches, ys, us, es, xs = [], [], [], [], []
    for t in range(W):
        if keep:
            xs.append(x)
        if net is None:
            eps = np.zeros((B, rom.m))
            cache = None
        else:
            f = np.concatenate([batch.exo[:, t], x @ FT - model.offset], axis=1)
            if stateful:
                h, eps, cache = net.step(h, f)
            else:
                eps, cache = net.forward(f)
        u = batch.u_nom[:, t] + eps
        x = x @ AdT + u @ BdT
        ys.append(x @ CT)
        us.append(u)
        es.append(eps)
        caches.append(cache)

    y_pred = np.stack(ys, 1)
    u_all = np.stack(us, 1)
    e_all = np.stack(es, 1)
    err = y_pred - batch.y_target
    mse = float(np.mean(err * err))
    pen = float(np.mean(negativity_penalty(u_all)))
    norms = np.linalg.norm(e_all, axis=-1)
    reg = float(np.mean(norms))
    loss = mse + weights.alpha * pen + weights.beta * reg
    if not np.isfinite(loss):
        diag = {"mse": mse, "penalty": pen, "reg": reg,
                "alpha": weights.alpha, "beta": weights.beta}
        bad = [k for k in ("mse", "penalty", "reg") if not np.isfinite(diag[k])]
        raise GradientError(f"non-finite loss (exploded terms: {', '.join(bad) or 'weighted sum'})", diag)

    res = CascadeResult(loss, mse, pen, reg)
    if keep:
        res.y_pred, res.u, res.eps, res.x = y_pred, u_all, e_all, np.stack(xs, 1)
    if not need_grad:
        return res

    p = rom.p
    scale = 1.0 / (B * W)
    g_theta = None if net is None else np.zeros(net.size)
    g_u_all = np.empty_like(u_all)
    safe = np.where(norms > 0, norms, 1.0)
    g_reg = weights.beta * scale * np.where(norms[..., None] > 0, e_all / safe[..., None], 0.0)
    gx = np.zeros((B, rom.n))
    gh = np.zeros((B, net.n_hidden)) if stateful else None
    for t in range(W - 1, -1, -1):
        gx = gx + (2.0 * scale / p) * err[:, t] @ C
        g_u = gx @ Bd + (2.0 * weights.alpha * scale) * np.minimum(u_all[:, t], 0.0)
        g_u_all[:, t] = g_u
        gx = gx @ Ad
        if net is not None:
            g_eps = g_u + g_reg[:, t]
            if stateful:
                gh, g_f = net.step_backward(caches[t], gh, g_eps, g_theta)
            else:
                _, g_f = net.backward(caches[t], g_eps, g_theta)
            gx = gx + g_f[:, batch.exo.shape[2]:] @ model.F
    res.grad = g_theta
    res.u_grad = g_u_all
    if g_theta is not None and not np.all(np.isfinite(g_theta)):
        raise GradientError("non-finite gradient", {"mse": mse, "penalty": pen, "reg": reg})
    return res


def input_gradients(model, net, batch, weights) -> np.ndarray:
    """Per-channel mean of |dL/du_j| over all steps and samples."""
    res = backward_cascade(model, net, batch, weights)
    return np.mean(np.abs(res.u_grad), axis=(0, 1))


def finite_diff_check(f, grad, point, step=1e-5, n_coords=200, seed=0, floor=1e-6):
    """Largest relative gap between ``grad`` and central differences of ``f``.

    Coordinates are a random subset of size ``n_coords`` (all when fewer). The
    denominator is floored at ``floor * max|grad|`` so vanishing components do
    not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    grad = np.asarray(grad, dtype=float)
    rng = np.random.default_rng(seed)
    idx = np.arange(point.size)
    if point.size > n_coords:
        idx = rng.choice(point.size, n_coords, replace=False)
    scale = max(floor * np.max(np.abs(grad)), np.finfo(float).tiny)
    worst = 0.0
    for i in idx:
        e = np.zeros_like(point)
        e[i] = step
        fd = (f(point + e) - f(point - e)) / (2 * step)
        denom = max(abs(fd), abs(grad[i]), scale)
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst
