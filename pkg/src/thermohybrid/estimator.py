"""Scikit-learn style front end for the hybrid loss corrector."""

from __future__ import annotations

import json
import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import CascadeModel, WindowBatch, backward_cascade
from .net import PcaBasis, net_from_dict
from .ploss import T_REF, LossParams, eval_losses
from .rom import DiscreteRom, normalize
from .train import TrainConfig, Trainer, prepare, rollout

log = logging.getLogger(__name__)


def check_profiles(X, y=None, *, n_outputs=None):
    """Validate ``X`` of shape (N, K, 2) = (current, feedback temperature) and
    optional ``y`` of shape (N, K, p). 2-D inputs are treated as one profile."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != 2:
        raise ValueError(f"X must have shape (n_profiles, n_steps, 2), got {X.shape}")
    if X.shape[1] < 2:
        raise ValueError("profiles need at least two steps")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[None]
    if y.shape[:2] != X.shape[:2]:
        raise ValueError(f"y has shape {y.shape}, incompatible with X {X.shape}")
    if n_outputs is not None and y.shape[-1] != n_outputs:
        raise ValueError(f"y must have {n_outputs} outputs, got {y.shape[-1]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return X, y


def loss_scale(nominal: LossParams, i_max, dT_max, headroom, t_ref=T_REF):
    """Per-channel normalization bound ``headroom * g_nom(I_max, T_ref + dT_max)``."""
    return headroom * eval_losses(nominal, i_max, t_ref + dT_max, t_ref)


class HybridLossCorrector(BaseEstimator):
    """Learns an additive correction of a nominal power-loss model from
    temperature measurements, by backpropagating through a thermal ROM.

    ``fit(X, y)`` takes profiles ``X[..., 0]`` current (A), ``X[..., 1]`` measured
    feedback temperature (K) and the measured POI temperatures ``y`` (K).
    ``predict`` returns hybrid temperature estimates and ``predict_losses`` the
    corrected losses (W).
    """

    def __init__(self, rom: DiscreteRom | None = None, nominal_losses: LossParams | None = None, *,
                 net="fnn", bootstrap=True, epochs=6000, n_b=60, lr=0.01, lr_decay=0.9999,
                 n_seq=50, window=1, batch_size=256, buffer_factor=3.0, sample_stride=10,
                 val_every=1, alpha=1.0, beta=1e-3, zeta=1.0, i_max=800.0, u_headroom=2.0,
                 dT_max=150.0, fb_index=0, head_hidden=(), use_head=False, random_state=0):
        self.rom = rom
        self.nominal_losses = nominal_losses
        self.net = net
        self.bootstrap = bootstrap
        self.epochs = epochs
        self.n_b = n_b
        self.lr = lr
        self.lr_decay = lr_decay
        self.n_seq = n_seq
        self.window = window
        self.batch_size = batch_size
        self.buffer_factor = buffer_factor
        self.sample_stride = sample_stride
        self.val_every = val_every
        self.alpha = alpha
        self.beta = beta
        self.zeta = zeta
        self.i_max = i_max
        self.u_headroom = u_headroom
        self.dT_max = dT_max
        self.fb_index = fb_index
        self.head_hidden = head_hidden
        self.use_head = use_head
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(net=self.net, bootstrap=self.bootstrap, epochs=self.epochs, n_b=self.n_b,
                           lr=self.lr, lr_decay=self.lr_decay, n_seq=self.n_seq, window=self.window,
                           batch_size=self.batch_size, buffer_factor=self.buffer_factor,
                           sample_stride=self.sample_stride, val_every=self.val_every,
                           alpha=self.alpha, beta=self.beta, zeta=self.zeta, seed=self.random_state,
                           head_hidden=tuple(self.head_hidden), use_head=self.use_head)

    def _prepare(self, X, y=None, ids=None):
        return prepare(X[..., 0], X[..., 1], y, self.nominal_losses, self.transform_,
                       i_max=self.i_max, fb_index=self.fb_index, ids=ids)

    def setup(self, X, y, eval_set=None):
        """Normalize, fit the PCA basis and build a :class:`Trainer` without training."""
        if self.rom is None or self.nominal_losses is None:
            raise ValueError("rom and nominal_losses must be provided")
        X, y = check_profiles(X, y, n_outputs=self.rom.p)
        if eval_set is None:
            log.warning("no eval_set given, validating on the training profiles")
            Xv, yv = X, y
        else:
            Xv, yv = check_profiles(*eval_set, n_outputs=self.rom.p)
        cfg = self._train_config()
        u_max = loss_scale(self.nominal_losses, self.i_max, self.dT_max, self.u_headroom)
        self.rom_bar_, self.transform_ = normalize(self.rom, u_max)
        train = self._prepare(X, y)
        val = self._prepare(Xv, yv)
        nominal = rollout(CascadeModel.build(self.rom_bar_), None, train, cfg.weights)
        self.pca_ = PcaBasis(3).fit(nominal.x)
        self.model_ = CascadeModel.build(self.rom_bar_, self.pca_)
        return Trainer(cfg, self.model_, train, val, nominal_states=nominal.x)

    def fit(self, X, y, eval_set=None, callback=None):
        trainer = self.setup(X, y, eval_set)
        trainer.run(callback=callback)
        return self._finish(trainer)

    def _finish(self, trainer):
        self.trainer_ = trainer
        self.net_ = trainer.best_net()
        self.history_ = trainer.history
        self.best_epoch_ = trainer.state.best_epoch
        return self

    def _simulate(self, X, net):
        X = check_profiles(X)
        prep = self._prepare(X)
        N, K = X.shape[:2]
        batch = WindowBatch(np.zeros((N, self.rom.n)), prep.exo, prep.u_nom,
                            np.zeros((N, K, self.rom.p)))
        res = backward_cascade(self.model_, net, batch, self._train_config().weights,
                               need_grad=False, keep=True)
        y_bar = np.concatenate([np.zeros((N, 1, self.rom.p)), res.y_pred[:, :-1]], axis=1)
        return {"y": self.transform_.denormalize_y(y_bar) + T_REF,
                "u": self.transform_.denormalize_u(res.u),
                "u_nominal": self.transform_.denormalize_u(prep.u_nom),
                "correction": res.eps, "x_bar": res.x}

    def simulate(self, X, nominal=False):
        check_is_fitted(self, "net_")
        return self._simulate(X, None if nominal else self.net_)

    def predict(self, X):
        return self.simulate(X)["y"]

    def predict_losses(self, X):
        return self.simulate(X)["u"]

    def score(self, X, y):
        """Negative mean absolute temperature error (K)."""
        X, y = check_profiles(X, y, n_outputs=self.rom.p)
        return -float(np.mean(np.abs(self.predict(X) - y)))

    def save(self, path, extra=None):
        """Write the fitted corrector (network, PCA basis, normalization) as JSON."""
        check_is_fitted(self, "net_")
        params = {k: v for k, v in self.get_params().items() if k not in ("rom", "nominal_losses")}
        tf = self.transform_
        d = {"params": params, "net": self.net_.to_dict(), "pca": self.pca_.to_dict(),
             "transform": {"u_max": tf.u_max.tolist(), "y_max": tf.y_max.tolist(),
                           "state_scale": tf.state_scale.tolist()},
             "best_epoch": int(getattr(self, "best_epoch_", -1))}
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)

    @classmethod
    def load(cls, path, rom: DiscreteRom, nominal_losses: LossParams):
        """Rebuild a fitted corrector saved by :meth:`save` around ``rom``."""
        with open(path) as fh:
            d = json.load(fh)
        est = cls(rom, nominal_losses, **d["params"])
        tf = d["transform"]
        est.rom_bar_, est.transform_ = normalize(rom, tf["u_max"], tf["y_max"])
        if not np.allclose(est.transform_.state_scale, tf["state_scale"], rtol=1e-12, atol=0):
            raise ValueError("checkpoint was produced for a different ROM")
        est.pca_ = PcaBasis.from_dict(d["pca"])
        est.model_ = CascadeModel.build(est.rom_bar_, est.pca_)
        est.net_ = net_from_dict(d["net"])
        est.best_epoch_ = d.get("best_epoch", -1)
        return est
