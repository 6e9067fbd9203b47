"""Optimizer, replay buffer, closed-loop simulation and the training loops.

The feedforward corrector is trained with periodic bootstrap refresh: every
``n_b`` epochs all training profiles are re-simulated with the current network
and the hybrid states of those rollouts become new training windows, pushed into
a fixed-capacity FIFO buffer. The Elman corrector trains on static windows of
``n_seq`` steps taken from the nominal rollouts.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import CascadeModel, CascadeResult, GradientError, WindowBatch, backward_cascade
from .loss import LossWeights, physics_loss  # noqa: F401  (re-exported)
from .net import ElmanRnn, Mlp, init_mlp, init_rnn
from .ploss import T_REF, LossParams, eval_losses
from .rom import NormalizationTransform, Trajectory

log = logging.getLogger(__name__)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite validation loss; ``history`` is kept."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainState:
    epoch: int
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    best_val: float = np.inf
    best_epoch: int = -1
    best_theta: np.ndarray | None = None
    rng_state: dict | None = None

    @classmethod
    def fresh(cls, n_params, lr):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        return cls(0, float(lr), np.zeros(n_params), np.zeros(n_params))

    def to_dict(self):
        d = asdict(self)
        for k in ("m", "v", "best_theta"):
            d[k] = None if d[k] is None else np.asarray(d[k]).tolist()
        d["best_val"] = None if not np.isfinite(self.best_val) else self.best_val
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("m", "v", "best_theta"):
            d[k] = None if d[k] is None else np.asarray(d[k], dtype=float)
        d["best_val"] = np.inf if d["best_val"] is None else d["best_val"]
        return cls(**d)


def adam_step(state: TrainState, params, grads, lr=None):
    """One Adam update. Non-finite gradients leave params and state untouched."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer moments must share a shape")
    if not np.all(np.isfinite(grads)):
        log.warning("non-finite gradient, Adam step rejected")
        return params, state
    lr = state.lr if lr is None else lr
    t = state.t + 1
    m = ADAM_B1 * state.m + (1 - ADAM_B1) * grads
    v = ADAM_B2 * state.v + (1 - ADAM_B2) * grads * grads
    m_hat = m / (1 - ADAM_B1**t)
    v_hat = v / (1 - ADAM_B2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new, replace(state, m=m, v=v, t=t)


def lr_decay(state: TrainState, decay=0.9999) -> TrainState:
    return replace(state, lr=state.lr * decay)


class ReplayBuffer:
    """FIFO window store with independent train/validation sub-buffers.

    A sample is a (trajectory index, start step, start state) triple plus the
    epoch whose network produced the start state. Window contents other than
    the start state are measurements and are gathered from the prepared set.
    """

    SPLITS = ("train", "val")

    def __init__(self, capacity, n_state):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.n_state = n_state
        self._store = {s: self._empty() for s in self.SPLITS}

    def _empty(self):
        return {"traj": np.zeros(0, int), "start": np.zeros(0, int),
                "x0": np.zeros((0, self.n_state)), "epoch": np.zeros(0, int)}

    def push(self, traj, start, x0, epoch, split="train"):
        if split not in self._store:
            raise KeyError(split)
        cur = self._store[split]
        n_new = len(traj)
        new = {"traj": np.asarray(traj, int), "start": np.asarray(start, int),
               "x0": np.asarray(x0, float).reshape(n_new, self.n_state),
               "epoch": np.full(n_new, epoch, int)}
        self._store[split] = {k: np.concatenate([cur[k], new[k]])[-self.capacity:] for k in cur}

    def size(self, split="train"):
        return len(self._store[split]["traj"])

    def __len__(self):
        return self.size("train")

    def get(self, split="train"):
        return self._store[split]

    def state_arrays(self):
        return {f"{s}_{k}": v for s, d in self._store.items() for k, v in d.items()}

    def load_arrays(self, arrays):
        for s in self.SPLITS:
            self._store[s] = {k: np.asarray(arrays[f"{s}_{k}"]) for k in ("traj", "start", "x0", "epoch")}


@dataclass
class PreparedSet:
    """Normalized measurements for a group of trajectories, all of length K."""

    exo: np.ndarray  # (N, K, 2)
    u_nom: np.ndarray  # (N, K, m)
    y_bar: np.ndarray  # (N, K, p)
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.exo)

    @property
    def K(self):
        return self.exo.shape[1]

    def full_batch(self, n_state):
        N, K = self.exo.shape[:2]
        return WindowBatch(np.zeros((N, n_state)), self.exo[:, :K - 1], self.u_nom[:, :K - 1],
                           self.y_bar[:, 1:])

    def windows(self, traj, start, x0, W):
        idx = np.asarray(start)[:, None] + np.arange(W)
        tr = np.asarray(traj)[:, None]
        return WindowBatch(x0, self.exo[tr, idx], self.u_nom[tr, idx], self.y_bar[tr, idx + 1])


def prepare(current, t_fb, y_meas, nominal: LossParams, transform: NormalizationTransform, *,
            i_max, fb_index=0, t_ref=T_REF, ids=None) -> PreparedSet:
    """Normalize measured profiles. ``y_meas`` are absolute temperatures (K)."""
    current = np.asarray(current, dtype=float)
    t_fb = np.asarray(t_fb, dtype=float)
    exo = np.stack([current / i_max, (t_fb - t_ref) / transform.y_max[fb_index]], axis=-1)
    u_nom = transform.normalize_u(eval_losses(nominal, current, t_fb, t_ref))
    y_bar = np.zeros(current.shape + (len(transform.y_max),)) if y_meas is None else \
        transform.normalize_y(np.asarray(y_meas, dtype=float) - t_ref)
    return PreparedSet(exo, u_nom, y_bar, list(ids) if ids is not None else list(range(len(exo))))


def rollout(model: CascadeModel, net, prep: PreparedSet, weights: LossWeights) -> CascadeResult:
    """Free-running closed-loop simulation of whole profiles from rest."""
    return backward_cascade(model, net, prep.full_batch(model.rom.n), weights,
                            need_grad=False, keep=True)


def simulate_closed_loop(model: CascadeModel, net, prep: PreparedSet, transform, weights=None):
    """Closed-loop hybrid rollouts as :class:`Trajectory` objects (normalized states,
    physical losses in W, normalized outputs)."""
    weights = weights or LossWeights()
    res = rollout(model, net, prep, weights)
    if not np.all(np.isfinite(res.x)):
        raise GradientError("closed-loop state became non-finite", {"mse": res.mse})
    out = []
    for i in range(len(prep)):
        x = res.x[i]
        out.append(Trajectory(prep.exo[i, :len(x)], transform.denormalize_u(res.u[i]), x,
                              x @ model.rom.C.T, meta={"id": prep.ids[i]}))
    return out


@dataclass
class TrainConfig:
    net: str = "fnn"
    bootstrap: bool = True
    epochs: int = 6000
    n_b: int = 60
    lr: float = 0.01
    lr_decay: float = 0.9999
    n_seq: int = 50
    window: int = 1
    batch_size: int = 256
    buffer_factor: float = 3.0
    sample_stride: int = 10
    val_every: int = 1
    alpha: float = 1.0
    beta: float = 1e-3
    zeta: float = 1.0
    seed: int = 0
    head_hidden: tuple = ()
    use_head: bool = False

    def __post_init__(self):
        if self.net not in ("fnn", "rnn"):
            raise ValueError("net must be 'fnn' or 'rnn'")
        for name in ("epochs", "n_b", "n_seq", "window", "batch_size", "sample_stride", "val_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need lr > 0 and 0 < lr_decay <= 1")
        self.head_hidden = tuple(self.head_hidden)

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta, self.zeta)

    @property
    def horizon(self):
        return self.n_seq if self.net == "rnn" else self.window

    @property
    def refreshes(self):
        return self.net == "fnn" and self.bootstrap


class Trainer:
    """Owns the network, optimizer state and replay buffer for one training run."""

    def __init__(self, cfg: TrainConfig, model: CascadeModel, train: PreparedSet,
                 val: PreparedSet, net=None, nominal_states=None):
        self.cfg = cfg
        self.model = model
        self.train_set = train
        self.val_set = val
        if net is None:
            net = init_mlp(cfg.seed) if cfg.net == "fnn" else \
                init_rnn(cfg.seed, head_hidden=cfg.head_hidden, use_head=cfg.use_head)
        self.net = net
        self.state = TrainState.fresh(net.size, cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.history = []
        W = cfg.horizon
        if train.K - 1 < W:
            raise ValueError(f"profiles of {train.K} steps are too short for windows of {W}")
        if nominal_states is None:
            nominal_states = rollout(model, None, train, cfg.weights).x
        traj, start = self._window_starts(offset=0)
        self.buffer = ReplayBuffer(int(round(cfg.buffer_factor * len(traj))), model.rom.n)
        self.buffer.push(traj, start, nominal_states[traj, start], epoch=0)

    def _window_starts(self, offset):
        K, W, s = self.train_set.K, self.cfg.horizon, self.cfg.sample_stride
        last = K - 1 - W
        starts = np.arange(offset % s, last + 1, s)
        traj = np.repeat(np.arange(len(self.train_set)), len(starts))
        return traj, np.tile(starts, len(self.train_set))

    def refresh(self, epoch):
        """Re-simulate the training profiles with the current net and push new windows."""
        res = rollout(self.model, self.net, self.train_set, self.cfg.weights)
        if not np.all(np.isfinite(res.x)):
            raise GradientError("bootstrap rollout diverged", res.terms())
        traj, start = self._window_starts(offset=int(self.rng.integers(self.cfg.sample_stride)))
        self.buffer.push(traj, start, res.x[traj, start], epoch=epoch)

    def validate(self, net=None):
        return rollout(self.model, self.net if net is None else net, self.val_set, self.cfg.weights)

    def run_epoch(self):
        cfg = self.cfg
        epoch = self.state.epoch + 1
        refreshed = cfg.refreshes and epoch % cfg.n_b == 0
        if refreshed:
            self.refresh(epoch)
        buf = self.buffer.get("train")
        order = self.rng.permutation(len(buf["traj"]))
        tot = np.zeros(4)
        theta = self.net.theta
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = self.train_set.windows(buf["traj"][idx], buf["start"][idx], buf["x0"][idx],
                                           cfg.horizon)
            res = backward_cascade(self.model, self.net, batch, cfg.weights)
            theta, self.state = adam_step(self.state, theta, res.grad)
            self.net.set_theta(theta)
            tot += len(idx) * np.array([res.loss, res.mse, cfg.alpha * res.penalty, cfg.beta * res.reg])
        tot /= len(order)
        row = {"epoch": epoch, "lr": self.state.lr, "train_loss": tot[0], "val_loss": np.nan,
               "mse_term": tot[1], "penalty_term": tot[2], "reg_term": tot[3],
               "refresh_flag": int(refreshed)}
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            val = self.validate().loss
            row["val_loss"] = val
            if not np.isfinite(val):
                self.history.append(row)
                raise DivergenceError(f"validation loss became non-finite at epoch {epoch}",
                                      self.history)
            if val < self.state.best_val:
                self.state = replace(self.state, best_val=val, best_epoch=epoch,
                                     best_theta=self.net.theta.copy())
        self.history.append(row)
        self.state = replace(lr_decay(self.state, cfg.lr_decay), epoch=epoch)
        return row

    def run(self, until=None, callback=None):
        until = self.cfg.epochs if until is None else until
        if self.state.epoch == 0 and self.state.best_theta is None:
            # the untrained net is a candidate snapshot too
            v = self.validate().loss
            self.state = replace(self.state, best_val=v, best_epoch=0, best_theta=self.net.theta.copy())
        while self.state.epoch < until:
            row = self.run_epoch()
            if callback is not None:
                callback(row)
        return self.history

    def best_net(self):
        net = self.net.copy()
        if self.state.best_theta is not None:
            net.set_theta(self.state.best_theta)
        return net

    def state_dict(self):
        st = replace(self.state, rng_state=copy.deepcopy(self.rng.bit_generator.state))
        return {"state": st.to_dict(), "net_theta": self.net.theta.tolist(),
                "history": [dict(r) for r in self.history],
                "buffer": {k: v.copy() for k, v in self.buffer.state_arrays().items()}}

    def load_state_dict(self, d):
        self.state = TrainState.from_dict(d["state"])
        self.rng.bit_generator.state = self.state.rng_state
        self.net.set_theta(d["net_theta"])
        self.history = [dict(r) for r in d["history"]]
        self.buffer.load_arrays(d["buffer"])


def bootstrap_train(model, train, val, cfg: TrainConfig, net=None, nominal_states=None):
    """Feedforward training with periodic bootstrap refresh. Returns (best net, trainer)."""
    if cfg.net != "fnn":
        cfg = replace(cfg, net="fnn")
    tr = Trainer(cfg, model, train, val, net, nominal_states)
    tr.run()
    return tr.best_net(), tr


def train_rnn(model, train, val, cfg: TrainConfig, net=None, nominal_states=None):
    """Elman training by BPTT over static ``n_seq`` windows (no refresh)."""
    if cfg.net != "rnn":
        cfg = replace(cfg, net="rnn")
    tr = Trainer(cfg, model, train, val, net, nominal_states)
    tr.run()
    return tr.best_net(), tr


__all__ = ["TrainState", "TrainConfig", "ReplayBuffer", "PreparedSet", "Trainer", "DivergenceError",
           "adam_step", "lr_decay", "prepare", "rollout", "simulate_closed_loop", "bootstrap_train",
           "train_rnn", "physics_loss", "LossWeights", "Mlp", "ElmanRnn"]
