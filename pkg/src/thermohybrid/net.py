"""Correction networks: a tanh MLP and an Elman RNN, plus feature assembly.

Both networks keep all weights in one flat float64 vector ``theta`` with named
views into it, so optimizers and finite-difference checks work on a single
array. Forward passes return a cache consumed by the matching backward pass.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .ploss import T_REF

LEAKY_SLOPE = 0.01
MLP_SIZES = (13, 15, 25, 15, 16)
RNN_SIZES = (13, 25, 16)
N_FEATURES = 13


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "leaky_relu":
        return np.where(a >= 0, a, LEAKY_SLOPE * a)
    if name == "identity":
        return a
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, a, out):
    # derivative expressed through pre-activation ``a`` and output ``out``
    if name == "tanh":
        return 1.0 - out * out
    if name == "leaky_relu":
        return np.where(a >= 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(a)


class _FlatParams:
    """Named array views over one flat parameter vector."""

    def _build(self, shapes):
        self._shapes = list(shapes)
        size = sum(int(np.prod(s)) for _, s in self._shapes)
        self.theta = np.zeros(size)
        self._bind()

    def _bind(self):
        self.views = {}
        off = 0
        for name, shape in self._shapes:
            k = int(np.prod(shape))
            self.views[name] = self.theta[off:off + k].reshape(shape)
            off += k

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.size} parameters, got {theta.size}")
        self.theta = theta.copy()
        self._bind()
        return self

    def copy(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.theta = self.theta.copy()
        other._bind()
        return other

    @property
    def size(self) -> int:
        return self.theta.size

    def _glorot(self, rng):
        for name, shape in self._shapes:
            if len(shape) == 2:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                self.views[name][...] = rng.uniform(-lim, lim, shape)


class Mlp(_FlatParams):
    """Stack of affine layers each followed by an activation (tanh by default)."""

    kind = "fnn"
    stateful = False

    def __init__(self, sizes=MLP_SIZES, activations=None):
        self.sizes = tuple(int(s) for s in sizes)
        n_layers = len(self.sizes) - 1
        self.activations = tuple(activations or ("tanh",) * n_layers)
        if len(self.activations) != n_layers:
            raise ValueError("one activation per layer is required")
        shapes = []
        for l in range(n_layers):
            shapes += [(f"W{l}", (self.sizes[l + 1], self.sizes[l])), (f"b{l}", (self.sizes[l + 1],))]
        self._build(shapes)

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def forward(self, x):
        acts, pre = [x], []
        for l, name in enumerate(self.activations):
            a = acts[-1] @ self.views[f"W{l}"].T + self.views[f"b{l}"]
            pre.append(a)
            acts.append(_act(name, a))
        return acts[-1], (acts, pre)

    def __call__(self, x):
        return self.forward(np.asarray(x, dtype=float))[0]

    def backward(self, cache, g_out, g_theta=None):
        """Accumulate parameter gradients into ``g_theta``; returns (g_theta, g_x)."""
        acts, pre = cache
        if g_theta is None:
            g_theta = np.zeros_like(self.theta)
        gv = self._grad_views(g_theta)
        g = g_out
        for l in range(len(self.activations) - 1, -1, -1):
            g = g * _act_grad(self.activations[l], pre[l], acts[l + 1])
            g2 = g.reshape(-1, g.shape[-1])
            gv[f"W{l}"] += g2.T @ acts[l].reshape(-1, acts[l].shape[-1])
            gv[f"b{l}"] += g2.sum(0)
            g = g @ self.views[f"W{l}"]
        return g_theta, g

    def _grad_views(self, g_theta):
        out, off = {}, 0
        for name, shape in self._shapes:
            k = int(np.prod(shape))
            out[name] = g_theta[off:off + k].reshape(shape)
            off += k
        return out

    def to_dict(self):
        return {"kind": self.kind, "sizes": list(self.sizes),
                "activations": list(self.activations), "theta": self.theta.tolist()}


class ElmanRnn(_FlatParams):
    """``h_k = leaky_relu(W_xh x_k + W_hh h_{k-1} + b_h)``, ``out = tanh(W_hy h_k + b_y)``.

    With ``head_hidden`` set, a tanh MLP head from the hidden state is allocated;
    it only becomes the output branch when ``use_head`` is true.
    """

    kind = "rnn"
    stateful = True

    def __init__(self, sizes=RNN_SIZES, head_hidden=(), use_head=False):
        self.sizes = tuple(int(s) for s in sizes)
        n_in, n_h, n_out = self.sizes
        self.head_hidden = tuple(int(s) for s in head_hidden)
        self.use_head = bool(use_head) and bool(self.head_hidden)
        self.head = Mlp((n_h, *self.head_hidden, n_out)) if self.head_hidden else None
        shapes = [("W_xh", (n_h, n_in)), ("W_hh", (n_h, n_h)), ("b_h", (n_h,)),
                  ("W_hy", (n_out, n_h)), ("b_y", (n_out,))]
        if self.head is not None:
            shapes.append(("head", (self.head.size,)))
        self._build(shapes)

    def _bind(self):
        super()._bind()
        if getattr(self, "head", None) is not None:
            self.head = self.head.copy()
            self.head.theta = self.views["head"]
            self.head._bind()

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_hidden(self):
        return self.sizes[1]

    @property
    def n_out(self):
        return self.sizes[2]

    def step(self, h_prev, x):
        v = self.views
        a = x @ v["W_xh"].T + h_prev @ v["W_hh"].T + v["b_h"]
        h = _act("leaky_relu", a)
        if self.use_head:
            out, hcache = self.head.forward(h)
        else:
            out, hcache = np.tanh(h @ v["W_hy"].T + v["b_y"]), None
        return h, out, (x, h_prev, a, h, out, hcache)

    def step_backward(self, cache, g_h, g_out, g_theta):
        """Returns (g_h_prev, g_x); parameter gradients accumulate in ``g_theta``."""
        x, h_prev, a, h, out, hcache = cache
        gv = {}
        off = 0
        for name, shape in self._shapes:
            k = int(np.prod(shape))
            gv[name] = g_theta[off:off + k].reshape(shape)
            off += k
        v = self.views
        if self.use_head:
            _, g_hh = self.head.backward(hcache, g_out, gv["head"])
            g_h = g_h + g_hh
        else:
            g_o = g_out * (1.0 - out * out)
            gv["W_hy"] += g_o.T @ h
            gv["b_y"] += g_o.sum(0)
            g_h = g_h + g_o @ v["W_hy"]
        g_a = g_h * np.where(a >= 0, 1.0, LEAKY_SLOPE)
        gv["W_xh"] += g_a.T @ x
        gv["W_hh"] += g_a.T @ h_prev
        gv["b_h"] += g_a.sum(0)
        return g_a @ v["W_hh"], g_a @ v["W_xh"]

    def forward_sequence(self, xs, h0=None):
        """Run a (T, B, n_in) feature sequence; returns outputs (T, B, n_out)."""
        xs = np.asarray(xs, dtype=float)
        h = np.zeros(xs.shape[1:-1] + (self.n_hidden,)) if h0 is None else h0
        outs = []
        for x in xs:
            h, o, _ = self.step(h, x)
            outs.append(o)
        return np.stack(outs)

    def to_dict(self):
        return {"kind": self.kind, "sizes": list(self.sizes), "head_hidden": list(self.head_hidden),
                "use_head": self.use_head,
                "activations": ["leaky_relu", "tanh"], "theta": self.theta.tolist()}


def init_mlp(seed, sizes=MLP_SIZES, activations=None, zero=False) -> Mlp:
    """Glorot-uniform weights, zero biases. ``zero=True`` gives an all-zero net."""
    net = Mlp(sizes, activations)
    if not zero:
        net._glorot(np.random.default_rng(seed))
    return net


def init_rnn(seed, sizes=RNN_SIZES, head_hidden=(), use_head=False, zero=False) -> ElmanRnn:
    net = ElmanRnn(sizes, head_hidden, use_head)
    if not zero:
        rng = np.random.default_rng(seed)
        net._glorot(rng)
        if net.head is not None:
            net.head._glorot(rng)
    return net


def mlp_forward(net: Mlp, features):
    return net(features)


def rnn_step(net: ElmanRnn, h_prev, features):
    h, out, _ = net.step(np.asarray(h_prev, dtype=float), np.asarray(features, dtype=float))
    return h, out


def net_from_dict(d):
    if d["kind"] == "fnn":
        net = Mlp(d["sizes"], d["activations"])
    elif d["kind"] == "rnn":
        net = ElmanRnn(d["sizes"], d.get("head_hidden", ()), d.get("use_head", False))
    else:
        raise ValueError(f"unknown network kind {d['kind']!r}")
    return net.set_theta(d["theta"])


class PcaBasis(TransformerMixin, BaseEstimator):
    """Mean plus leading principal directions of normalized ROM states."""

    def __init__(self, n_components=3):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
        if len(X) < 2:
            raise ValueError("need at least two states to fit a PCA basis")
        self.mean_ = X.mean(0)
        _, _, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        comps = vt[: self.n_components]
        # deterministic sign: largest-magnitude loading positive
        signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
        self.components_ = comps * signs[:, None]
        return self

    def _check(self):
        if not hasattr(self, "components_"):
            raise NotFittedError("PcaBasis is not fitted; call fit() on training states first")

    def transform(self, X):
        self._check()
        return (np.asarray(X, dtype=float) - self.mean_) @ self.components_.T

    def to_dict(self):
        self._check()
        return {"n_components": self.n_components, "mean": self.mean_.tolist(),
                "components": self.components_.tolist()}

    @classmethod
    def from_dict(cls, d):
        pca = cls(d["n_components"])
        pca.mean_ = np.asarray(d["mean"], dtype=float)
        pca.components_ = np.asarray(d["components"], dtype=float)
        return pca


def assemble_features(current, t_fb, y_bar, x_bar, pca: PcaBasis, *, i_max, y_max_fb,
                      t_ref=T_REF):
    """``[I/I_max, (T_fb - T_ref)/y_max_fb, y_bar (p), pca(x_bar) (3)]``."""
    pca._check()
    current = np.asarray(current, dtype=float)[..., None]
    t_fb = np.asarray(t_fb, dtype=float)[..., None]
    return np.concatenate([current / i_max, (t_fb - t_ref) / y_max_fb,
                           np.asarray(y_bar, dtype=float), pca.transform(x_bar)], axis=-1)


def save_checkpoint(path, net, pca=None, seed=None, extra=None):
    d = {"net": net.to_dict(), "pca": None if pca is None else pca.to_dict(), "seed": seed}
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    pca = None if d.get("pca") is None else PcaBasis.from_dict(d["pca"])
    return net_from_dict(d["net"]), pca, d
