"""Shared builders for small random cascade instances."""

import numpy as np

from thermohybrid import net as N
from thermohybrid import rom as R
from thermohybrid.autodiff import CascadeModel, WindowBatch


def random_model(seed, n=24, m=16, p=8):
    rng = np.random.default_rng(seed)
    tp = R.random_thermal_params(n, m, p, rng)
    d = R.discretize_zoh(R.synthesize_rc_network(tp), 1.0)
    nb, tf = R.normalize(d, rng.uniform(1, 5, m))
    pca = N.PcaBasis(3).fit(R.simulate(nb, rng.uniform(0, 1, (300, m))).x_seq)
    return CascadeModel.build(nb, pca), tf


def random_batch(model, seed, B=4, W=1, negative=False):
    rng = np.random.default_rng(seed)
    rom = model.rom
    lo = -0.3 if negative else 0.0
    return WindowBatch(rng.uniform(0, 1, (B, rom.n)), rng.uniform(-1, 1, (B, W, 2)),
                       rng.uniform(lo, 1, (B, W, rom.m)), rng.uniform(0, 1, (B, W, rom.p)))


def random_net(kind, seed, scale=1.0):
    net = N.init_mlp(seed) if kind == "fnn" else N.init_rnn(seed)
    rng = np.random.default_rng(seed + 1000)
    # nonzero biases so no activation sits exactly at a kink
    return net.set_theta(scale * net.theta + 0.05 * rng.normal(size=net.size))
