import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.exceptions import NotFittedError

from thermohybrid import net as N


def test_glorot_bounds_and_zero_biases():
    m = N.init_mlp(3)
    for l in range(4):
        W = m.views[f"W{l}"]
        lim = np.sqrt(6.0 / sum(W.shape))
        assert np.all(np.abs(W) <= lim)
        assert np.abs(W).max() > 0.5 * lim
        assert np.all(m.views[f"b{l}"] == 0)
    assert N.MLP_SIZES == (13, 15, 25, 15, 16) and N.RNN_SIZES == (13, 25, 16)


def test_same_seed_same_params():
    assert N.init_mlp(7).theta.tobytes() == N.init_mlp(7).theta.tobytes()
    assert N.init_rnn(7).theta.tobytes() == N.init_rnn(7).theta.tobytes()
    assert N.init_mlp(7).theta.tobytes() != N.init_mlp(8).theta.tobytes()


def test_zero_net_outputs_zero():
    x = np.random.default_rng(0).normal(size=(5, 13))
    assert np.all(N.mlp_forward(N.init_mlp(0, zero=True), x) == 0)
    h, out = N.rnn_step(N.init_rnn(0, zero=True), np.zeros((5, 25)), x)
    assert np.all(out == 0) and np.all(h == 0)


def test_scalar_layer_example():
    m = N.Mlp((1, 1))
    m.set_theta([2.0, 0.5])
    np.testing.assert_allclose(m([0.25]), [np.tanh(1.0)], rtol=1e-15)
    assert abs(m([0.25])[0] - 0.76159) < 1e-5


def test_outputs_in_open_unit_interval():
    x = np.random.default_rng(1).normal(scale=3, size=(10_000, 13))
    assert np.all(np.abs(N.init_mlp(0)(x)) < 1)
    _, out = N.rnn_step(N.init_rnn(0), np.zeros((10_000, 25)), x)
    assert np.all(np.abs(out) < 1)


@settings(max_examples=30, deadline=None)
@given(arrays(float, 13, elements=st.floats(-1e6, 1e6)))
def test_bounded_for_any_finite_input(x):
    assert np.all(np.abs(N.init_mlp(2)(x)) <= 1)
    _, out = N.rnn_step(N.init_rnn(2), np.zeros((1, 25)), x[None])
    assert np.all(np.abs(out) <= 1)


def test_rnn_step_matches_formula():
    r = N.init_rnn(4)
    rng = np.random.default_rng(2)
    x, h0 = rng.normal(size=(3, 13)), rng.normal(size=(3, 25))
    a = x @ r.views["W_xh"].T + h0 @ r.views["W_hh"].T + r.views["b_h"]
    h_ref = np.where(a >= 0, a, 0.01 * a)
    h, out = N.rnn_step(r, h0, x)
    np.testing.assert_allclose(h, h_ref, rtol=1e-14)
    np.testing.assert_allclose(out, np.tanh(h_ref @ r.views["W_hy"].T + r.views["b_y"]), rtol=1e-14)


def _fd(f, theta, i, step=1e-6):
    e = np.zeros_like(theta)
    e[i] = step
    return (f(theta + e) - f(theta - e)) / (2 * step)


def test_mlp_backward_finite_difference():
    m = N.init_mlp(5)
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(4, 13)), rng.normal(size=(4, 16))

    def f(th):
        return float(np.sum(m.copy().set_theta(th)(x) * w))

    _, cache = m.forward(x)
    g, gx = m.backward(cache, w)
    for i in rng.choice(m.size, 40, replace=False):
        assert abs(_fd(f, m.theta, i) - g[i]) <= 1e-6 * max(1.0, abs(g[i]))


def test_rnn_head_is_config_gated():
    plain = N.init_rnn(0)
    gated = N.init_rnn(0, head_hidden=(20,), use_head=False)
    used = N.init_rnn(0, head_hidden=(20,), use_head=True)
    x = np.ones((2, 13))
    h0 = np.zeros((2, 25))
    assert gated.size > plain.size
    assert not gated.use_head and used.use_head
    _, out, _ = used.step(h0, x)
    assert out.shape == (2, 16)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pca = N.PcaBasis(3).fit(rng.normal(size=(50, 24)))
    for net in (N.init_mlp(1), N.init_rnn(1, head_hidden=(10,), use_head=True)):
        path = tmp_path / f"{net.kind}.json"
        N.save_checkpoint(path, net, pca, seed=1)
        net2, pca2, meta = N.load_checkpoint(path)
        assert net2.theta.tobytes() == net.theta.tobytes()
        assert pca2.components_.tobytes() == pca.components_.tobytes()
        assert meta["seed"] == 1
        json.loads(path.read_text())
    with pytest.raises(ValueError):
        N.net_from_dict({"kind": "lstm"})


def test_pca_centering_and_zero_features():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 24))
    pca = N.PcaBasis(3).fit(X)
    np.testing.assert_allclose(pca.transform(pca.mean_), np.zeros(3), atol=1e-12)
    np.testing.assert_allclose(pca.components_ @ pca.components_.T, np.eye(3), atol=1e-12)
    zero = N.PcaBasis(3).fit(np.vstack([np.eye(24), -np.eye(24)]))
    f = N.assemble_features(0.0, N.T_REF, np.zeros(8), np.zeros(24), zero, i_max=800.0,
                            y_max_fb=100.0)
    assert f.shape == (13,) and np.all(f == 0)


def test_pca_unfitted_raises():
    with pytest.raises(NotFittedError):
        N.PcaBasis(3).transform(np.zeros(24))
    with pytest.raises(NotFittedError):
        N.assemble_features(0.0, 300.0, np.zeros(8), np.zeros(24), N.PcaBasis(3),
                            i_max=1.0, y_max_fb=1.0)


def test_feature_layout():
    pca = N.PcaBasis(3).fit(np.random.default_rng(0).normal(size=(30, 24)))
    y = np.arange(8) / 10
    x = np.random.default_rng(1).normal(size=24)
    f = N.assemble_features(400.0, N.T_REF + 50.0, y, x, pca, i_max=800.0, y_max_fb=100.0)
    assert f[0] == 0.5 and f[1] == 0.5
    np.testing.assert_array_equal(f[2:10], y)
    np.testing.assert_allclose(f[10:], pca.transform(x))
