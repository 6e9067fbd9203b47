import numpy as np
import pytest

from thermohybrid import net as N
from thermohybrid.autodiff import (CascadeModel, GradientError, WindowBatch, backward_cascade,
                                   finite_diff_check, input_gradients)
from thermohybrid.loss import LossWeights
from thermohybrid.rom import DiscreteRom

from helpers import random_batch, random_model, random_net


def loss_fn(model, net, batch, weights):
    probe = net.copy()

    def f(theta):
        probe.set_theta(theta)
        return backward_cascade(model, probe, batch, weights, need_grad=False).loss
    return f


def test_zero_net_at_perfect_fit_is_stationary():
    model, _ = random_model(0)
    batch = random_batch(model, 1, W=3)
    zero = N.init_mlp(0, zero=True)
    ref = backward_cascade(model, None, batch, LossWeights(), keep=True)
    batch.y_target = ref.y_pred
    res = backward_cascade(model, zero, batch, LossWeights())
    assert res.loss == 0.0
    assert np.all(res.grad == 0)


def test_scalar_cascade_hand_chain_rule():
    a, b = 0.8, 0.3
    model = CascadeModel(DiscreteRom([[a]], [[b]], [[1.0]]), np.array([[1.0]]), np.zeros(1))
    w, c = 0.7, -0.2
    net = N.Mlp((1, 1)).set_theta([w, c])
    x0, n0, n1, t1, t2 = 0.5, -0.9, 0.2, 0.1, 0.4
    alpha, beta = 2.0, 0.3
    batch = WindowBatch(np.array([[x0]]), np.zeros((1, 2, 0)), np.array([[[n0], [n1]]]),
                        np.array([[[t1], [t2]]]))
    res = backward_cascade(model, net, batch, LossWeights(alpha=alpha, beta=beta))

    e0 = np.tanh(w * x0 + c)
    u0 = n0 + e0
    x1 = a * x0 + b * u0
    e1 = np.tanh(w * x1 + c)
    u1 = n1 + e1
    x2 = a * x1 + b * u1
    L = ((x1 - t1) ** 2 + (x2 - t2) ** 2) / 2 + alpha * (min(u0, 0) ** 2 + min(u1, 0) ** 2) / 2 \
        + beta * (abs(e0) + abs(e1)) / 2
    g_e1 = (x2 - t2) * b + alpha * min(u1, 0) + beta / 2 * np.sign(e1)
    g_x1 = (x1 - t1) + (x2 - t2) * a + g_e1 * (1 - e1**2) * w
    g_e0 = g_x1 * b + alpha * min(u0, 0) + beta / 2 * np.sign(e0)
    dw = g_e1 * (1 - e1**2) * x1 + g_e0 * (1 - e0**2) * x0
    dc = g_e1 * (1 - e1**2) + g_e0 * (1 - e0**2)
    assert res.loss == pytest.approx(L, rel=1e-14)
    np.testing.assert_allclose(res.grad, [dw, dc], rtol=1e-12)


@pytest.mark.parametrize("kind,W", [("fnn", 1), ("fnn", 4), ("rnn", 8)])
def test_matches_finite_differences(kind, W):
    model, _ = random_model(2)
    batch = random_batch(model, 3, B=3, W=W, negative=True)
    net = random_net(kind, 4)
    weights = LossWeights(alpha=1.0, beta=1e-3)
    res = backward_cascade(model, net, batch, weights)
    err = finite_diff_check(loss_fn(model, net, batch, weights), res.grad, net.theta,
                            n_coords=60, seed=1)
    assert err <= 1e-4


def test_input_gradient_linear_in_error():
    model, _ = random_model(5)
    batch = random_batch(model, 6, W=5)
    w0 = LossWeights(alpha=0.0, beta=0.0)
    ref = backward_cascade(model, None, batch, w0, keep=True)
    g1 = input_gradients(model, None, batch, w0)
    batch.y_target = ref.y_pred + 2 * (batch.y_target - ref.y_pred)
    np.testing.assert_allclose(input_gradients(model, None, batch, w0), 2 * g1, rtol=1e-12)


def test_unobservable_channel_has_zero_input_gradient():
    Bd = np.array([[0.5, 0.0]])
    model = CascadeModel(DiscreteRom([[0.5]], Bd, [[1.0]]), np.array([[1.0]]), np.zeros(1))
    batch = WindowBatch(np.zeros((2, 1)), np.zeros((2, 3, 2)), np.ones((2, 3, 2)),
                        np.zeros((2, 3, 1)))
    g = input_gradients(model, None, batch, LossWeights())
    assert g[1] == 0 and g[0] > 0


def test_non_finite_loss_raises_with_diagnostics(tmp_path):
    model, _ = random_model(7)
    batch = random_batch(model, 8)
    batch.y_target[0, 0, 0] = np.inf
    with pytest.raises(GradientError) as exc:
        backward_cascade(model, None, batch, LossWeights())
    assert "mse" in str(exc.value)
    exc.value.dump(tmp_path / "diag.json")
    assert (tmp_path / "diag.json").exists()


def test_finite_diff_check_on_quadratic():
    A = np.random.default_rng(0).normal(size=(5, 5))
    Q = A @ A.T
    x = np.ones(5)
    assert finite_diff_check(lambda v: 0.5 * v @ Q @ v, Q @ x, x) < 1e-8
    assert finite_diff_check(lambda v: 0.5 * v @ Q @ v, 2 * Q @ x, x) > 0.4
    with pytest.raises(ValueError):
        finite_diff_check(lambda v: 0.0, x, x, step=0)
