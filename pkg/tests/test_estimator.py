import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from thermohybrid.estimator import HybridLossCorrector, check_profiles, loss_scale
from thermohybrid.ploss import T_REF, eval_losses

from conftest import make_estimator


def test_check_profiles():
    X = np.zeros((3, 10, 2))
    assert check_profiles(X).shape == (3, 10, 2)
    assert check_profiles(X[0]).shape == (1, 10, 2)
    with pytest.raises(ValueError):
        check_profiles(np.zeros((3, 10, 3)))
    with pytest.raises(ValueError):
        check_profiles(np.zeros((3, 1, 2)))
    with pytest.raises(ValueError):
        check_profiles(np.full((1, 4, 2), np.nan))
    with pytest.raises(ValueError):
        check_profiles(X, np.zeros((3, 9, 8)))
    with pytest.raises(ValueError):
        check_profiles(X, np.zeros((3, 10, 7)), n_outputs=8)


def test_loss_scale(small_bundle):
    bundle, _ = small_bundle
    nom = bundle.nominal_losses
    np.testing.assert_array_equal(loss_scale(nom, 800.0, 150.0, 2.0),
                                  2.0 * eval_losses(nom, 800.0, T_REF + 150.0))


def test_sklearn_params_and_clone(small_bundle):
    bundle, _ = small_bundle
    est = make_estimator(bundle, lr=0.005, net="rnn")
    p = est.get_params()
    assert p["lr"] == 0.005 and p["net"] == "rnn" and p["rom"] is bundle.nominal_rom
    c = clone(est)
    assert c.get_params()["lr"] == 0.005
    assert not hasattr(c, "net_")


def test_requires_rom_and_fit(small_bundle):
    bundle, data = small_bundle
    tr = data.subset("train")
    with pytest.raises(ValueError):
        HybridLossCorrector().fit(tr["X"], tr["y"])
    with pytest.raises(NotFittedError):
        make_estimator(bundle).predict(tr["X"])


def test_fit_predict_shapes(small_bundle):
    bundle, data = small_bundle
    tr, va, te = data.subset("train"), data.subset("val"), data.subset("test")
    est = make_estimator(bundle, epochs=2).fit(tr["X"], tr["y"], eval_set=(va["X"], va["y"]))
    y = est.predict(te["X"])
    u = est.predict_losses(te["X"])
    assert y.shape == te["y"].shape and u.shape == te["y"].shape[:2] + (16,)
    assert np.all(y[:, 0] == T_REF)
    assert len(est.history_) == 2 and est.best_epoch_ in (0, 1, 2)
    assert np.isfinite(est.score(te["X"], te["y"]))
    nom = est.simulate(te["X"], nominal=True)
    np.testing.assert_array_equal(nom["u"], nom["u_nominal"])
