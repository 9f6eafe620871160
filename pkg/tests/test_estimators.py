import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gridflow.estimators import ConstantVelocityPredictor, FlowGuidedPredictor, PersistencePredictor

SMALL = dict(base_features=4, latent_dim=2, n_gru_units=2, epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def data(tiny_data):
    X, Y, _ = tiny_data
    return X.astype(np.float32), Y.astype(np.float32)


def test_get_params_and_clone():
    est = FlowGuidedPredictor(**SMALL)
    params = est.get_params()
    assert params["lr"] == 2e-3 and params["base_features"] == 4
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(lr=1e-3)
    assert est.optim_config().lr == 1e-3


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        FlowGuidedPredictor(**SMALL).predict(data[0])


def test_fit_predict_score(data):
    X, Y = data
    est = FlowGuidedPredictor(**SMALL).fit(X, Y)
    assert len(est.loss_curve_) == 2 and est.n_epochs_ == 2
    pred = est.predict(X)
    assert pred.shape == (len(X), 4, 12, 12)
    assert 0.0 <= est.score(X, Y) <= 1.0


def test_fit_is_deterministic(data):
    X, Y = data
    a = FlowGuidedPredictor(**SMALL, random_state=1).fit(X, Y)
    b = FlowGuidedPredictor(**SMALL, random_state=1).fit(X, Y)
    assert a.loss_curve_ == b.loss_curve_
    assert np.array_equal(a.predict(X), b.predict(X))


def test_input_validation(data):
    X, Y = data
    est = FlowGuidedPredictor(**SMALL)
    with pytest.raises(ValueError):
        est.fit(X[:, :, :5], Y)
    with pytest.raises(ValueError):
        est.fit(X, Y[:-1])
    bad = X.copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, Y)


def test_checkpoint_resume(tmp_path, data):
    X, Y = data
    full = FlowGuidedPredictor(**{**SMALL, "epochs": 3}).fit(X, Y)
    part = FlowGuidedPredictor(**{**SMALL, "epochs": 1}).fit(X, Y)
    part.save_checkpoint(tmp_path / "c.gfck")
    restored = FlowGuidedPredictor.load_checkpoint(tmp_path / "c.gfck")
    assert np.array_equal(restored.predict(X), part.predict(X))
    restored.set_params(epochs=3)
    restored.fit(X, Y, start_epoch=1)
    assert restored.loss_curve_ == full.loss_curve_


def test_sample_mode_seeded(data):
    X, Y = data
    est = FlowGuidedPredictor(**SMALL).fit(X, Y)
    a = est.predict_bundle(X, mode="sample", seed=3)
    b = est.predict_bundle(X, mode="sample", seed=3)
    assert np.array_equal(a.y_future, b.y_future)


def test_baseline_estimators(data):
    X, Y = data
    for est in (PersistencePredictor(), ConstantVelocityPredictor(dt_s=0.5, cell_size_m=1.0)):
        assert clone(est).get_params() == est.get_params()
        assert est.fit(X, Y).predict(X).shape == (len(X), 4, 12, 12)
        assert 0.0 <= est.score(X, Y) <= 1.0
    p = PersistencePredictor().predict(X)
    assert np.allclose(p[:, 0], X[:, -1, 5])
