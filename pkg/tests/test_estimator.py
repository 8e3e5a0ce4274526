import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vsm import VSMClassifier
from vsm.data import synthetic_splits


@pytest.fixture(scope="module")
def splits():
    return synthetic_splits(n_train=8, n_val=0, n_test=4, d_img=8, samples_per_class=10, seed=1)


def small(**kw):
    params = dict(way=3, queries_per_class=2, iterations=3, tasks_per_batch=2, image_shape=(8, 8, 1),
                  blocks=2, channels=4, n_memory_samples=2, n_prototype_samples=2, eval_prototype_samples=4)
    params.update(kw)
    return VSMClassifier(**params)


@pytest.fixture(scope="module")
def fitted(splits):
    X, y = splits["train"].arrays()
    return small().fit(X, y)


def test_params_round_trip():
    est = small(alpha=0.8)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(mode="vpn").mode == "vpn"


def test_predict_needs_fit_and_support(splits):
    X, _ = splits["test"].arrays()
    with pytest.raises(NotFittedError):
        small().predict(X)


def test_condition_and_predict(fitted, splits):
    X, y = splits["test"].arrays()
    idx = np.concatenate([np.flatnonzero(y == c)[:1] for c in np.unique(y)])
    rest = np.setdiff1d(np.arange(len(y)), idx)
    with pytest.raises(ValueError, match="condition"):
        fitted.predict(X[rest])
    fitted.condition(X[idx], y[idx])
    proba = fitted.predict_proba(X[rest])
    assert proba.shape == (len(rest), 4)
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-5)
    pred = fitted.predict(X[rest])
    assert set(pred) <= set(np.unique(y))
    assert 0 <= fitted.score(X[rest], y[rest]) <= 1


def test_flat_inputs_and_transform(fitted, splits):
    X, _ = splits["test"].arrays()
    flat = X.reshape(len(X), -1)
    feats = fitted.transform(flat)
    np.testing.assert_array_equal(feats, fitted.transform(X))
    assert feats.shape == (len(X), 2 * 2 * 4)
    with pytest.raises(ValueError, match="features"):
        fitted.transform(flat[:, :10])


def test_unbalanced_support_rejected(fitted, splits):
    X, y = splits["test"].arrays()
    with pytest.raises(ValueError, match="same number"):
        fitted.condition(X[:3], np.array([0, 0, 1]))


def test_nan_inputs_rejected(fitted, splits):
    X, y = splits["test"].arrays()
    X = X.copy()
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        fitted.transform(X)
