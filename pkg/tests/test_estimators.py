import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from localfsl.errors import InvalidConfig
from localfsl.estimators import LocalFeatureExtractor, LocalPrototypeClassifier


def clustered_maps(seed=0, per_class=4, classes=3):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, 5, 2, 2))
    y = np.repeat(np.arange(classes), per_class)
    X = centres[y] + 0.05 * rng.normal(size=(len(y), 5, 2, 2))
    return X, y


def test_params_round_trip():
    clf = LocalPrototypeClassifier(gamma=0.3, softmax_scale=5.0)
    assert clf.get_params()["gamma"] == 0.3
    clone_ = clone(clf).set_params(mode="pooled")
    assert clone_.mode == "pooled" and clf.mode == "local"
    assert LocalFeatureExtractor(episodes=7).get_params()["episodes"] == 7


def test_prototype_classifier_on_clusters():
    X, y = clustered_maps()
    labels = np.array(["a", "b", "c"])[y]
    for mode in ("local", "pooled"):
        clf = LocalPrototypeClassifier(mode=mode).fit(X, labels)
        assert list(clf.classes_) == ["a", "b", "c"]
        assert np.array_equal(clf.predict(X), labels)
        proba = clf.predict_proba(X)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        assert clf.score(X, labels) == 1.0


def test_flat_input_needs_map_shape():
    X, y = clustered_maps()
    flat = X.reshape(len(X), -1)
    with pytest.raises(InvalidConfig):
        LocalPrototypeClassifier().fit(flat, y)
    clf = LocalPrototypeClassifier(map_shape=(5, 2, 2)).fit(flat, y)
    assert np.array_equal(clf.predict(flat), y)


def test_transfer_needs_classifier_weights():
    X, y = clustered_maps()
    with pytest.raises(InvalidConfig):
        LocalPrototypeClassifier(beta=0.5).fit(X, y)
    W = np.random.default_rng(0).normal(size=(5, 4))
    clf = LocalPrototypeClassifier(beta=1.0, classifier_weights=W).fit(X, y)
    assert np.array_equal(clf.predict(X), LocalPrototypeClassifier().fit(X, y).predict(X))


def test_validation_errors():
    X, y = clustered_maps()
    with pytest.raises(NotFittedError):
        LocalPrototypeClassifier().predict(X)
    with pytest.raises(ValueError):
        LocalPrototypeClassifier().fit(X, y[:-1])
    with pytest.raises(InvalidConfig):
        LocalPrototypeClassifier().fit(X, np.zeros(len(X)))
    with pytest.raises(InvalidConfig):
        LocalPrototypeClassifier(mode="cosine").fit(X, y)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        LocalPrototypeClassifier().fit(bad, y)


def test_extractor_pipeline():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 6)
    X = np.clip(rng.uniform(size=(30, 32, 32)) * 0.2 + (y / 5.0)[:, None, None], 0, 1)
    ext = LocalFeatureExtractor(episodes=3, shot=1, augment=False).fit(X, y)
    Z = ext.transform(X.reshape(30, -1))
    assert Z.shape == (30, 64 * 2 * 2) and ext.map_shape_ == (64, 2, 2)
    assert ext.classifier_weights_.shape == (64, 5)
    pipe = make_pipeline(ext, LocalPrototypeClassifier(map_shape=ext.map_shape_, gamma=0.0))
    pipe.fit(X, y)
    assert pipe.predict(X).shape == (30,)
    with pytest.raises(InvalidConfig):
        LocalFeatureExtractor(way=5).fit(X[:12], y[:12])
