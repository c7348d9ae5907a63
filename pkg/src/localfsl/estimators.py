"""scikit-learn wrappers: a trainable feature-map extractor and a
prototype classifier over local feature maps.

Both flatten maps to ``(n, d*w*h)`` so they compose in a ``Pipeline``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .backbone import extract_features
from .data import Corpus
from .errors import InvalidConfig
from .losses import LossWeights
from .metric import MetricConfig, embed, prototype_logits
from .training import TrainConfig, train
from .transfer import TransferConfig, refine_map


def _as_images(X, side=None) -> np.ndarray:
    """Accept ``(n, s*s)``, ``(n, s, s)`` or ``(n, ch, s, s)`` images."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        s = side or int(round(np.sqrt(X.shape[1])))
        if s * s != X.shape[1]:
            raise InvalidConfig(f"cannot reshape {X.shape[1]} features into a square image")
        return X.reshape(len(X), 1, s, s)
    if X.ndim == 3:
        return X[:, None]
    if X.ndim == 4:
        return X
    raise InvalidConfig(f"unsupported image array of shape {X.shape}")


class LocalFeatureExtractor(TransformerMixin, BaseEstimator):
    """Episodically trained four-block extractor.

    ``fit`` treats every label in ``y`` as a base class; ``transform``
    returns flattened feature maps, whose shape is kept in ``map_shape_``.
    """

    def __init__(
        self,
        episodes=2000,
        lr=0.0005,
        lat="cls+reg",
        similarity="local",
        lambda_s=0.2,
        lambda_r=1e-4,
        gamma=0.6,
        softmax_scale=10.0,
        way=5,
        shot=5,
        augment=True,
        random_state=0,
    ):
        self.episodes = episodes
        self.lr = lr
        self.lat = lat
        self.similarity = similarity
        self.lambda_s = lambda_s
        self.lambda_r = lambda_r
        self.gamma = gamma
        self.softmax_scale = softmax_scale
        self.way = way
        self.shot = shot
        self.augment = augment
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        e = self.episodes
        return TrainConfig(
            episodes=e,
            lr_schedule=((0, self.lr), (max(1, int(0.6 * e)), self.lr / 10), (max(2, int(0.9 * e)), self.lr / 100)),
            weights=LossWeights(self.lambda_s, self.lambda_r),
            metric=MetricConfig(gamma=self.gamma, softmax_scale=self.softmax_scale),
            way=self.way,
            shot=self.shot,
            seed=int(self.random_state),
            lat=self.lat,
            similarity=self.similarity,
            augment=self.augment,
        )

    def fit(self, X, y):
        images = _as_images(X)
        _, y = check_X_y(images.reshape(len(images), -1), y)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < self.way:
            raise InvalidConfig(f"need at least way={self.way} classes, got {len(self.classes_)}")
        corpus = Corpus(images, codes, [str(c) for c in self.classes_], ["base"] * len(self.classes_))
        self.params_, self.training_log_ = train(corpus, self._train_config())
        self.params_ = self.params_.astype(np.float64)
        a = self.params_.arch
        self.map_shape_ = (a.feature_dim, a.map_side, a.map_side)
        self.n_features_in_ = images[0].size
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        images = _as_images(X, self.params_.arch.side)
        return extract_features(self.params_, images).reshape(len(images), -1)

    @property
    def classifier_weights_(self) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.params_.W


class LocalPrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-prototype classifier on local feature maps.

    ``fit`` stores the support set; each class prototype is the mean of its
    normalised support maps. ``mode="pooled"`` averages maps spatially and
    uses squared Euclidean distance instead.
    """

    def __init__(self, map_shape=None, gamma=0.6, beta=1.0, softmax_scale=10.0, mode="local", classifier_weights=None):
        self.map_shape = map_shape
        self.gamma = gamma
        self.beta = beta
        self.softmax_scale = softmax_scale
        self.mode = mode
        self.classifier_weights = classifier_weights

    def _maps(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim == 4:
            return X
        if X.ndim != 2 or self.map_shape is None:
            raise InvalidConfig("flat input needs map_shape=(d, w, h)")
        return X.reshape((len(X),) + tuple(self.map_shape))

    def _embed(self, maps) -> np.ndarray:
        if self.mode == "pooled":
            return maps
        if self.beta < 1.0:
            if self.classifier_weights is None:
                raise InvalidConfig("beta < 1 needs classifier_weights")
            return refine_map(maps, self.classifier_weights, TransferConfig(self.beta))
        return embed(maps).data

    def fit(self, X, y):
        if self.mode not in ("local", "pooled"):
            raise InvalidConfig(f"mode must be 'local' or 'pooled', got {self.mode!r}")
        maps = self._maps(X)
        _, y = check_X_y(maps.reshape(len(maps), -1), y)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InvalidConfig("at least two classes are required")
        self.metric_ = MetricConfig(gamma=self.gamma, softmax_scale=self.softmax_scale)
        self.support_ = self._embed(maps)
        self.support_labels_ = codes
        self.n_features_in_ = maps[0].size
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "support_")
        maps = self._maps(X)
        if maps[0].size != self.n_features_in_:
            raise InvalidConfig(f"expected maps with {self.n_features_in_} values, got {maps[0].size}")
        mode = "pooled" if self.mode == "pooled" else "local"
        q = self._embed(maps)
        return prototype_logits(self.support_, self.support_labels_, q, len(self.classes_), self.metric_, mode=mode).data

    def predict_proba(self, X) -> np.ndarray:
        return ad.softmax(self._logits(X), axis=1).data

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]
