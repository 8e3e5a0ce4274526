"""scikit-learn style wrapper around episodic meta-training.

``fit`` meta-trains on labelled images (each label is one class). A fitted
model classifies new classes after :meth:`VSMClassifier.condition` gives it
a support set; ``transform`` returns encoder features.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import from_arrays
from .networks import EncoderConfig, NetworkConfig
from .prototypes import classify
from .tensor import no_grad
from .trainer import Learner, TrainConfig, infer_prototypes, train


class VSMClassifier(BaseEstimator, ClassifierMixin, TransformerMixin):
    """Few-shot classifier with variational prototypes and semantic memory.

    Parameters mirror :class:`~vsm.trainer.TrainConfig`; ``image_shape``
    is (H, W, C) and inputs may be given flattened.
    """

    def __init__(
        self,
        mode: str = "vsm",
        way: int = 5,
        shot: int = 1,
        queries_per_class: int = 5,
        iterations: int = 100,
        tasks_per_batch: int = 8,
        learning_rate: float = 1e-3,
        n_memory_samples: int = 10,
        n_prototype_samples: int = 10,
        eval_prototype_samples: int | None = 100,
        alpha: float = 0.7,
        memory_sigma: str = "identity",
        kl_warmup: int = 0,
        image_shape: tuple = (28, 28, 1),
        blocks: int = 4,
        channels: int = 64,
        dropout: float = 0.9,
        random_state: int = 0,
    ):
        self.mode = mode
        self.way = way
        self.shot = shot
        self.queries_per_class = queries_per_class
        self.iterations = iterations
        self.tasks_per_batch = tasks_per_batch
        self.learning_rate = learning_rate
        self.n_memory_samples = n_memory_samples
        self.n_prototype_samples = n_prototype_samples
        self.eval_prototype_samples = eval_prototype_samples
        self.alpha = alpha
        self.memory_sigma = memory_sigma
        self.kl_warmup = kl_warmup
        self.image_shape = image_shape
        self.blocks = blocks
        self.channels = channels
        self.dropout = dropout
        self.random_state = random_state

    def _images(self, X) -> np.ndarray:
        X = np.asarray(X)
        shape = tuple(self.image_shape)
        if X.ndim == 2:
            X = check_array(X, dtype=[np.float32, np.float64])
            if X.shape[1] != int(np.prod(shape)):
                raise ValueError(f"expected {int(np.prod(shape))} features per sample, got {X.shape[1]}")
            return X.reshape((-1,) + shape)
        if X.ndim == len(shape) and shape[-1] == 1:
            X = X[..., None]
        if X.shape[1:] != shape:
            raise ValueError(f"expected images of shape {shape}, got {X.shape[1:]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains NaN or infinity")
        return X

    def _configs(self) -> tuple[TrainConfig, NetworkConfig]:
        train_config = TrainConfig(
            way=self.way,
            shot=self.shot,
            queries_per_class=self.queries_per_class,
            eval_queries_per_class=self.queries_per_class,
            tasks_per_batch=self.tasks_per_batch,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            n_memory_samples=self.n_memory_samples,
            n_prototype_samples=self.n_prototype_samples,
            eval_prototype_samples=self.eval_prototype_samples,
            alpha=self.alpha,
            memory_sigma=self.memory_sigma,
            kl_warmup=self.kl_warmup,
            mode=self.mode,
            seed=self.random_state,
            val_episodes=1,
            eval_episodes=1,
        )
        encoder = EncoderConfig(
            image_shape=tuple(self.image_shape), blocks=self.blocks, channels=self.channels, dropout=self.dropout
        )
        return train_config, NetworkConfig(encoder=encoder)

    def fit(self, X, y):
        """Meta-train on episodes sampled from the labelled classes in (X, y)."""
        X_flat = np.asarray(X).reshape(len(X), -1)
        check_X_y(X_flat, y)
        images = self._images(X)
        dataset = from_arrays(images, np.asarray(y))
        train_config, network_config = self._configs()
        self.learner_, self.history_ = train(
            train_config, {"train": dataset, "val": dataset}, network_config
        )
        self.n_features_in_ = X_flat.shape[1]
        self.support_ = None
        return self

    def condition(self, X_support, y_support):
        """Store a labelled support set; ``predict`` then ranks its classes."""
        check_is_fitted(self, "learner_")
        X_flat = np.asarray(X_support).reshape(len(X_support), -1)
        check_X_y(X_flat, y_support)
        images = self._images(X_support)
        y_support = np.asarray(y_support)
        self.classes_ = np.unique(y_support)
        counts = [(y_support == c).sum() for c in self.classes_]
        if len(set(counts)) != 1:
            raise ValueError("support set needs the same number of samples per class")
        self.support_ = np.stack([images[y_support == c] for c in self.classes_])
        return self

    def _log_probs(self, X) -> np.ndarray:
        check_is_fitted(self, "learner_")
        if getattr(self, "support_", None) is None:
            raise ValueError("call condition(X_support, y_support) before predicting")
        images = self._images(X)
        learner: Learner = self.learner_
        n, k = self.support_.shape[:2]
        rng = np.random.default_rng([self.random_state, 99])
        with no_grad():
            h_s = learner.nets.encode(self.support_.reshape((n * k,) + self.support_.shape[2:]))
            h_q = learner.nets.encode(images)
            protos = infer_prototypes(
                h_s.reshape(n, k, -1), learner.nets, learner.store, learner.config.for_evaluation(), rng,
                learner.temperature(),
            )
            return classify(h_q, protos, learner.config.metric).data

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self._log_probs(X))

    def predict(self, X) -> np.ndarray:
        log_probs = self._log_probs(X)
        return self.classes_[log_probs.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Encoder features of shape [n_samples, d]."""
        check_is_fitted(self, "learner_")
        with no_grad():
            return self.learner_.nets.encode(self._images(X)).data
