"""Scikit-learn estimator facade over the module-network pipeline.

``ModuleNetworkClassifier`` exposes the trainable models through the
standard ``fit`` / ``predict`` / ``predict_proba`` / ``score`` surface so
they compose with model selection and pipeline tooling. Samples are
(image, question) pairs; targets are answer strings.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .layout import layout_from_query
from .questions import parse_question
from .scenes import IMAGE_PX
from .training import TrainConfig, TrainExample, fit_examples

__all__ = ["ModuleNetworkClassifier", "check_sample_pairs"]


def check_sample_pairs(X) -> list[tuple[np.ndarray, str]]:
    """Validate that X is a sequence of (image, question) pairs.

    Images must be HxWx3 arrays (uint8 or float in [0, 255]) matching the
    renderer's 30x30 geometry; questions must be non-empty strings.
    """
    pairs = []
    try:
        items = list(X)
    except TypeError:
        raise ValueError("X must be a sequence of (image, question) pairs") from None
    if not items:
        raise ValueError("X is empty")
    for i, item in enumerate(items):
        try:
            image, question = item
        except (TypeError, ValueError):
            raise ValueError(
                f"X[{i}] is not an (image, question) pair: {type(item).__name__}"
            ) from None
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"X[{i}]: image must be HxWx3, got shape {arr.shape}")
        if arr.shape[0] != IMAGE_PX or arr.shape[1] != IMAGE_PX:
            raise ValueError(
                f"X[{i}]: image must be {IMAGE_PX}x{IMAGE_PX}, got "
                f"{arr.shape[0]}x{arr.shape[1]}")
        if not isinstance(question, str) or not question.strip():
            raise ValueError(f"X[{i}]: question must be a non-empty string")
        pairs.append((arr, question))
    return pairs


class ModuleNetworkClassifier(BaseEstimator, ClassifierMixin):
    """Answer questions about images with a per-question assembled network.

    Parameters mirror the training configuration. ``model`` selects the
    architecture: ``nmn`` (modules only), ``nmn+lstm`` (adds the question
    encoder), ``vis+lstm`` (monolithic baseline), or ``majority``.

    Example
    -------
    >>> clf = ModuleNetworkClassifier(model="nmn", epochs=5, seed=0)
    >>> clf.fit(pairs, answers)          # pairs: [(image, question), ...]
    >>> clf.predict([(image, "is a red shape blue?")])
    """

    def __init__(self, model: str = "nmn", epochs: int = 30,
                 batch_size: int = 64, rho: float = 0.95, eps: float = 1e-6,
                 clip_norm: float = 10.0, val_fraction: float = 0.05,
                 patience: int = 8, seed: int = 0,
                 exclude_size: int | None = None):
        self.model = model
        self.epochs = epochs
        self.batch_size = batch_size
        self.rho = rho
        self.eps = eps
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.patience = patience
        self.seed = seed
        self.exclude_size = exclude_size

    def _train_config(self) -> TrainConfig:
        return TrainConfig(model=self.model, epochs=self.epochs,
                           batch_size=self.batch_size, rho=self.rho,
                           eps=self.eps, clip_norm=self.clip_norm,
                           val_fraction=self.val_fraction,
                           patience=self.patience, seed=self.seed,
                           exclude_size=self.exclude_size)

    def _to_examples(self, X, y=None) -> list[TrainExample]:
        pairs = check_sample_pairs(X)
        if y is not None and len(y) != len(pairs):
            raise ValueError(f"X has {len(pairs)} samples but y has {len(y)}")
        examples = []
        for i, (image, question) in enumerate(pairs):
            query = parse_question(question)
            size = layout_from_query(query, "shapes").size
            answer = "" if y is None else str(y[i])
            examples.append(TrainExample(
                image=np.asarray(image, dtype=np.uint8), question=question,
                query=query.serialize(), answer=answer, layout_size=size))
        return examples

    def fit(self, X, y):
        examples = self._to_examples(X, y)
        result = fit_examples(examples, self._train_config())
        self.context_ = result.context
        self.classes_ = np.asarray(self.context_.labels)
        self.history_ = result.metrics_rows
        self.best_val_accuracy_ = result.best_val_accuracy
        return self

    def _require_fitted(self):
        if not hasattr(self, "context_"):
            raise NotFittedError(
                "this ModuleNetworkClassifier instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        examples = self._to_examples(X)
        out = np.empty((len(examples), len(self.classes_)), dtype=np.float64)
        for i, example in enumerate(examples):
            out[i] = self.context_.distribution(example).data
        return out

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
