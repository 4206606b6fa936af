"""Multinomial logistic regression over spatial region statistics.

The classifier backend is linear on purpose: gradients are analytic, training
is full-batch gradient descent, and every run is reproducible from its seed.
The feature extractor summarizes an image as per-cell statistics on a coarse
grid (channel means plus vertical and horizontal edge energy), which keeps a
spatial layout, so the model exposes genuine feature maps and gradient maps
for explanation heatmaps.
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .. import storage
from .._validation import as_image_batch, as_label_vector, check_same_length
from ..types import BiasLensError, ValidationError
from .base import ClassifierProvider, ExplanationBatch, ProviderError


class TrainingDivergedError(BiasLensError):
    """Training loss became non-finite."""


def region_statistics(images, grid: int = 4) -> np.ndarray:
    """Summarize images as (N, C+2, P, P) per-cell statistic maps.

    The first C channels are per-cell channel means; the last two are mean
    absolute vertical and horizontal neighbor differences inside each cell
    (edge energy). Cells partition the image via even index splits.
    """
    imgs = as_image_batch(images)
    n, h, w, c = imgs.shape
    p = int(grid)
    if p < 1 or p > h or p > w:
        raise ValidationError(f"grid must lie in [1, min(H, W)], got {p} for {h}x{w} images")
    ybounds = np.linspace(0, h, p + 1).astype(int)
    xbounds = np.linspace(0, w, p + 1).astype(int)
    vdiff = np.abs(np.diff(imgs, axis=1)).mean(axis=3)
    hdiff = np.abs(np.diff(imgs, axis=2)).mean(axis=3)
    stats = np.zeros((n, c + 2, p, p), dtype=np.float64)
    for pi in range(p):
        y0, y1 = ybounds[pi], ybounds[pi + 1]
        for qi in range(p):
            x0, x1 = xbounds[qi], xbounds[qi + 1]
            block = imgs[:, y0:y1, x0:x1, :]
            stats[:, :c, pi, qi] = block.mean(axis=(1, 2))
            if y1 - y0 >= 2:
                stats[:, c, pi, qi] = vdiff[:, y0 : y1 - 1, x0:x1].mean(axis=(1, 2))
            if x1 - x0 >= 2:
                stats[:, c + 1, pi, qi] = hdiff[:, y0:y1, x0 : x1 - 1].mean(axis=(1, 2))
    return stats


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def loss_and_gradients(
    W: np.ndarray,
    b: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    sample_weight: np.ndarray,
    weight_decay: float,
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Weighted mean cross-entropy with an L2 penalty on W, plus exact gradients.

    Loss = (1/N) * sum_i w_i * CE_i + (weight_decay/2) * ||W||^2. The 1/N
    normalization is fixed (not 1/sum(w)), so upweighting samples raises
    their effective count. Returns (loss, grad_W, grad_b, per_sample_ce).
    """
    n = X.shape[0]
    probs = softmax_rows(X @ W + b)
    ce = -np.log(np.clip((probs * Y).sum(axis=1), 1e-300, None))
    loss = float(sample_weight @ ce) / n + 0.5 * weight_decay * float(np.sum(W * W))
    scaled = (probs - Y) * (sample_weight / n)[:, None]
    grad_W = X.T @ scaled + weight_decay * W
    grad_b = scaled.sum(axis=0)
    return loss, grad_W, grad_b, ce


def run_gradient_descent(
    X: np.ndarray,
    Y: np.ndarray,
    *,
    steps: int,
    learning_rate: float,
    weight_decay: float,
    W0: np.ndarray,
    b0: np.ndarray,
    static_weights: Optional[np.ndarray] = None,
    step_weight_fn: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    snapshot_every: int = 0,
):
    """Full-batch descent; per-step weights may come from a stateful callback.

    ``step_weight_fn(step, per_sample_ce) -> weights`` is consulted before
    each update when given, otherwise ``static_weights`` (default all-ones)
    apply. Snapshots of (step, W, b) are collected every ``snapshot_every``
    steps plus at the end. Raises TrainingDivergedError on non-finite loss.
    """
    n = X.shape[0]
    W = W0.copy()
    b = b0.copy()
    weights = np.ones(n, dtype=np.float64) if static_weights is None else static_weights
    trace = []
    snapshots = []
    for step in range(steps):
        probs = softmax_rows(X @ W + b)
        ce = -np.log(np.clip((probs * Y).sum(axis=1), 1e-300, None))
        w = step_weight_fn(step, ce) if step_weight_fn is not None else weights
        loss = float(w @ ce) / n + 0.5 * weight_decay * float(np.sum(W * W))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"training loss non-finite at step {step}")
        trace.append(loss)
        scaled = (probs - Y) * (w / n)[:, None]
        W = W - learning_rate * (X.T @ scaled + weight_decay * W)
        b = b - learning_rate * scaled.sum(axis=0)
        if snapshot_every and ((step + 1) % snapshot_every == 0 or step + 1 == steps):
            snapshots.append((step + 1, W.copy(), b.copy()))
    if snapshot_every and not snapshots:
        snapshots.append((steps, W.copy(), b.copy()))
    return W, b, trace, snapshots


class LogisticRegressionGD(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression trained by full-batch gradient descent.

    Parameters
    ----------
    learning_rate : float
        Step size for gradient descent.
    steps : int
        Number of full-batch updates.
    weight_decay : float
        L2 penalty coefficient on the weight matrix (not the bias).
    init_scale : float
        Scale of the random normal weight initialization.
    random_state : int
        Seed for the initialization.
    n_classes : int or None
        Force the class-count; classes absent from ``y`` are then allowed.
    """

    def __init__(
        self,
        learning_rate: float = 0.5,
        steps: int = 300,
        weight_decay: float = 0.0,
        init_scale: float = 0.01,
        random_state: int = 0,
        n_classes: Optional[int] = None,
    ):
        self.learning_rate = learning_rate
        self.steps = steps
        self.weight_decay = weight_decay
        self.init_scale = init_scale
        self.random_state = random_state
        self.n_classes = n_classes

    def fit(
        self,
        X,
        y,
        sample_weight=None,
        *,
        groups=None,
        group_weight: Optional[Mapping] = None,
        step_weight_fn=None,
        snapshot_every: int = 0,
    ):
        """Fit; static per-sample/per-group weights and per-step callbacks compose.

        ``group_weight`` maps group keys (matching ``groups``) to multipliers
        applied on top of ``sample_weight``.
        """
        X, y = check_X_y(X, y)
        n = X.shape[0]
        if self.n_classes is not None:
            k = int(self.n_classes)
            if y.max() >= k:
                raise ValidationError(f"label {y.max()} out of range for {k} classes")
            self.classes_ = np.arange(k)
            encoded = y.astype(int)
        else:
            self.classes_, encoded = np.unique(y, return_inverse=True)
            k = len(self.classes_)
        if k < 2:
            raise ValidationError("need at least two classes")
        weights = np.ones(n, dtype=np.float64)
        if sample_weight is not None:
            sw = np.asarray(sample_weight, dtype=np.float64)
            check_same_length("sample_weight", sw, "X", X)
            if sw.min() < 0:
                raise ValidationError("sample weights must be non-negative")
            weights = weights * sw
        if group_weight is not None:
            if groups is None:
                raise ValidationError("group_weight requires groups")
            check_same_length("groups", groups, "X", X)
            try:
                weights = weights * np.asarray([group_weight[g] for g in groups], dtype=np.float64)
            except KeyError as e:
                raise ValidationError(f"no weight for group {e.args[0]!r}") from None

        Y = np.zeros((n, k), dtype=np.float64)
        Y[np.arange(n), encoded] = 1.0
        rng = np.random.default_rng(self.random_state)
        W0 = self.init_scale * rng.standard_normal((X.shape[1], k))
        b0 = np.zeros(k, dtype=np.float64)
        W, b, trace, snapshots = run_gradient_descent(
            X,
            Y,
            steps=self.steps,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            W0=W0,
            b0=b0,
            static_weights=weights,
            step_weight_fn=step_weight_fn,
            snapshot_every=snapshot_every,
        )
        self.W_ = W
        self.b_ = b
        self.coef_ = W.T
        self.intercept_ = b
        self.loss_trace_ = trace
        self.snapshots_ = snapshots
        self.n_features_in_ = X.shape[1]
        return self

    def probabilities(self, X, W=None, b=None) -> np.ndarray:
        """Softmax probabilities, optionally under alternative weights."""
        check_is_fitted(self, "W_")
        X = check_array(X)
        W = self.W_ if W is None else W
        b = self.b_ if b is None else b
        return softmax_rows(X @ W + b)

    def predict_proba(self, X) -> np.ndarray:
        return self.probabilities(X)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def set_weights(self, W: np.ndarray, b: np.ndarray) -> "LogisticRegressionGD":
        check_is_fitted(self, "W_")
        if W.shape != self.W_.shape or b.shape != self.b_.shape:
            raise ValidationError("snapshot shape mismatch")
        self.W_ = W.copy()
        self.b_ = b.copy()
        self.coef_ = self.W_.T
        self.intercept_ = self.b_
        return self


class StatMapClassifier(BaseEstimator, ClassifierMixin, ClassifierProvider):
    """Image classifier provider: region statistics + linear softmax head.

    Because the head is linear in the statistic maps, the gradient of any
    class logit with respect to a feature map is the corresponding weight
    slice, so explanation material is exact rather than approximated.
    """

    def __init__(
        self,
        grid: int = 4,
        learning_rate: float = 0.5,
        steps: int = 400,
        weight_decay: float = 1e-3,
        init_scale: float = 0.01,
        random_state: int = 0,
        n_classes: Optional[int] = None,
    ):
        self.grid = grid
        self.learning_rate = learning_rate
        self.steps = steps
        self.weight_decay = weight_decay
        self.init_scale = init_scale
        self.random_state = random_state
        self.n_classes = n_classes

    def feature_maps(self, images) -> np.ndarray:
        return region_statistics(images, grid=self.grid)

    def featurize(self, images) -> np.ndarray:
        stats = self.feature_maps(images)
        return stats.reshape(stats.shape[0], -1)

    def fit(self, images, labels, sample_weight=None, **fit_kwargs):
        labels = as_label_vector(labels)
        X = self.featurize(images)
        check_same_length("labels", labels, "images", X)
        self.model_ = LogisticRegressionGD(
            learning_rate=self.learning_rate,
            steps=self.steps,
            weight_decay=self.weight_decay,
            init_scale=self.init_scale,
            random_state=self.random_state,
            n_classes=self.n_classes,
        )
        self.model_.fit(X, labels, sample_weight=sample_weight, **fit_kwargs)
        self.classes_ = self.model_.classes_
        self.map_shape_ = region_statistics(np.asarray(images)[:1], grid=self.grid).shape[1:]
        return self

    def predict_proba(self, images) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(self.featurize(images))

    def predict(self, images) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(images), axis=1)]

    def explain(self, images, target_class: int) -> ExplanationBatch:
        check_is_fitted(self, "model_")
        stats = self.feature_maps(images)
        if stats.shape[1:] != self.map_shape_:
            raise ProviderError(
                f"feature map shape {stats.shape[1:]} differs from fitted {self.map_shape_}"
            )
        t = int(target_class)
        if not 0 <= t < len(self.classes_):
            raise ProviderError(f"target class {t} out of range")
        grad_map = self.model_.W_[:, t].reshape(self.map_shape_)
        grads = np.broadcast_to(grad_map, stats.shape).copy()
        return ExplanationBatch(feature_maps=stats, gradients=grads)

    @property
    def loss_trace_(self):
        check_is_fitted(self, "model_")
        return self.model_.loss_trace_

    @property
    def snapshots_(self):
        check_is_fitted(self, "model_")
        return self.model_.snapshots_

    def set_weights(self, W, b) -> "StatMapClassifier":
        check_is_fitted(self, "model_")
        self.model_.set_weights(W, b)
        return self


def save_classifier(path, clf: StatMapClassifier) -> None:
    """Persist a fitted StatMapClassifier as a deterministic bundle."""
    check_is_fitted(clf, "model_")
    meta = {
        "kind": "stat_map_classifier",
        "params": clf.get_params(),
        "classes": [int(c) for c in clf.classes_],
        "map_shape": list(clf.map_shape_),
    }
    storage.save_array_bundle(path, {"W": clf.model_.W_, "b": clf.model_.b_}, meta)


def load_classifier(path) -> StatMapClassifier:
    arrays, meta = storage.load_array_bundle(path)
    if meta.get("kind") != "stat_map_classifier":
        raise storage.StorageError(f"{path}: not a classifier bundle")
    clf = StatMapClassifier(**meta["params"])
    model = LogisticRegressionGD(
        learning_rate=clf.learning_rate,
        steps=clf.steps,
        weight_decay=clf.weight_decay,
        init_scale=clf.init_scale,
        random_state=clf.random_state,
        n_classes=clf.n_classes,
    )
    model.classes_ = np.asarray(meta["classes"])
    model.W_ = arrays["W"]
    model.b_ = arrays["b"]
    model.coef_ = model.W_.T
    model.intercept_ = model.b_
    model.loss_trace_ = []
    model.snapshots_ = []
    model.n_features_in_ = model.W_.shape[0]
    clf.model_ = model
    clf.classes_ = model.classes_
    clf.map_shape_ = tuple(meta["map_shape"])
    return clf
