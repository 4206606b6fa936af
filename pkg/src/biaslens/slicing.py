"""Discovery of semantically coherent underperforming slices.

The workhorse is an error-aware Gaussian mixture over embeddings: each
component carries a diagonal Gaussian on the embedding plus categorical
distributions over the true label and the (soft) predicted label. The label
and prediction terms enter the joint density raised to tunable exponents, so
slices are pushed to be pure in both, which concentrates misclassified
samples that share an appearance.

Two discovery recipes use it: slice the task model's own errors directly, or
first amplify the model's reliance on shortcuts with a high weight-decay
retrain and slice that amplified model's errors instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import kmeans_plusplus
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    as_float_array,
    as_label_vector,
    check_probability_rows,
    check_same_length,
)
from .providers.logistic import StatMapClassifier
from .types import BiasLensError, ValidationError

_LOG_2PI = float(np.log(2.0 * np.pi))


class FitAbortedError(BiasLensError):
    """The EM objective decreased beyond tolerance; the fit is invalid."""


class SlicingError(BiasLensError):
    """Raised on unusable slicing inputs."""


class ErrorAwareMixture(BaseEstimator):
    """Mixture model over (embedding, label, soft prediction) triples.

    Parameters
    ----------
    n_slices : int
        Number of mixture components (candidate slices).
    gamma_y, gamma_yhat : float
        Exponents on the label and prediction agreement terms. Larger values
        force slices to be purer in true and predicted label.
    max_iter : int
        Iteration cap for EM.
    tol : float
        Relative objective improvement below which EM stops.
    variance_floor : float
        Lower bound for per-dimension Gaussian variances.
    categorical_floor : float
        Lower bound for categorical probabilities (renormalized after
        flooring).
    random_state : int
        Seed for initialization.

    Attributes
    ----------
    weights_, means_, variances_, label_probs_, pred_probs_ : arrays
        Fitted component parameters. Components can collapse during EM, so
        their final count may be below ``n_slices``.
    log_likelihood_trace_ : list of float
        Objective value per iteration (monotone between reseed events).
    events_ : list of dict
        Reseed/collapse occurrences.
    """

    def __init__(
        self,
        n_slices: int = 4,
        gamma_y: float = 10.0,
        gamma_yhat: float = 10.0,
        max_iter: int = 100,
        tol: float = 1e-6,
        variance_floor: float = 1e-6,
        categorical_floor: float = 1e-12,
        random_state: int = 0,
    ):
        self.n_slices = n_slices
        self.gamma_y = gamma_y
        self.gamma_yhat = gamma_yhat
        self.max_iter = max_iter
        self.tol = tol
        self.variance_floor = variance_floor
        self.categorical_floor = categorical_floor
        self.random_state = random_state

    # -- internals ---------------------------------------------------------

    def _log_joint(self, X, Y_onehot, P) -> np.ndarray:
        var = self.variances_
        inv = 1.0 / var
        quad = X**2 @ inv.T - 2.0 * (X @ (self.means_ * inv).T) + ((self.means_**2) * inv).sum(axis=1)
        log_norm = -0.5 * (X.shape[1] * _LOG_2PI + np.log(var).sum(axis=1))
        log_gauss = log_norm[None, :] - 0.5 * quad
        log_label = Y_onehot @ np.log(self.label_probs_).T
        log_pred = P @ np.log(self.pred_probs_).T
        return (
            np.log(self.weights_)[None, :]
            + log_gauss
            + self.gamma_y * log_label
            + self.gamma_yhat * log_pred
        )

    @staticmethod
    def _normalize_rows(log_joint) -> Tuple[np.ndarray, float]:
        m = log_joint.max(axis=1, keepdims=True)
        exp = np.exp(log_joint - m)
        total = exp.sum(axis=1, keepdims=True)
        resp = exp / total
        ll = float((np.log(total) + m).sum())
        return resp, ll

    def _floor_categorical(self, probs: np.ndarray) -> np.ndarray:
        floored = np.maximum(probs, self.categorical_floor)
        return floored / floored.sum(axis=1, keepdims=True)

    def _drop_component(self, j: int) -> None:
        keep = np.arange(len(self.weights_)) != j
        self.weights_ = self.weights_[keep]
        self.weights_ = self.weights_ / self.weights_.sum()
        self.means_ = self.means_[keep]
        self.variances_ = self.variances_[keep]
        self.label_probs_ = self.label_probs_[keep]
        self.pred_probs_ = self.pred_probs_[keep]

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y, pred_probs):
        """Run EM on embeddings X, labels y, and soft predictions pred_probs."""
        X = as_float_array(X, "embeddings", ndim=2)
        y = as_label_vector(y, n=X.shape[0])
        P = check_probability_rows(pred_probs, "pred_probs")
        check_same_length("pred_probs", P, "embeddings", X)
        n, d = X.shape
        k = int(self.n_slices)
        if k < 1:
            raise ValidationError("n_slices must be at least 1")
        if n < k:
            raise ValidationError(f"need at least n_slices={k} samples, got {n}")
        n_classes = P.shape[1]
        if y.max() >= n_classes:
            raise ValidationError("labels exceed prediction class count")

        Y = np.zeros((n, n_classes))
        Y[np.arange(n), y] = 1.0

        global_var = np.maximum(X.var(axis=0), self.variance_floor)
        means, _ = kmeans_plusplus(X, n_clusters=k, random_state=self.random_state)
        self.weights_ = np.full(k, 1.0 / k)
        self.means_ = means.astype(np.float64)
        self.variances_ = np.tile(global_var, (k, 1))
        self.label_probs_ = np.full((k, n_classes), 1.0 / n_classes)
        self.pred_probs_ = np.full((k, n_classes), 1.0 / n_classes)

        self.events_ = []
        self.log_likelihood_trace_ = []
        uids = list(range(k))
        reseeded: set[int] = set()
        prev_ll = None
        baseline_reset = False
        empty_floor = 1e-8

        for iteration in range(int(self.max_iter)):
            log_joint = self._log_joint(X, Y, P)
            resp, ll = self._normalize_rows(log_joint)
            self.log_likelihood_trace_.append(ll)
            if prev_ll is not None and not baseline_reset:
                if ll < prev_ll - 1e-9 * max(1.0, abs(prev_ll)):
                    raise FitAbortedError(
                        f"objective decreased at iteration {iteration}: {prev_ll} -> {ll}"
                    )
                if ll - prev_ll < self.tol * max(1.0, abs(prev_ll)):
                    prev_ll = ll
                    break
            baseline_reset = False
            prev_ll = ll

            mass = resp.sum(axis=0)
            empties = [j for j in range(len(self.weights_)) if mass[j] < empty_floor]
            if empties:
                for j in empties:
                    uid = uids[j]
                    if uid not in reseeded:
                        reseeded.add(uid)
                        loneliest = int(np.argmin(resp.max(axis=1)))
                        self.means_[j] = X[loneliest]
                        self.variances_[j] = global_var
                        self.weights_[j] = 1.0 / n
                        self.weights_ = self.weights_ / self.weights_.sum()
                        self.events_.append(
                            {"iteration": iteration, "kind": "reseed", "component": uid}
                        )
                    else:
                        self._drop_component(j)
                        uids.pop(j)
                        warnings.warn(
                            f"slice component {uid} stayed empty and was removed", RuntimeWarning
                        )
                        self.events_.append(
                            {"iteration": iteration, "kind": "collapse", "component": uid}
                        )
                        break
                baseline_reset = True
                continue

            nj = mass
            self.weights_ = nj / n
            self.means_ = (resp.T @ X) / nj[:, None]
            ex2 = (resp.T @ (X**2)) / nj[:, None]
            self.variances_ = np.maximum(ex2 - self.means_**2, self.variance_floor)
            self.label_probs_ = self._floor_categorical((resp.T @ Y) / nj[:, None])
            self.pred_probs_ = self._floor_categorical((resp.T @ P) / nj[:, None])

        self.n_iter_ = len(self.log_likelihood_trace_)
        self.n_classes_ = n_classes
        self.n_features_in_ = d
        return self

    def predict_proba(self, X, y, pred_probs) -> np.ndarray:
        """Slice responsibilities for (embedding, label, prediction) triples."""
        check_is_fitted(self, "weights_")
        X = as_float_array(X, "embeddings", ndim=2)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"embeddings have {X.shape[1]} features, model fitted with {self.n_features_in_}"
            )
        y = as_label_vector(y, n=X.shape[0])
        P = check_probability_rows(pred_probs, "pred_probs")
        Y = np.zeros((X.shape[0], self.n_classes_))
        Y[np.arange(X.shape[0]), y] = 1.0
        resp, _ = self._normalize_rows(self._log_joint(X, Y, P))
        return resp

    def predict(self, X, y, pred_probs) -> np.ndarray:
        return np.argmax(self.predict_proba(X, y, pred_probs), axis=1)

    def score(self, X, y, pred_probs) -> float:
        """Total log objective of the data under the fitted mixture."""
        check_is_fitted(self, "weights_")
        X = as_float_array(X, "embeddings", ndim=2)
        y = as_label_vector(y, n=X.shape[0])
        P = check_probability_rows(pred_probs, "pred_probs")
        Y = np.zeros((X.shape[0], self.n_classes_))
        Y[np.arange(X.shape[0]), y] = 1.0
        _, ll = self._normalize_rows(self._log_joint(X, Y, P))
        return ll


@dataclass(frozen=True)
class SliceAssignment:
    """Soft slice memberships for a set of samples."""

    sample_ids: Tuple[str, ...]
    responsibilities: np.ndarray

    def __post_init__(self):
        resp = check_probability_rows(self.responsibilities, "responsibilities")
        check_same_length("sample_ids", self.sample_ids, "responsibilities", resp)
        resp.setflags(write=False)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "responsibilities", resp)

    @property
    def n_slices(self) -> int:
        return self.responsibilities.shape[1]

    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)


def rank_slice_members(assignment: SliceAssignment, slice_index: int, k: Optional[int] = None) -> list:
    """Sample ids by descending membership in one slice; ties break by id."""
    j = int(slice_index)
    if not 0 <= j < assignment.n_slices:
        raise SlicingError(f"slice index {j} out of range for {assignment.n_slices} slices")
    resp = assignment.responsibilities[:, j]
    order = sorted(range(len(assignment.sample_ids)), key=lambda i: (-resp[i], assignment.sample_ids[i]))
    ranked = [assignment.sample_ids[i] for i in order]
    return ranked if k is None else ranked[: int(k)]


def precision_at_k(
    assignment: SliceAssignment,
    ground_truth_slices: Mapping[str, frozenset],
    k: int = 10,
) -> Fraction:
    """How well discovered slices recover the true bias-conflicting slices.

    For each ground-truth conflicting slice, the best discovered slice is
    the one whose k highest-membership samples overlap it most; the metric
    averages that best overlap fraction over ground-truth slices.
    """
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    if not ground_truth_slices:
        raise SlicingError("no ground-truth conflicting slices to score against")
    top = [set(rank_slice_members(assignment, j, k=k)) for j in range(assignment.n_slices)]
    per_slice = []
    for gid in sorted(ground_truth_slices):
        members = ground_truth_slices[gid]
        best = max(Fraction(len(t & members), k) for t in top)
        per_slice.append(best)
    return sum(per_slice, Fraction(0)) / len(per_slice)


def amplify_bias(
    images,
    labels,
    base_params: Optional[Mapping] = None,
    lam_high: Optional[float] = None,
    multiplier: float = 100.0,
) -> StatMapClassifier:
    """Retrain with strongly amplified weight decay to exaggerate shortcuts.

    High decay starves low-signal directions, so the retrained model leans
    harder on whatever separates classes most cheaply, making biased slices
    easier to find. ``lam_high`` defaults to ``multiplier`` times the
    baseline decay; passing the baseline itself reproduces the baseline
    model exactly.
    """
    params = dict(base_params or {})
    baseline = params.get("weight_decay", StatMapClassifier().weight_decay)
    params["weight_decay"] = float(lam_high) if lam_high is not None else float(baseline) * multiplier
    clf = StatMapClassifier(**params)
    return clf.fit(images, labels)


@dataclass(frozen=True)
class SliceDiscoveryResult:
    """Fitted slices plus ranked members and per-slice accounting."""

    assignment: SliceAssignment
    model: ErrorAwareMixture
    slices: Tuple[dict, ...]
    config: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_slices": self.assignment.n_slices,
            "slices": [dict(s) for s in self.slices],
            "events": list(self.model.events_),
            "config": dict(self.config),
        }


def summarize_slices(
    assignment: SliceAssignment,
    labels,
    predicted,
    class_names: Sequence[str],
    k: int = 10,
) -> Tuple[dict, ...]:
    """Per-slice size, error rate, dominant labels, and top members."""
    labels = as_label_vector(labels, n=len(assignment.sample_ids))
    predicted = as_label_vector(predicted, n=len(assignment.sample_ids))
    hard = assignment.hard_labels()
    out = []
    for j in range(assignment.n_slices):
        member_idx = np.flatnonzero(hard == j)
        size = int(member_idx.size)
        if size:
            errs = float(np.mean(labels[member_idx] != predicted[member_idx]))
            maj_label = int(np.bincount(labels[member_idx]).argmax())
            maj_pred = int(np.bincount(predicted[member_idx]).argmax())
        else:
            errs, maj_label, maj_pred = None, None, None
        out.append(
            {
                "slice": j,
                "size": size,
                "weight": float(assignment.responsibilities[:, j].mean()),
                "error_rate": errs,
                "majority_label": None if maj_label is None else class_names[maj_label],
                "majority_predicted": None if maj_pred is None else class_names[maj_pred],
                "top_members": rank_slice_members(assignment, j, k=k),
            }
        )
    return tuple(out)


def discover_slices(
    sample_ids: Sequence[str],
    embeddings,
    labels,
    pred_probs,
    *,
    n_slices: Optional[int] = None,
    n_groups_hint: Optional[int] = None,
    gamma_y: float = 10.0,
    gamma_yhat: float = 10.0,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    class_names: Optional[Sequence[str]] = None,
    top_k: int = 10,
    pca_components: Optional[int] = 16,
) -> SliceDiscoveryResult:
    """Fit the error-aware mixture and package ranked slices.

    ``n_slices`` defaults to twice the group-count hint (the usual
    overcommit so conflicting slices get their own component).

    ``pca_components`` reduces the embeddings before fitting. Raw embedding
    grids carry many near-constant dimensions whose floored variances let the
    Gaussian term swamp the label and prediction terms, which can freeze EM
    in a label-mixed optimum; a modest projection removes them. ``None``
    disables the reduction, and the cap never exceeds what the data supports.
    """
    if n_slices is None:
        if not n_groups_hint:
            raise SlicingError("need n_slices or a group-count hint")
        n_slices = 2 * int(n_groups_hint)
    X = as_float_array(embeddings, "embeddings", ndim=2)
    if pca_components is not None:
        n_keep = min(int(pca_components), X.shape[0], X.shape[1])
        if n_keep < 1:
            raise ValidationError(f"pca_components must be positive, got {pca_components}")
        if n_keep < X.shape[1]:
            # full SVD keeps the projection deterministic for a given input
            X = PCA(n_components=n_keep, svd_solver="full").fit_transform(X)
    embeddings = X
    P = check_probability_rows(pred_probs, "pred_probs")
    model = ErrorAwareMixture(
        n_slices=int(n_slices),
        gamma_y=gamma_y,
        gamma_yhat=gamma_yhat,
        max_iter=max_iter,
        tol=tol,
        random_state=seed,
    )
    model.fit(embeddings, labels, P)
    resp = model.predict_proba(embeddings, labels, P)
    assignment = SliceAssignment(sample_ids=tuple(sample_ids), responsibilities=resp)
    names = (
        list(class_names)
        if class_names is not None
        else [str(i) for i in range(P.shape[1])]
    )
    predicted = np.argmax(P, axis=1)
    slices = summarize_slices(assignment, labels, predicted, names, k=top_k)
    config = {
        "n_slices": int(n_slices),
        "gamma_y": gamma_y,
        "gamma_yhat": gamma_yhat,
        "max_iter": max_iter,
        "tol": tol,
        "seed": seed,
        "top_k": top_k,
        "pca_components": None if pca_components is None else int(pca_components),
    }
    return SliceDiscoveryResult(assignment=assignment, model=model, slices=slices, config=config)
