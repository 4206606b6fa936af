"""Mitigating discovered biases.

Two families live here. Zero-shot: prompt strategies that fold discovered
keywords or known group labels into the prompt set, plus zero-shot group
inference for samples without attribute annotations. Training: group-robust
optimization (online exponentiated group weights), error-upweighted
retraining (two-phase), and the plain baseline. All three trainers share one
gradient-descent code path, so their documented equivalences (single-group
robust training == baseline; upweight factor 1 == baseline retrain) hold
bit for bit rather than approximately.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from ._validation import as_label_vector, check_same_length
from .metrics import GroupedMetrics, compute_grouped_metrics, worst_group_accuracy
from .providers.base import ProviderError, ZeroShotProvider
from .providers.logistic import StatMapClassifier
from .types import BiasLensError, ValidationError, format_group_id

DEFAULT_TEMPLATES = {
    "base": "a photo of a {class_name}",
    "group": "a photo of a {class_name} on a {attribute} background",
    "keyword": "a photo of a {class_name} {keyword}",
}

ZERO_SHOT_STRATEGIES = ("base", "group-informed", "keyword-augmented")


class MitigationError(BiasLensError):
    """Raised on unusable mitigation inputs."""


# ---------------------------------------------------------------------------
# Zero-shot prompting
# ---------------------------------------------------------------------------


def build_prompts(
    strategy: str,
    class_names: Sequence[str],
    *,
    attributes: Optional[Sequence[str]] = None,
    keywords_by_class: Optional[Mapping[str, Sequence[str]]] = None,
    templates: Optional[Mapping[str, str]] = None,
) -> list[Tuple[int, str]]:
    """Prompt set for a strategy, as (class index, prompt) pairs.

    Base: one prompt per class. Group-informed: one prompt per class and
    known attribute. Keyword-augmented: base prompt plus one prompt per
    discovered keyword of that class.
    """
    tpl = dict(DEFAULT_TEMPLATES)
    if templates:
        tpl.update(templates)
    prompts: list[Tuple[int, str]] = []
    if strategy == "base":
        for ci, cls in enumerate(class_names):
            prompts.append((ci, tpl["base"].format(class_name=cls)))
    elif strategy == "group-informed":
        if not attributes:
            raise MitigationError("group-informed prompts need attribute names")
        for ci, cls in enumerate(class_names):
            for attr in attributes:
                prompts.append((ci, tpl["group"].format(class_name=cls, attribute=attr)))
    elif strategy == "keyword-augmented":
        if keywords_by_class is None:
            raise MitigationError("keyword-augmented prompts need per-class keywords")
        for ci, cls in enumerate(class_names):
            prompts.append((ci, tpl["base"].format(class_name=cls)))
            for kw in keywords_by_class.get(cls, ()):
                prompts.append((ci, tpl["keyword"].format(class_name=cls, keyword=kw)))
    else:
        raise MitigationError(
            f"unknown strategy {strategy!r}, expected one of {ZERO_SHOT_STRATEGIES}"
        )
    return prompts


def infer_groups_zero_shot(
    sample_ids: Sequence[str],
    images,
    labels,
    class_names: Sequence[str],
    keywords_by_class: Mapping[str, Sequence[str]],
    zeroshot: ZeroShotProvider,
    templates: Optional[Mapping[str, str]] = None,
) -> Tuple[dict, int]:
    """Assign pseudo-groups from keyword prompts of each sample's own class.

    Per sample, candidates are the base prompt plus one prompt per keyword
    of its label's class; the winning prompt's keyword (or "base") becomes
    the pseudo-attribute, and the group id is ``pseudo|class``. Provider
    failures fall back to a label-only group and are counted.
    """
    labels = as_label_vector(labels, n=len(sample_ids))
    imgs = np.asarray(images)
    check_same_length("images", imgs, "sample_ids", sample_ids)
    tpl = dict(DEFAULT_TEMPLATES)
    if templates:
        tpl.update(templates)

    assignments: dict[str, str] = {}
    fallbacks = 0
    for ci, cls in enumerate(class_names):
        idx = np.flatnonzero(labels == ci)
        if idx.size == 0:
            continue
        names = ["base"] + [str(kw) for kw in keywords_by_class.get(cls, ())]
        prompts = [tpl["base"].format(class_name=cls)] + [
            tpl["keyword"].format(class_name=cls, keyword=kw) for kw in names[1:]
        ]
        batch = imgs[idx]
        try:
            probs = zeroshot.classify(batch, prompts)
            picks = np.argmax(probs, axis=1)
        except ProviderError:
            picks = np.full(idx.size, -1)
            for row, i in enumerate(idx):
                try:
                    p = zeroshot.classify(batch[row : row + 1], prompts)
                    picks[row] = int(np.argmax(p[0]))
                except ProviderError:
                    picks[row] = -1
        for row, i in enumerate(idx):
            sid = sample_ids[int(i)]
            if picks[row] < 0:
                assignments[sid] = format_group_id("unassigned", cls)
                fallbacks += 1
            else:
                assignments[sid] = format_group_id(names[int(picks[row])], cls)
    return assignments, fallbacks


def zero_shot_eval(
    images,
    labels,
    groups: Sequence[str],
    class_names: Sequence[str],
    zeroshot: ZeroShotProvider,
    strategy: str = "base",
    *,
    attributes: Optional[Sequence[str]] = None,
    keywords_by_class: Optional[Mapping[str, Sequence[str]]] = None,
    train_counts: Optional[Mapping] = None,
    templates: Optional[Mapping[str, str]] = None,
) -> Tuple[GroupedMetrics, list]:
    """Grouped metrics of zero-shot classification under one prompt strategy.

    A sample's class score is the maximum over that class's prompts; the
    predicted class is the argmax (lowest index on ties). Requires group
    annotations on the evaluated samples.
    """
    labels = as_label_vector(labels)
    if any(g is None for g in groups):
        raise MitigationError("zero-shot evaluation needs group annotations on every sample")
    prompts = build_prompts(
        strategy,
        class_names,
        attributes=attributes,
        keywords_by_class=keywords_by_class,
        templates=templates,
    )
    probs = zeroshot.classify(images, [p for _, p in prompts])
    owners = np.asarray([ci for ci, _ in prompts])
    scores = np.full((probs.shape[0], len(class_names)), -np.inf)
    for ci in range(len(class_names)):
        cols = np.flatnonzero(owners == ci)
        if cols.size:
            scores[:, ci] = probs[:, cols].max(axis=1)
    predicted = np.argmax(scores, axis=1)
    counts = train_counts
    if counts is None:
        counts = {g: 1 for g in set(groups)}
    metrics = compute_grouped_metrics(predicted, labels, list(groups), counts)
    return metrics, prompts


# ---------------------------------------------------------------------------
# Training-based mitigation
# ---------------------------------------------------------------------------


def exponentiated_group_update(q: np.ndarray, group_losses: np.ndarray, eta: float) -> np.ndarray:
    """One multiplicative-weights step on the group distribution.

    q_g <- q_g * exp(eta * L_g), renormalized to the simplex.
    """
    updated = q * np.exp(eta * group_losses)
    return updated / updated.sum()


@dataclass
class TrainingInfo:
    """Byproducts of one mitigation training run."""

    method: str
    loss_trace: list = field(default_factory=list)
    selected_step: Optional[int] = None
    val_worst_trace: list = field(default_factory=list)
    q_trace: list = field(default_factory=list)
    upweighted: Optional[int] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "final_loss": self.loss_trace[-1] if self.loss_trace else None,
            "selected_step": self.selected_step,
            "val_worst_trace": [round(float(v), 6) for v in self.val_worst_trace],
            "q_final": self.q_trace[-1] if self.q_trace else None,
            "upweighted": self.upweighted,
            "notes": list(self.notes),
        }


def _select_by_val_worst(
    clf: StatMapClassifier,
    info: TrainingInfo,
    val_data: Optional[Tuple],
) -> StatMapClassifier:
    """Keep the snapshot with the best validation worst-group accuracy.

    Earliest snapshot wins ties, so longer training never silently replaces
    an equally good earlier model.
    """
    if val_data is None:
        return clf
    val_images, val_labels, val_groups = val_data
    if any(g is None for g in val_groups):
        raise MitigationError("validation group annotations are required for model selection")
    X_val = clf.featurize(val_images)
    val_labels = as_label_vector(val_labels, n=X_val.shape[0])
    best = None
    for step, W, b in clf.snapshots_:
        probs = clf.model_.probabilities(X_val, W, b)
        predicted = np.argmax(probs, axis=1)
        wga = worst_group_accuracy(predicted, val_labels, list(val_groups))
        info.val_worst_trace.append(float(wga))
        if best is None or wga > best[0]:
            best = (wga, step, W, b)
    if best is None:
        return clf
    _, step, W, b = best
    info.selected_step = int(step)
    clf.set_weights(W, b)
    return clf


def _snapshot_cadence(params: Mapping, explicit: Optional[int]) -> int:
    if explicit is not None:
        return int(explicit)
    steps = int(params.get("steps", StatMapClassifier().steps))
    return max(1, steps // 20)


def erm_train(
    images,
    labels,
    params: Optional[Mapping] = None,
    *,
    sample_weight=None,
    val_data: Optional[Tuple] = None,
    snapshot_every: Optional[int] = None,
) -> Tuple[StatMapClassifier, TrainingInfo]:
    """Plain weighted training; the baseline every mitigation compares against."""
    clf = StatMapClassifier(**dict(params or {}))
    info = TrainingInfo(method="erm")
    cadence = _snapshot_cadence(dict(params or {}), snapshot_every) if val_data else 0
    clf.fit(images, labels, sample_weight=sample_weight, snapshot_every=cadence)
    info.loss_trace = list(clf.loss_trace_)
    return _select_by_val_worst(clf, info, val_data), info


def jtt_train(
    images,
    labels,
    params: Optional[Mapping] = None,
    *,
    lambda_up: float = 20.0,
    val_data: Optional[Tuple] = None,
    snapshot_every: Optional[int] = None,
) -> Tuple[StatMapClassifier, TrainingInfo]:
    """Two-phase error upweighting.

    Phase one trains the baseline; its training-set errors form the error
    set. Phase two retrains from scratch (same seed, hence same
    initialization) with weight ``lambda_up`` on the error set and 1
    elsewhere. ``lambda_up=1`` therefore reproduces the baseline retrain
    exactly. An empty error set returns the phase-one model with a warning.
    """
    if lambda_up < 1.0:
        raise ValidationError(f"lambda_up must be >= 1, got {lambda_up}")
    labels = as_label_vector(labels)
    phase_one, _ = erm_train(images, labels, params)
    predicted = phase_one.predict(images)
    errors = predicted != labels
    info = TrainingInfo(method="jtt", upweighted=int(errors.sum()))
    if not errors.any():
        warnings.warn(
            "error set is empty; returning the phase-one model unchanged", RuntimeWarning
        )
        info.notes.append("empty error set; phase-one model returned")
        return _select_by_val_worst(phase_one, info, val_data), info
    weights = np.where(errors, float(lambda_up), 1.0)
    clf = StatMapClassifier(**dict(params or {}))
    cadence = _snapshot_cadence(dict(params or {}), snapshot_every) if val_data else 0
    clf.fit(images, labels, sample_weight=weights, snapshot_every=cadence)
    info.loss_trace = list(clf.loss_trace_)
    return _select_by_val_worst(clf, info, val_data), info


def groupdro_train(
    images,
    labels,
    groups: Sequence,
    params: Optional[Mapping] = None,
    *,
    eta: float = 0.01,
    val_data: Optional[Tuple] = None,
    snapshot_every: Optional[int] = None,
) -> Tuple[StatMapClassifier, TrainingInfo]:
    """Online group-robust training.

    Each step recomputes per-group mean losses, takes one multiplicative
    update on the group distribution q, and descends on the q-weighted
    loss. With a single group, q stays exactly 1, making every update
    identical to the baseline's.
    """
    if eta < 0:
        raise ValidationError(f"eta must be non-negative, got {eta}")
    labels = as_label_vector(labels)
    groups = list(groups)
    check_same_length("groups", groups, "labels", labels)
    if any(g is None for g in groups):
        raise MitigationError("group-robust training needs a group id on every sample")
    group_names = sorted(set(groups))
    index_of = {g: i for i, g in enumerate(group_names)}
    gidx = np.asarray([index_of[g] for g in groups])
    n = len(groups)
    counts = np.bincount(gidx, minlength=len(group_names)).astype(np.float64)

    info = TrainingInfo(method="groupdro")
    state = {"q": np.full(len(group_names), 1.0 / len(group_names))}

    def weight_fn(step: int, ce: np.ndarray) -> np.ndarray:
        group_losses = np.bincount(gidx, weights=ce, minlength=len(group_names)) / counts
        state["q"] = exponentiated_group_update(state["q"], group_losses, eta)
        info.q_trace.append([float(v) for v in state["q"]])
        return state["q"][gidx] * (n / counts[gidx])

    clf = StatMapClassifier(**dict(params or {}))
    cadence = _snapshot_cadence(dict(params or {}), snapshot_every) if val_data else 0
    clf.fit(images, labels, step_weight_fn=weight_fn, snapshot_every=cadence)
    info.loss_trace = list(clf.loss_trace_)
    return _select_by_val_worst(clf, info, val_data), info
