"""Grouped accuracy metrics with exact rational arithmetic.

Group accuracies are counts divided by counts, so every metric here is kept
as a Fraction until serialization. The headline robustness number is the
worst-group accuracy; the companion average is reweighted by training-split
group frequencies (the deployment-relevant average when training data is
imbalanced), and the gap between the two summarizes how much a model trades
the worst group for the average case.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from ._validation import check_same_length
from .types import BiasLensError


class MetricsError(BiasLensError):
    """Raised on empty or inconsistent metric inputs."""


def _correctness(predicted, labels) -> list[bool]:
    check_same_length("predicted", predicted, "labels", labels)
    if len(predicted) == 0:
        raise MetricsError("cannot compute accuracy of zero samples")
    return [int(p) == int(y) for p, y in zip(predicted, labels)]


def accuracy(predicted, labels) -> Fraction:
    """Plain accuracy as an exact fraction."""
    correct = _correctness(predicted, labels)
    return Fraction(sum(correct), len(correct))


def group_accuracies(predicted, labels, groups) -> dict:
    """Per-group exact accuracies; every sample must carry a group id."""
    correct = _correctness(predicted, labels)
    check_same_length("groups", groups, "labels", labels)
    hits: dict = {}
    totals: dict = {}
    for ok, g in zip(correct, groups):
        if g is None:
            raise MetricsError("every sample needs a group id for grouped metrics")
        totals[g] = totals.get(g, 0) + 1
        hits[g] = hits.get(g, 0) + int(ok)
    return {g: Fraction(hits[g], totals[g]) for g in totals}


def worst_group_accuracy(
    predicted, labels, groups, expected_groups: Optional[Sequence] = None
) -> Fraction:
    """Minimum per-group accuracy.

    When ``expected_groups`` is given, each of those groups must actually
    appear among the samples; an empty expected group is an error rather
    than a silent omission from the minimum.
    """
    accs = group_accuracies(predicted, labels, groups)
    if expected_groups is not None:
        missing = [g for g in expected_groups if g not in accs]
        if missing:
            raise MetricsError(f"group {missing[0]!r} has no evaluation samples")
    return min(accs.values())


def adjusted_average_accuracy(
    predicted, labels, groups, train_counts: Mapping
) -> Fraction:
    """Group accuracies reweighted by training-split group frequencies.

    Weights are normalized over the groups present in the evaluation, so
    uniform training counts reduce this to the plain mean of group
    accuracies.
    """
    accs = group_accuracies(predicted, labels, groups)
    missing = [g for g in accs if g not in train_counts]
    if missing:
        raise MetricsError(f"no training count for group {missing[0]!r}")
    total = sum(int(train_counts[g]) for g in accs)
    if total <= 0:
        raise MetricsError("training counts must have positive total")
    return sum(
        (Fraction(int(train_counts[g]), total) * acc for g, acc in accs.items()),
        Fraction(0),
    )


@dataclass(frozen=True)
class GroupedMetrics:
    """Exact grouped accuracy summary for one evaluation."""

    per_group: Mapping
    group_sizes: Mapping
    worst: Fraction
    adjusted_average: Fraction
    plain_average: Fraction
    gap: Fraction

    def to_dict(self) -> dict:
        return {
            "per_group": {str(g): _decimal(v) for g, v in sorted(self.per_group.items())},
            "group_sizes": {str(g): int(v) for g, v in sorted(self.group_sizes.items())},
            "worst_group_accuracy": _decimal(self.worst),
            "adjusted_average_accuracy": _decimal(self.adjusted_average),
            "plain_average_accuracy": _decimal(self.plain_average),
            "accuracy_gap": _decimal(self.gap),
        }


def _decimal(value: Fraction, places: int = 4) -> float:
    return float(round(float(value), places))


def compute_grouped_metrics(
    predicted,
    labels,
    groups,
    train_counts: Mapping,
    expected_groups: Optional[Sequence] = None,
) -> GroupedMetrics:
    """All grouped metrics in one pass; the gap is an exact difference.

    The gap is adjusted average minus worst, computed on the rationals, so
    gap + worst reconstructs the adjusted average exactly.
    """
    accs = group_accuracies(predicted, labels, groups)
    if expected_groups is not None:
        missing = [g for g in expected_groups if g not in accs]
        if missing:
            raise MetricsError(f"group {missing[0]!r} has no evaluation samples")
    sizes: dict = {}
    for g in groups:
        sizes[g] = sizes.get(g, 0) + 1
    worst = min(accs.values())
    adjusted = adjusted_average_accuracy(predicted, labels, groups, train_counts)
    plain = accuracy(predicted, labels)
    return GroupedMetrics(
        per_group=accs,
        group_sizes=sizes,
        worst=worst,
        adjusted_average=adjusted,
        plain_average=plain,
        gap=adjusted - worst,
    )
