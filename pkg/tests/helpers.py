"""Builders for randomized test instances shared across test modules."""

from __future__ import annotations

import numpy as np


def random_mixture_instance(seed, n_range=(24, 120), d_range=(2, 8), k_classes=(2, 4)):
    """Random (X, y, P) triple for exercising the slice mixture."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(*n_range))
    d = int(rng.integers(*d_range))
    k = int(rng.integers(*k_classes))
    X = rng.normal(scale=rng.uniform(0.5, 3.0), size=(n, d))
    y = rng.integers(0, k, size=n)
    P = rng.dirichlet(np.ones(k), size=n)
    return X, y, P


def four_blob_benchmark(seed, per_blob=40, spread=0.5):
    """Four well-separated blobs with distinct (label, prediction) profiles.

    Blob profiles cover both classes in both correct and misclassified
    states, so a mixture that reads embeddings, labels, and predictions can
    recover the blobs exactly while a label-blind one cannot distinguish
    the two blobs sharing a class.
    """
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0], [9.0, 9.0]])
    profiles = [(0, 0), (0, 1), (1, 1), (1, 0)]  # (label, predicted)
    X, y, P, blob_ids = [], [], [], []
    for blob, (center, (label, predicted)) in enumerate(zip(centers, profiles)):
        X.append(center + rng.normal(scale=spread, size=(per_blob, 2)))
        y.extend([label] * per_blob)
        row = np.full(2, 0.1)
        row[predicted] = 0.9
        P.extend([row] * per_blob)
        blob_ids.extend([blob] * per_blob)
    return (
        np.concatenate(X),
        np.asarray(y),
        np.asarray(P),
        np.asarray(blob_ids),
    )


def trace_is_monotone(trace, events, tol=1e-9):
    """Check the objective never decreases between reseed/collapse resets."""
    reset_points = {e["iteration"] for e in events}
    prev = None
    for i, value in enumerate(trace):
        if prev is not None and i not in reset_points and i - 1 not in reset_points:
            if value < prev - tol * max(1.0, abs(prev)):
                return False
        prev = value
    return True
