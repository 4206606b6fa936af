"""Small input-validation helpers used across modules."""

from __future__ import annotations

import numpy as np

from .types import ValidationError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 array, optionally enforcing dimensionality."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must contain only finite values")
    return arr


def as_image_batch(images, name: str = "images") -> np.ndarray:
    """Coerce to an (N, H, W, C) float batch; single-channel input gains a channel axis."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., np.newaxis]
    if arr.ndim != 4:
        raise ValidationError(f"{name} must have shape (N, H, W[, C]), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValidationError(f"{name} must contain at least one image")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must contain only finite values")
    return arr


def as_label_vector(labels, n: int | None = None, name: str = "labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValidationError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if n is not None and arr.size != n:
        raise ValidationError(f"{name} has length {arr.size}, expected {n}")
    if arr.size and arr.min() < 0:
        raise ValidationError(f"{name} must be non-negative")
    return arr


def check_probability_rows(probs, name: str = "probabilities", tol: float = 1e-6) -> np.ndarray:
    """Validate an (N, K) array of per-row probability distributions."""
    arr = as_float_array(probs, name, ndim=2)
    if arr.min() < -tol:
        raise ValidationError(f"{name} must be non-negative")
    sums = arr.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=tol):
        worst = float(np.abs(sums - 1.0).max())
        raise ValidationError(f"{name} rows must sum to 1 (max deviation {worst:.3g})")
    return np.clip(arr, 0.0, None)


def check_same_length(name_a: str, a, name_b: str, b) -> None:
    if len(a) != len(b):
        raise ValidationError(f"{name_a} and {name_b} must have equal length ({len(a)} != {len(b)})")
