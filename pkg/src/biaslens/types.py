"""Core domain types shared by every pipeline stage.

All types validate their invariants at construction time and are immutable
afterwards, so instances can be passed freely between stages and threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Tuple

import numpy as np

SPLITS = ("train", "val", "test")

#: Accepted heatmap-method identifiers. Only "gradcam" is computed natively;
#: the others are accepted so externally produced heatmap stores can declare
#: their method and flow through the same pipeline.
CAM_METHODS = ("gradcam", "scorecam", "gradcam++", "fullgrad")

GROUP_SEPARATOR = "|"


class BiasLensError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(BiasLensError):
    """An input violated a documented contract."""


def format_group_id(attribute_name: str, class_name: str) -> str:
    """Render the canonical group identifier for an (attribute, class) pair."""
    return f"{attribute_name}{GROUP_SEPARATOR}{class_name}"


@dataclass(frozen=True)
class SampleRecord:
    """One dataset sample: identity, storage location, and annotations.

    Attributes
    ----------
    id : str
        Unique sample identifier within its manifest.
    image_path : str
        Image location, relative to the manifest directory.
    label : int
        Class index into the manifest's class list.
    attribute : int or None
        Spurious-attribute index, when annotated.
    split : str
        One of ``train``, ``val``, ``test``.
    group : str or None
        Rendered group identifier ``"attribute|class"``; present exactly
        when ``attribute`` is present.
    """

    id: str
    image_path: str
    label: int
    attribute: Optional[int]
    split: str
    group: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("sample id must be a non-empty string")
        if self.split not in SPLITS:
            raise ValidationError(
                f"sample {self.id!r}: unknown split {self.split!r}, expected one of {SPLITS}"
            )
        if self.label < 0:
            raise ValidationError(f"sample {self.id!r}: negative label {self.label}")
        if self.attribute is not None and self.attribute < 0:
            raise ValidationError(f"sample {self.id!r}: negative attribute {self.attribute}")
        if (self.group is None) != (self.attribute is None):
            raise ValidationError(
                f"sample {self.id!r}: group must be present exactly when attribute is"
            )


@dataclass(frozen=True)
class GroupTable:
    """Group bookkeeping derived from a manifest.

    ``groups`` holds every (attribute, label) combination present in the
    manifest exactly once. ``train_counts`` are the training-split sizes of
    those groups, and ``majority_map`` sends each attribute to the class it
    most often co-occurs with in the training split (ties resolved toward
    the lowest class index).
    """

    groups: Tuple[Tuple[int, int], ...]
    train_counts: Mapping[Tuple[int, int], int]
    majority_map: Mapping[int, int]
    attribute_names: Tuple[str, ...]
    class_names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.groups)) != len(self.groups):
            raise ValidationError("group table contains duplicate groups")
        object.__setattr__(self, "train_counts", MappingProxyType(dict(self.train_counts)))
        object.__setattr__(self, "majority_map", MappingProxyType(dict(self.majority_map)))
        for g, n in self.train_counts.items():
            if g not in self.groups:
                raise ValidationError(f"train count for unknown group {g}")
            if n < 0:
                raise ValidationError(f"negative train count for group {g}")

    def group_id(self, attribute: int, label: int) -> str:
        return format_group_id(self.attribute_names[attribute], self.class_names[label])

    def group_ids(self) -> Tuple[str, ...]:
        return tuple(self.group_id(a, y) for a, y in self.groups)

    def is_aligned(self, attribute: int, label: int) -> bool:
        """True when the label is the attribute's training majority class."""
        return self.majority_map.get(attribute) == label

    def conflicting_groups(self) -> Tuple[Tuple[int, int], ...]:
        """Groups whose label disagrees with their attribute's majority class."""
        return tuple(
            (a, y)
            for a, y in self.groups
            if a in self.majority_map and self.majority_map[a] != y
        )

    @property
    def n_groups(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class Heatmap:
    """Normalized explanation intensity field for one image.

    Attributes
    ----------
    values : numpy.ndarray
        2-D float array with finite entries in ``[0, 1]``.
    source_size : tuple of int
        ``(height, width)`` of the image this map explains. Maps produced at
        a coarser resolution keep the coarse shape in ``values`` and record
        the image geometry here.
    """

    values: np.ndarray
    source_size: Tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError(f"heatmap values must be a non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("heatmap values must be finite")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("heatmap values must lie in [0, 1]")
        h, w = (int(s) for s in self.source_size)
        if h <= 0 or w <= 0:
            raise ValidationError(f"heatmap source_size must be positive, got {(h, w)}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "source_size", (h, w))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BinaryMask:
    """2-D mask with entries in {0, 1}, stored as uint8."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError(f"mask must be a non-empty 2-D array, got shape {values.shape}")
        uniq = np.unique(values)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValidationError("mask entries must be exactly 0 or 1")
        values = values.astype(np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def area(self) -> int:
        return int(self.values.sum())

    def as_bool(self) -> np.ndarray:
        return self.values.astype(bool)


@dataclass(frozen=True)
class PredictionRecord:
    """Model output for one sample, with correctness resolved against truth."""

    sample_id: str
    predicted_label: int
    class_probabilities: Tuple[float, ...]
    correct: bool

    def __post_init__(self):
        probs = np.asarray(self.class_probabilities, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValidationError("class_probabilities must be a non-empty vector")
        if probs.min() < 0.0:
            raise ValidationError("class probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError(f"class probabilities must sum to 1, got {probs.sum()!r}")
        if self.predicted_label != int(np.argmax(probs)):
            raise ValidationError("predicted_label must be the argmax class (lowest index on ties)")

    @classmethod
    def from_probabilities(cls, sample_id: str, probabilities, true_label: int) -> "PredictionRecord":
        probs = np.asarray(probabilities, dtype=np.float64)
        predicted = int(np.argmax(probs))
        return cls(
            sample_id=sample_id,
            predicted_label=predicted,
            class_probabilities=tuple(float(p) for p in probs),
            correct=predicted == int(true_label),
        )


@dataclass(frozen=True)
class GroundingConfig:
    """Switches controlling explanation-based input grounding.

    ``tau`` is the heatmap threshold in ``[0, 1]``; pixels whose (resized)
    heatmap value falls below it are suppressed. ``fill`` selects what
    suppressed pixels become: ``"zero"`` blacks them out, ``"mean"``
    replaces them with the per-channel image mean.
    """

    tau: float = 0.7
    cam_method: str = "gradcam"
    enabled: bool = True
    fill: str = "zero"
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.cam_method not in CAM_METHODS:
            raise ValidationError(
                f"unknown cam_method {self.cam_method!r}, expected one of {CAM_METHODS}"
            )
        if self.fill not in ("zero", "mean"):
            raise ValidationError(f"fill must be 'zero' or 'mean', got {self.fill!r}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ValidationError(
                f"interpolation must be 'bilinear' or 'nearest', got {self.interpolation!r}"
            )

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "cam_method": self.cam_method,
            "enabled": self.enabled,
            "fill": self.fill,
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundingConfig":
        return cls(**dict(d))
