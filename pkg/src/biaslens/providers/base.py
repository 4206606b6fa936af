"""Provider interfaces decoupling the pipeline from model backends.

Every stage talks to models through these four roles. The bundled
implementations are deterministic synthetic backends; a real vision stack
plugs in by implementing the same methods.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..types import BiasLensError, Heatmap, PredictionRecord


class ProviderError(BiasLensError):
    """Raised when a provider cannot service a request."""


@dataclass(frozen=True)
class ExplanationBatch:
    """Raw material for explanation heatmaps.

    Providers either expose internals (``feature_maps`` and ``gradients``,
    both shaped ``(N, F, P, Q)``) for the native heatmap construction, or
    hand back finished ``heatmaps`` directly (external methods).
    """

    feature_maps: Optional[np.ndarray] = None
    gradients: Optional[np.ndarray] = None
    heatmaps: Optional[Tuple[Heatmap, ...]] = None

    def __post_init__(self):
        has_internals = self.feature_maps is not None and self.gradients is not None
        if has_internals == (self.heatmaps is not None):
            raise ProviderError(
                "explanation must carry either feature_maps+gradients or heatmaps, not both"
            )
        if has_internals and self.feature_maps.shape != self.gradients.shape:
            raise ProviderError(
                f"feature_maps {self.feature_maps.shape} and gradients "
                f"{self.gradients.shape} must share a shape"
            )

    @property
    def is_direct(self) -> bool:
        return self.heatmaps is not None


class ClassifierProvider(ABC):
    """A trained classifier that can predict and explain."""

    @abstractmethod
    def predict_proba(self, images) -> np.ndarray:
        """Per-class probabilities for a batch, rows summing to 1."""

    @abstractmethod
    def explain(self, images, target_class: int) -> ExplanationBatch:
        """Explanation material for the given target class."""

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=1)

    def predict_records(
        self, sample_ids: Sequence[str], images, true_labels
    ) -> list[PredictionRecord]:
        probs = self.predict_proba(images)
        if len(sample_ids) != probs.shape[0] or len(true_labels) != probs.shape[0]:
            raise ProviderError("sample_ids, images, and true_labels must align")
        return [
            PredictionRecord.from_probabilities(sid, row, int(y))
            for sid, row, y in zip(sample_ids, probs, true_labels)
        ]


class EmbeddingProvider(ABC):
    """Maps images and texts into one shared unit-norm embedding space."""

    @abstractmethod
    def embed_images(self, images) -> np.ndarray:
        """(N, d) array with unit-norm rows."""

    @abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """(T, d) array with unit-norm rows."""


class CaptionProvider(ABC):
    """Produces one descriptive caption per image."""

    @abstractmethod
    def caption(self, images) -> list[str]:
        """One caption per image, deterministic for fixed inputs."""


class ZeroShotProvider(ABC):
    """Scores images against candidate text prompts."""

    @abstractmethod
    def classify(self, images, prompts: Sequence[str]) -> np.ndarray:
        """(N, P) array of per-image probability rows over the prompts."""
