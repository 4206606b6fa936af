from .base import (
    CaptionProvider,
    ClassifierProvider,
    EmbeddingProvider,
    ExplanationBatch,
    ProviderError,
    ZeroShotProvider,
)
from .logistic import (
    LogisticRegressionGD,
    StatMapClassifier,
    TrainingDivergedError,
    load_classifier,
    region_statistics,
    save_classifier,
)
from .synthetic import (
    RegionStatsEmbedder,
    SalienceCaptioner,
    StatPromptZeroShot,
    OracleZeroShot,
    NoisyZeroShot,
    UnknownVocabularyError,
)

__all__ = [
    "CaptionProvider",
    "ClassifierProvider",
    "EmbeddingProvider",
    "ExplanationBatch",
    "ProviderError",
    "ZeroShotProvider",
    "LogisticRegressionGD",
    "StatMapClassifier",
    "TrainingDivergedError",
    "load_classifier",
    "save_classifier",
    "region_statistics",
    "RegionStatsEmbedder",
    "SalienceCaptioner",
    "StatPromptZeroShot",
    "OracleZeroShot",
    "NoisyZeroShot",
    "UnknownVocabularyError",
]
