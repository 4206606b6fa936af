"""Bias auditing toolkit for image classifiers.

Discovers semantically coherent data slices where a classifier
underperforms, describes them with keywords, and mitigates them; every
stage can optionally run on explanation-grounded inputs (pixels kept only
where the model's own heatmap is confident).
"""

__version__ = "0.1.0"

from .types import (  # noqa: E402
    BiasLensError,
    BinaryMask,
    GroundingConfig,
    GroupTable,
    Heatmap,
    PredictionRecord,
    SampleRecord,
    ValidationError,
)
from .manifest import DatasetManifest, load_manifest, save_manifest  # noqa: E402
from .world import SyntheticWorld  # noqa: E402

__all__ = [
    "__version__",
    "BiasLensError",
    "ValidationError",
    "BinaryMask",
    "GroundingConfig",
    "GroupTable",
    "Heatmap",
    "PredictionRecord",
    "SampleRecord",
    "DatasetManifest",
    "load_manifest",
    "save_manifest",
    "SyntheticWorld",
]
