"""Quantifying where explanations land: mask overlap auditing.

For each sample the thresholded heatmap is compared against annotated
region masks (core evidence vs spurious context). Stratifying the overlap
by bias alignment reveals whether a model's attention sits on the spurious
region for bias-aligned groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from . import storage
from .grounding import resize_heatmap, threshold_mask
from .manifest import DatasetManifest
from .types import BiasLensError, BinaryMask, Heatmap, ValidationError


class OverlapError(BiasLensError):
    """Raised on unusable overlap-audit inputs."""


def iou(mask_a: BinaryMask, mask_b: BinaryMask) -> float:
    """Intersection over union of two binary masks.

    Two empty masks are in perfect agreement by convention (1.0).
    """
    if mask_a.shape != mask_b.shape:
        raise ValidationError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    a = mask_a.as_bool()
    b = mask_b.as_bool()
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(int(np.logical_and(a, b).sum()) / union)


def _summary(values: Sequence[float]) -> dict:
    if not values:
        return {"count": 0, "mean": None, "median": None, "q1": None, "q3": None}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "median": float(np.percentile(arr, 50)),
        "q1": float(np.percentile(arr, 25)),
        "q3": float(np.percentile(arr, 75)),
    }


@dataclass(frozen=True)
class OverlapReport:
    """Per-sample IoUs plus stratified summaries."""

    tau: float
    per_sample: Mapping[str, dict]
    strata: Mapping[str, dict]
    excluded: Tuple[Tuple[str, str], ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "per_sample": {k: dict(v) for k, v in sorted(self.per_sample.items())},
            "strata": {k: dict(v) for k, v in sorted(self.strata.items())},
            "excluded": [{"id": sid, "reason": why} for sid, why in self.excluded],
            "n_excluded": len(self.excluded),
        }


def overlap_audit(
    manifest: DatasetManifest,
    heatmaps: Mapping[str, Heatmap],
    masks: Mapping[str, Mapping[str, BinaryMask]],
    tau: float = 0.7,
    split: Optional[str] = None,
    interpolation: str = "bilinear",
) -> OverlapReport:
    """Audit heatmap placement against region masks.

    ``masks`` maps feature name (e.g. "core", "spurious") to per-sample
    masks. Samples lacking a heatmap or any mask are excluded and counted.
    Summaries are emitted overall, per alignment stratum (``aligned``,
    ``conflicting``, ``unannotated``), per class, and for each
    alignment x feature combination.
    """
    if not masks:
        raise OverlapError("need at least one mask feature to audit")
    feature_names = sorted(masks)
    records = [r for r in manifest.records if split is None or r.split == split]
    if not records:
        raise OverlapError("no samples selected for overlap audit")
    table = manifest.group_table

    per_sample: dict[str, dict] = {}
    excluded: list[Tuple[str, str]] = []
    for r in records:
        if r.id not in heatmaps:
            excluded.append((r.id, "missing heatmap"))
            continue
        missing = [f for f in feature_names if r.id not in masks[f]]
        if missing:
            excluded.append((r.id, f"missing mask: {missing[0]}"))
            continue
        shape = masks[feature_names[0]][r.id].shape
        hm = heatmaps[r.id]
        if hm.values.shape != shape:
            hm = resize_heatmap(hm, shape, method=interpolation)
        predicted = threshold_mask(hm, tau)
        if r.attribute is None:
            stratum = "unannotated"
        elif table.is_aligned(r.attribute, r.label):
            stratum = "aligned"
        else:
            stratum = "conflicting"
        entry = {
            "stratum": stratum,
            "class": manifest.class_names[r.label],
            "group": r.group,
        }
        for f in feature_names:
            entry[f"iou_{f}"] = iou(predicted, masks[f][r.id])
        per_sample[r.id] = entry

    if not per_sample:
        raise OverlapError("every selected sample was excluded; nothing to audit")

    strata: dict[str, dict] = {}

    def add_stratum(key: str, members: list[dict]):
        block = {}
        for f in feature_names:
            block[f"iou_{f}"] = _summary([m[f"iou_{f}"] for m in members])
        strata[key] = block

    entries = list(per_sample.values())
    add_stratum("overall", entries)
    for stratum in ("aligned", "conflicting", "unannotated"):
        members = [e for e in entries if e["stratum"] == stratum]
        if members:
            add_stratum(stratum, members)
    for cls in manifest.class_names:
        members = [e for e in entries if e["class"] == cls]
        if members:
            add_stratum(f"class:{cls}", members)
    for stratum in ("aligned", "conflicting"):
        for cls in manifest.class_names:
            members = [e for e in entries if e["stratum"] == stratum and e["class"] == cls]
            if members:
                add_stratum(f"{stratum}/class:{cls}", members)

    return OverlapReport(
        tau=float(tau),
        per_sample=per_sample,
        strata=strata,
        excluded=tuple(excluded),
    )


def load_mask_dir(manifest: DatasetManifest, mask_root, feature_names: Sequence[str]) -> dict:
    """Load per-feature mask directories laid out as <root>/<feature>/<id>.png."""
    out: dict[str, dict[str, BinaryMask]] = {}
    for feature in feature_names:
        found: dict[str, BinaryMask] = {}
        for r in manifest.records:
            p = storage.mask_path(mask_root, feature, r.id)
            if p.exists():
                found[r.id] = storage.load_mask_png(p)
        out[feature] = found
    return out
