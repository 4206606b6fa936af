"""Explanation heatmaps and input grounding.

The native heatmap construction follows the gradient-weighted class
activation recipe: per-feature gradients are globally averaged into scalar
importance weights, feature maps are combined under those weights, negative
evidence is clipped, and the result is min-max normalized to [0, 1] (a
constant map normalizes to all zeros by convention).

Grounding an input keeps only pixels whose (resized) heatmap value reaches
the threshold tau; everything else is suppressed. Stages downstream can then
consume grounded inputs in place of the originals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from . import storage
from ._util import parallel_map
from ._validation import as_float_array
from .manifest import DatasetManifest
from .providers.base import ClassifierProvider, ExplanationBatch
from .types import BiasLensError, BinaryMask, GroundingConfig, Heatmap, ValidationError


class GroundingError(BiasLensError):
    """Raised when grounding inputs are inconsistent."""


def combine_gradcam(
    feature_maps, gradients, source_size: Optional[Tuple[int, int]] = None
) -> Heatmap:
    """Combine feature maps (F, P, Q) and their gradients into one heatmap.

    Weights are the global averages of each feature's gradient map; the
    weighted sum is rectified and min-max normalized. A constant rectified
    map carries no spatial information and maps to all zeros.
    """
    fmaps = as_float_array(feature_maps, "feature_maps", ndim=3)
    grads = as_float_array(gradients, "gradients", ndim=3)
    if fmaps.shape != grads.shape:
        raise ValidationError(
            f"feature_maps {fmaps.shape} and gradients {grads.shape} must share a shape"
        )
    weights = grads.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, fmaps, axes=(0, 0)), 0.0)
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0.0:
        values = np.zeros_like(raw)
    else:
        values = (raw - lo) / (hi - lo)
    if source_size is None:
        source_size = raw.shape
    return Heatmap(values=values, source_size=source_size)


def explanation_heatmaps(
    batch: ExplanationBatch, source_size: Optional[Tuple[int, int]] = None
) -> list[Heatmap]:
    """Turn one explanation batch into heatmaps (native combine or pass-through)."""
    if batch.is_direct:
        return list(batch.heatmaps)
    return [
        combine_gradcam(f, g, source_size=source_size)
        for f, g in zip(batch.feature_maps, batch.gradients)
    ]


def threshold_mask(heatmap: Heatmap, tau: float) -> BinaryMask:
    """Pixels with heatmap value >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    return BinaryMask(values=(heatmap.values >= tau).astype(np.uint8))


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out < 1:
        raise ValidationError(f"target size must be positive, got {n_out}")
    if n_in == 1:
        return np.zeros(n_out)
    return np.linspace(0.0, n_in - 1.0, n_out)


def resize_heatmap(heatmap: Heatmap, size: Tuple[int, int], method: str = "bilinear") -> Heatmap:
    """Resample a heatmap onto a new grid (corner-aligned sampling).

    Bilinear interpolation by default; "nearest" snaps to the closest source
    cell. A 1x1 map extends to a constant field. The result's source_size
    becomes the new grid.
    """
    if method not in ("bilinear", "nearest"):
        raise ValidationError(f"method must be 'bilinear' or 'nearest', got {method!r}")
    h_out, w_out = (int(s) for s in size)
    values = heatmap.values
    h_in, w_in = values.shape
    if (h_in, w_in) == (h_out, w_out):
        return Heatmap(values=values.copy(), source_size=(h_out, w_out))
    ys = _axis_coords(h_in, h_out)
    xs = _axis_coords(w_in, w_out)
    if method == "nearest":
        out = values[np.rint(ys).astype(int)][:, np.rint(xs).astype(int)]
    else:
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h_in - 1)
        x1 = np.minimum(x0 + 1, w_in - 1)
        wy = (ys - y0)[:, None]
        wx = (xs - x0)[None, :]
        top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
        bottom = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
        out = top * (1 - wy) + bottom * wy
    return Heatmap(values=np.clip(out, 0.0, 1.0), source_size=(h_out, w_out))


def apply_visual_grounding(
    image, heatmap: Heatmap, tau: float, fill: str = "zero"
) -> np.ndarray:
    """Suppress pixels whose heatmap value falls below tau.

    The heatmap must already be at image resolution. Zero fill blacks out
    suppressed pixels exactly; mean fill replaces them with the per-channel
    image mean.
    """
    img = as_float_array(image, "image")
    if img.ndim not in (2, 3):
        raise ValidationError(f"image must be 2-D or 3-D, got shape {img.shape}")
    if heatmap.values.shape != img.shape[:2]:
        raise GroundingError(
            f"heatmap shape {heatmap.values.shape} does not match image {img.shape[:2]}; "
            "resize the heatmap first"
        )
    keep = threshold_mask(heatmap, tau).as_bool()
    mask = keep if img.ndim == 2 else keep[:, :, None]
    if fill == "zero":
        return np.where(mask, img, 0.0)
    if fill == "mean":
        mean = img.mean() if img.ndim == 2 else img.mean(axis=(0, 1))
        return np.where(mask, img, mean)
    raise ValidationError(f"fill must be 'zero' or 'mean', got {fill!r}")


@dataclass(frozen=True)
class GroundingResult:
    """Artifacts and accounting from one grounding run."""

    grounded_path: Optional[Path]
    heatmaps_path: Optional[Path]
    n_processed: int
    passthrough: bool
    failures: Tuple[Tuple[str, str], ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "grounded_path": None if self.grounded_path is None else str(self.grounded_path),
            "heatmaps_path": None if self.heatmaps_path is None else str(self.heatmaps_path),
            "n_processed": self.n_processed,
            "passthrough": self.passthrough,
            "n_failures": len(self.failures),
            "failures": [{"id": sid, "error": msg} for sid, msg in self.failures],
        }


def _load_images(manifest: DatasetManifest, records) -> dict:
    return {r.id: storage.load_image(manifest.image_path(r)) for r in records}


def compute_heatmaps(
    classifier: ClassifierProvider,
    images: Mapping[str, np.ndarray],
    targets: Mapping[str, int],
    jobs: int = 1,
) -> dict:
    """Native heatmaps for a batch, grouped by target class for efficiency."""
    ids = sorted(images)
    by_target: dict[int, list[str]] = {}
    for sid in ids:
        by_target.setdefault(int(targets[sid]), []).append(sid)

    def one_class(item):
        target, members = item
        batch = classifier.explain(np.stack([images[sid] for sid in members]), target)
        size = images[members[0]].shape[:2]
        return members, explanation_heatmaps(batch, source_size=size)

    out: dict[str, Heatmap] = {}
    for members, heatmaps in parallel_map(one_class, sorted(by_target.items()), jobs):
        out.update(zip(members, heatmaps))
    return out


def ground_dataset(
    manifest: DatasetManifest,
    config: GroundingConfig,
    out_dir,
    *,
    classifier: Optional[ClassifierProvider] = None,
    heatmaps: Optional[Mapping[str, Heatmap]] = None,
    images: Optional[Mapping[str, np.ndarray]] = None,
    target: str | int = "predicted",
    splits: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> GroundingResult:
    """Produce grounded images (and heatmaps) for a dataset.

    Heatmaps come from an explicit store when given; otherwise they are
    computed natively from the classifier (cam_method must be "gradcam" for
    native computation; other methods must arrive as stores). With grounding
    disabled a pass-through marker is written instead of image payloads.
    Per-sample failures are recorded and skipped, not fatal.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for r in manifest.records if splits is None or r.split in splits]
    if not records:
        raise GroundingError("no samples selected for grounding")

    if not config.enabled:
        marker = storage.save_json(
            out / "grounded.json",
            {"mode": "passthrough", "config": config.to_dict(), "n_samples": len(records)},
        )
        return GroundingResult(
            grounded_path=marker, heatmaps_path=None, n_processed=len(records), passthrough=True
        )

    failures: list[Tuple[str, str]] = []
    if images is None:
        images = {}
        for r in records:
            try:
                images[r.id] = storage.load_image(manifest.image_path(r))
            except BiasLensError as e:
                failures.append((r.id, str(e)))
        records = [r for r in records if r.id in images]
    else:
        missing = [r.id for r in records if r.id not in images]
        if missing:
            raise GroundingError(f"images missing for {len(missing)} samples, e.g. {missing[0]!r}")
        images = {r.id: images[r.id] for r in records}

    heatmaps_path = None
    if heatmaps is None:
        if classifier is None:
            raise GroundingError("need a classifier or a heatmap store to ground a dataset")
        if config.cam_method != "gradcam":
            raise GroundingError(
                f"cam_method {config.cam_method!r} has no native construction here; "
                "provide a heatmap store produced by that method"
            )
        if target == "predicted":
            predicted = classifier.predict(np.stack([images[r.id] for r in records]))
            targets = {r.id: int(p) for r, p in zip(records, predicted)}
        elif target == "true":
            targets = {r.id: r.label for r in records}
        else:
            targets = {r.id: int(target) for r in records}
        heatmaps = compute_heatmaps(
            classifier, {r.id: images[r.id] for r in records}, targets, jobs=jobs
        )
        heatmaps_path = storage.save_heatmap_store(
            out / "heatmaps.blz", heatmaps, {"config": config.to_dict(), "target": str(target)}
        )

    def ground_one(record):
        sid = record.id
        if sid not in heatmaps:
            raise GroundingError(f"no heatmap for sample {sid!r}")
        img = images[sid]
        hm = resize_heatmap(heatmaps[sid], img.shape[:2], method=config.interpolation)
        return apply_visual_grounding(img, hm, config.tau, fill=config.fill)

    grounded: dict[str, np.ndarray] = {}
    for record in records:
        try:
            grounded[record.id] = ground_one(record).astype(np.float32)
        except BiasLensError as e:
            failures.append((record.id, str(e)))

    grounded_path = storage.save_array_bundle(
        out / "grounded.blz",
        grounded,
        {
            "kind": "grounded_images",
            "config": config.to_dict(),
            "n_failures": len(failures),
        },
    )
    return GroundingResult(
        grounded_path=grounded_path,
        heatmaps_path=heatmaps_path,
        n_processed=len(grounded),
        passthrough=False,
        failures=tuple(failures),
    )


def load_grounded_images(path, manifest: Optional[DatasetManifest] = None) -> dict:
    """Read a grounding artifact back as an id -> image mapping.

    Resolves pass-through markers to the original manifest images.
    """
    p = Path(path)
    if p.suffix == ".json" or (p.is_dir() and (p / "grounded.json").exists()):
        marker = storage.load_json(p if p.suffix == ".json" else p / "grounded.json")
        if marker.get("mode") != "passthrough":
            raise GroundingError(f"{p}: unrecognized grounding marker")
        if manifest is None:
            raise GroundingError("pass-through grounding needs the manifest to resolve images")
        return _load_images(manifest, manifest.records)
    if p.is_dir():
        p = p / "grounded.blz"
    arrays, meta = storage.load_array_bundle(p)
    if meta.get("kind") != "grounded_images":
        raise GroundingError(f"{p}: not a grounded-image bundle")
    return {sid: arr.astype(np.float64) for sid, arr in arrays.items()}
