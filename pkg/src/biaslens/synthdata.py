"""Synthetic benchmark with a controllable spurious correlation.

Each image is a class-defining texture in a central core square over a
background painted in one of several palette colors (the spurious
attribute). During training, a class's images carry its paired color with
probability rho and another color otherwise; validation and test cycle
through all (class, color) groups in exact balance. The background color is
linearly far easier to read than the texture, so capacity-starved or
under-trained models latch onto it, which is precisely the failure mode the
audit pipeline is meant to expose.

Every sample also ships binary region masks (``core`` and ``spurious``)
under ``masks/<feature>/<id>.png``, and heatmaps concentrated on either
region can be planted to exercise downstream stages without a model.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import storage
from .manifest import DatasetManifest, build_group_table, load_manifest, save_manifest
from .types import BiasLensError, BinaryMask, Heatmap, SampleRecord, ValidationError, format_group_id
from .world import SyntheticWorld


class SynthDataError(BiasLensError):
    """Raised on invalid generator parameters or missing planted inputs."""


MASK_FEATURES = ("core", "spurious")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # Per-sample stream: independent of iteration order and job count.
    mixed = (seed ^ (0x9E3779B97F4A7C15 * (index + 1))) & 0xFFFFFFFFFFFFFFFF
    return np.random.default_rng(mixed)


def generate_spurious_dataset(
    out_dir,
    *,
    n_train: int = 400,
    n_val: int = 120,
    n_test: int = 240,
    classes: Sequence[str] = ("striped", "checker"),
    attributes: Sequence[str] = ("crimson", "teal"),
    correlation: float = 0.95,
    image_size: int = 32,
    noise_level: float = 0.05,
    core_fraction: float = 0.5,
    core_contrast: float = 0.25,
    distractor_level: float = 0.0,
    color_jitter: float = 0.0,
    seed: int = 0,
    write_masks: bool = True,
) -> DatasetManifest:
    """Render a spuriously correlated dataset to disk and return its manifest.

    ``correlation`` is the training-split probability that a class appears
    on its paired color; it must be at least 1/len(attributes) (below that
    the pairing would no longer be the majority). Classes pair with
    attributes positionally.
    """
    classes = tuple(classes)
    attributes = tuple(attributes)
    if len(classes) < 2:
        raise SynthDataError("need at least two classes")
    if len(classes) != len(attributes):
        raise SynthDataError(
            f"classes and attributes must pair up one-to-one, got {len(classes)} vs {len(attributes)}"
        )
    if not (1.0 / len(attributes)) <= correlation <= 1.0:
        raise SynthDataError(
            f"correlation must lie in [1/{len(attributes)}, 1], got {correlation}"
        )
    if min(n_train, n_val, n_test) < 1:
        raise SynthDataError("every split needs at least one sample")

    world = SyntheticWorld(
        class_names=classes,
        attribute_names=attributes,
        image_size=image_size,
        core_fraction=core_fraction,
        core_contrast=core_contrast,
        noise_level=noise_level,
        distractor_level=distractor_level,
        color_jitter=color_jitter,
    )
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    k = len(classes)
    a = len(attributes)
    all_groups = [(y, attr) for y in range(k) for attr in range(a)]

    records: list[SampleRecord] = []
    index = 0
    core = world.core_mask().astype(np.uint8)
    spurious = (1 - core).astype(np.uint8)

    def emit(split: str, i: int, label: int, attribute: int, rng: np.random.Generator):
        nonlocal index
        index += 1
        sid = f"{split}-{i:05d}"
        image = world.render(label, attribute, rng)
        rel = f"images/{sid}.npy"
        storage.save_image(out / rel, image)
        if write_masks:
            storage.save_mask_png(storage.mask_path(out / "masks", "core", sid), BinaryMask(core))
            storage.save_mask_png(
                storage.mask_path(out / "masks", "spurious", sid), BinaryMask(spurious)
            )
        records.append(
            SampleRecord(
                id=sid,
                image_path=rel,
                label=label,
                attribute=attribute,
                split=split,
                group=format_group_id(attributes[attribute], classes[label]),
            )
        )

    for i in range(n_train):
        label = i % k
        rng = _sample_rng(seed, index)  # one stream per sample: group draw, then pixels
        majority = world.majority_attribute(label)
        if a == 1 or rng.uniform() < correlation:
            attribute = majority
        else:
            others = [x for x in range(a) if x != majority]
            attribute = others[int(rng.integers(len(others)))]
        emit("train", i, label, attribute, rng)

    for i in range(n_val):
        label, attribute = all_groups[i % len(all_groups)]
        emit("val", i, label, attribute, _sample_rng(seed, index))
    for i in range(n_test):
        label, attribute = all_groups[i % len(all_groups)]
        emit("test", i, label, attribute, _sample_rng(seed, index))

    table = build_group_table(records, classes, attributes)
    manifest = DatasetManifest(
        records=tuple(records),
        class_names=classes,
        attribute_names=attributes,
        group_table=table,
        root=out,
        extra={
            "synthetic_world": world.to_dict(),
            "generator": {
                "seed": seed,
                "correlation": correlation,
                "n_train": n_train,
                "n_val": n_val,
                "n_test": n_test,
            },
        },
    )
    save_manifest(manifest, out)
    return load_manifest(out)


def _box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        return values.astype(np.float64)
    size = 2 * radius + 1
    padded = np.pad(values.astype(np.float64), radius, mode="constant")
    csum = np.cumsum(padded, axis=0)
    rows = csum[size - 1 :, :] - np.concatenate(
        [np.zeros((1, padded.shape[1])), csum[: -size, :]], axis=0
    )
    csum2 = np.cumsum(rows, axis=1)
    out = csum2[:, size - 1 :] - np.concatenate(
        [np.zeros((rows.shape[0], 1)), csum2[:, : -size]], axis=1
    )
    return out / float(size * size)


def plant_heatmaps(
    manifest: DatasetManifest,
    target: str = "spurious",
    sharpness: float = 8.0,
    sample_ids: Optional[Sequence[str]] = None,
    split: Optional[str] = None,
) -> dict:
    """Synthesize heatmaps concentrated on one annotated region.

    The heatmap is the region mask smoothed by a box blur of radius about
    ``image_size / (2 * sharpness)`` and renormalized to peak 1, so higher
    sharpness hugs the region tighter; beyond ``sharpness >= image_size``
    it equals the binary mask exactly. Masks are read from the dataset's
    mask directory; a missing mask is an error.
    """
    if target not in MASK_FEATURES:
        raise SynthDataError(f"target must be one of {MASK_FEATURES}, got {target!r}")
    if sharpness <= 0:
        raise SynthDataError(f"sharpness must be positive, got {sharpness}")
    if manifest.root is None:
        raise SynthDataError("manifest must be rooted on disk to locate masks")
    records = manifest.records if split is None else manifest.split(split)
    if sample_ids is not None:
        wanted = set(sample_ids)
        records = tuple(r for r in records if r.id in wanted)
        missing = wanted - {r.id for r in records}
        if missing:
            raise SynthDataError(f"unknown sample id {sorted(missing)[0]!r}")
    out: dict[str, Heatmap] = {}
    for r in records:
        p = storage.mask_path(manifest.root / "masks", target, r.id)
        mask = storage.load_mask_png(p)  # raises StorageError when missing
        size = mask.shape[0]
        radius = int(round(size / (2.0 * sharpness)))
        blurred = _box_blur(mask.values, radius)
        peak = blurred.max()
        values = blurred / peak if peak > 0 else blurred
        out[r.id] = Heatmap(values=np.clip(values, 0.0, 1.0), source_size=mask.shape)
    if not out:
        raise SynthDataError("no samples selected for planted heatmaps")
    return out


def core_rule_predict(images, world: SyntheticWorld) -> np.ndarray:
    """Reference labels from the core texture alone (the intended feature)."""
    imgs = np.asarray(images, dtype=np.float64)
    return np.asarray([world.nearest_class(img) for img in imgs], dtype=np.int64)


def spurious_rule_predict(images, world: SyntheticWorld) -> np.ndarray:
    """Labels a pure background-color reader would produce.

    Correct exactly on bias-aligned samples, wrong on every conflicting one.
    """
    imgs = np.asarray(images, dtype=np.float64)
    k = len(world.class_names)
    return np.asarray(
        [world.nearest_attribute(img) % k for img in imgs], dtype=np.int64
    )
