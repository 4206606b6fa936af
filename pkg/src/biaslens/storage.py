"""Deterministic on-disk containers for arrays, masks, and JSON artifacts.

Reruns of a pipeline must reproduce artifacts byte for byte, so nothing here
may embed wall-clock state. Array bundles are ZIP containers written with a
fixed entry timestamp and no compression (compression headers are stable, but
the fixed-date store keeps the format trivially diffable), JSON is emitted
with sorted keys, and PNG masks go through Pillow's timestamp-free encoder.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping, Tuple

import numpy as np
from PIL import Image

from .types import BiasLensError, BinaryMask, Heatmap

BUNDLE_FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class StorageError(BiasLensError):
    """Raised on malformed or unreadable artifact files."""


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def canonical_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_json(path, payload) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(canonical_json(payload), encoding="utf-8")
    return p


def load_json(path):
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise StorageError(f"artifact not found: {p}") from None
    except json.JSONDecodeError as e:
        raise StorageError(f"{p}: malformed JSON: {e}") from e


def save_array_bundle(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    """Write named arrays plus a metadata block into one deterministic file.

    Keys become container entry names and must not contain ``/``. Arrays are
    stored in ``.npy`` layout; identical inputs produce identical bytes.
    """
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    meta_out = dict(meta or {})
    meta_out["format_version"] = BUNDLE_FORMAT_VERSION
    for key in arrays:
        if "/" in key or not key:
            raise StorageError(f"invalid bundle key {key!r}")
    with zipfile.ZipFile(p, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_zip_entry("meta.json"), canonical_json(meta_out))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(_zip_entry(f"arrays/{key}.npy"), buf.getvalue())
    return p


def load_array_bundle(path) -> Tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise StorageError(f"bundle not found: {p}")
    arrays = {}
    try:
        with zipfile.ZipFile(p, "r") as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    key = name[len("arrays/"):-len(".npy")]
                    arrays[key] = np.lib.format.read_array(
                        io.BytesIO(zf.read(name)), allow_pickle=False
                    )
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise StorageError(f"{p}: malformed bundle: {e}") from e
    return arrays, meta


def save_heatmap_store(path, heatmaps: Mapping[str, Heatmap], meta: Mapping | None = None) -> Path:
    """Persist a sample-id -> heatmap mapping as one bundle."""
    arrays = {sid: hm.values.astype(np.float64) for sid, hm in heatmaps.items()}
    meta_out = dict(meta or {})
    meta_out["kind"] = "heatmaps"
    meta_out["source_sizes"] = {sid: list(hm.source_size) for sid, hm in heatmaps.items()}
    return save_array_bundle(path, arrays, meta_out)


def load_heatmap_store(path) -> Tuple[dict, dict]:
    arrays, meta = load_array_bundle(path)
    if meta.get("kind") != "heatmaps":
        raise StorageError(f"{path}: not a heatmap store")
    sizes = meta.get("source_sizes", {})
    heatmaps = {}
    for sid, values in arrays.items():
        size = tuple(sizes.get(sid, values.shape))
        heatmaps[sid] = Heatmap(values=values, source_size=size)
    return heatmaps, meta


def save_image(path, image: np.ndarray) -> Path:
    """Store one float image as .npy (exact, timestamp-free)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as f:
        np.lib.format.write_array(f, np.ascontiguousarray(image.astype(np.float32)), allow_pickle=False)
    return p


def load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise StorageError(f"image not found: {p}")
    with open(p, "rb") as f:
        return np.lib.format.read_array(f, allow_pickle=False).astype(np.float64)


def mask_path(mask_root, feature_name: str, sample_id: str) -> Path:
    """Canonical location of a region mask: <root>/<feature>/<sample>.png."""
    return Path(mask_root) / feature_name / f"{sample_id}.png"


def save_mask_png(path, mask: BinaryMask) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.values * 255).convert("1")
    img.save(p, format="PNG")
    return p


def load_mask_png(path) -> BinaryMask:
    p = Path(path)
    if not p.exists():
        raise StorageError(f"mask not found: {p}")
    with Image.open(p) as img:
        values = np.asarray(img.convert("L"))
    return BinaryMask(values=(values > 127).astype(np.uint8))


def save_predictions(path, records, *, split_of=None, true_labels=None, meta=None) -> Path:
    """Serialize prediction records with enough context to evaluate later."""
    payload = {
        "format_version": 1,
        "records": [
            {
                "id": r.sample_id,
                "predicted_label": r.predicted_label,
                "probabilities": [round(float(p), 12) for p in r.class_probabilities],
                "correct": r.correct,
                **({"split": split_of[r.sample_id]} if split_of else {}),
                **({"true_label": int(true_labels[r.sample_id])} if true_labels else {}),
            }
            for r in records
        ],
    }
    if meta:
        payload["meta"] = dict(meta)
    return save_json(path, payload)


def load_predictions(path) -> dict:
    payload = load_json(path)
    if "records" not in payload:
        raise StorageError(f"{path}: not a predictions file")
    return payload
