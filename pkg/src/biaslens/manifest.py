"""Dataset manifests: the single source of truth for samples and groups.

A manifest is a table of samples (CSV or JSON-lines, one row per sample with
columns ``id, image_path, label, attribute, split``) next to a sidecar
``<name>.meta.json`` declaring the ordered class and attribute vocabularies.
Labels and attributes are stored by name in the table and resolved to indices
against the sidecar on load. Groups are never stored: a sample's group is
derived as ``"attribute|class"``, and the training-majority map sends each
attribute to the class it most often co-occurs with in the training split
(lowest class index on ties).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple

from .types import (
    BiasLensError,
    GroupTable,
    SampleRecord,
    SPLITS,
    format_group_id,
)

MANIFEST_COLUMNS = ("id", "image_path", "label", "attribute", "split")
MANIFEST_FORMAT_VERSION = 1
DEFAULT_BASENAME = "manifest.csv"


class ManifestError(BiasLensError):
    """Raised on malformed manifest files or inconsistent annotations."""


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable view of a dataset: samples, vocabularies, and group table."""

    records: Tuple[SampleRecord, ...]
    class_names: Tuple[str, ...]
    attribute_names: Tuple[str, ...]
    group_table: GroupTable
    root: Optional[Path] = None
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ManifestError(f"duplicate sample id {dup!r}")
        object.__setattr__(self, "extra", dict(self.extra))

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> Tuple[SampleRecord, ...]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}, expected one of {SPLITS}")
        return tuple(r for r in self.records if r.split == name)

    def get(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise ManifestError(f"no sample with id {sample_id!r}")

    def image_path(self, record: SampleRecord) -> Path:
        if self.root is None:
            return Path(record.image_path)
        return self.root / record.image_path

    def group_of(self, record: SampleRecord) -> Optional[str]:
        return record.group


def build_group_table(
    records: Sequence[SampleRecord],
    class_names: Sequence[str],
    attribute_names: Sequence[str],
) -> GroupTable:
    """Derive the group table (groups, train counts, majority map) from records."""
    combos = sorted({(r.attribute, r.label) for r in records if r.attribute is not None})
    train_counts = {g: 0 for g in combos}
    for r in records:
        if r.split == "train" and r.attribute is not None:
            train_counts[(r.attribute, r.label)] += 1
    table = GroupTable(
        groups=tuple(combos),
        train_counts=train_counts,
        majority_map={},
        attribute_names=tuple(attribute_names),
        class_names=tuple(class_names),
    )
    majority = derive_majority_map(table)
    return GroupTable(
        groups=table.groups,
        train_counts=train_counts,
        majority_map=majority,
        attribute_names=tuple(attribute_names),
        class_names=tuple(class_names),
    )


def derive_majority_map(table: GroupTable) -> dict:
    """Map each attribute to its training-majority class.

    Ties break toward the lowest class index. An attribute that appears in
    the manifest but has no training samples is an error: its majority class
    would be undefined.
    """
    attrs = sorted({a for a, _ in table.groups})
    majority = {}
    for a in attrs:
        counts = {y: table.train_counts.get((a, y), 0) for (aa, y) in table.groups if aa == a}
        total = sum(counts.values())
        if total == 0:
            name = table.attribute_names[a] if a < len(table.attribute_names) else str(a)
            raise ManifestError(
                f"attribute {name!r} has no training samples; majority class undefined"
            )
        best = max(counts.values())
        majority[a] = min(y for y, n in counts.items() if n == best)
    return majority


def _sidecar_path(table_path: Path) -> Path:
    return table_path.with_name(table_path.stem + ".meta.json")


def _resolve_table_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        for candidate in (p / DEFAULT_BASENAME, p / "manifest.jsonl"):
            if candidate.exists():
                return candidate
        raise ManifestError(f"no {DEFAULT_BASENAME} or manifest.jsonl under {p}")
    return p


def _parse_rows(table_path: Path) -> list[dict]:
    text = table_path.read_text(encoding="utf-8")
    rows = []
    if table_path.suffix == ".jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{table_path}:{lineno}: malformed JSON row: {e}") from e
            if not isinstance(row, dict):
                raise ManifestError(f"{table_path}:{lineno}: row must be a JSON object")
            rows.append({k: ("" if v is None else str(v)) for k, v in row.items()})
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None:
            raise ManifestError(f"{table_path}: empty manifest table")
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames and c != "attribute"]
        if missing:
            raise ManifestError(f"{table_path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if any(v is None for v in row.values()):
                raise ManifestError(f"{table_path}:{lineno}: malformed row (wrong field count)")
            rows.append(row)
    return rows


def load_manifest(path) -> DatasetManifest:
    """Load a manifest table plus sidecar and derive its group table.

    ``path`` may be the table file itself or a directory containing
    ``manifest.csv`` (or ``manifest.jsonl``).
    """
    table_path = _resolve_table_path(path)
    if not table_path.exists():
        raise ManifestError(f"manifest table not found: {table_path}")
    sidecar = _sidecar_path(table_path)
    if not sidecar.exists():
        raise ManifestError(f"manifest sidecar not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{sidecar}: malformed JSON: {e}") from e
    for key in ("classes", "attributes"):
        if key not in meta or not isinstance(meta[key], list):
            raise ManifestError(f"{sidecar}: missing or invalid {key!r} list")
    class_names = tuple(str(c) for c in meta["classes"])
    attribute_names = tuple(str(a) for a in meta["attributes"])
    if len(set(class_names)) != len(class_names):
        raise ManifestError(f"{sidecar}: duplicate class names")
    if len(set(attribute_names)) != len(attribute_names):
        raise ManifestError(f"{sidecar}: duplicate attribute names")
    class_index = {c: i for i, c in enumerate(class_names)}
    attr_index = {a: i for i, a in enumerate(attribute_names)}

    records = []
    for lineno, row in enumerate(_parse_rows(table_path), start=2):
        where = f"{table_path}:{lineno}"
        for col in ("id", "image_path", "label", "split"):
            if col not in row or row[col] == "":
                raise ManifestError(f"{where}: missing value for {col!r}")
        label_name = row["label"]
        if label_name not in class_index:
            raise ManifestError(f"{where}: unknown class {label_name!r}")
        attr_name = row.get("attribute", "") or ""
        if attr_name and attr_name not in attr_index:
            raise ManifestError(f"{where}: unknown attribute {attr_name!r}")
        attribute = attr_index[attr_name] if attr_name else None
        group = format_group_id(attr_name, label_name) if attr_name else None
        try:
            records.append(
                SampleRecord(
                    id=row["id"],
                    image_path=row["image_path"],
                    label=class_index[label_name],
                    attribute=attribute,
                    split=row["split"],
                    group=group,
                )
            )
        except BiasLensError as e:
            raise ManifestError(f"{where}: {e}") from e

    extra = {k: v for k, v in meta.items() if k not in ("classes", "attributes", "format_version")}
    table = build_group_table(records, class_names, attribute_names)
    return DatasetManifest(
        records=tuple(records),
        class_names=class_names,
        attribute_names=attribute_names,
        group_table=table,
        root=table_path.parent,
        extra=extra,
    )


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the manifest table and sidecar in canonical form.

    Canonical form fixes the column order and key ordering, so re-saving a
    loaded manifest reproduces the file byte for byte.
    """
    p = Path(path)
    if p.is_dir() or p.suffix not in (".csv", ".jsonl"):
        p.mkdir(parents=True, exist_ok=True)
        table_path = p / DEFAULT_BASENAME
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
        table_path = p

    def render(record: SampleRecord) -> dict:
        return {
            "id": record.id,
            "image_path": record.image_path,
            "label": manifest.class_names[record.label],
            "attribute": "" if record.attribute is None else manifest.attribute_names[record.attribute],
            "split": record.split,
        }

    if table_path.suffix == ".jsonl":
        lines = [json.dumps(render(r), sort_keys=True) for r in manifest.records]
        table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(MANIFEST_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for r in manifest.records:
            writer.writerow(render(r))
        table_path.write_text(buf.getvalue(), encoding="utf-8")

    meta = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "classes": list(manifest.class_names),
        "attributes": list(manifest.attribute_names),
    }
    for k in sorted(manifest.extra):
        meta[k] = manifest.extra[k]
    _sidecar_path(table_path).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return table_path


def conflicting_slice_members(
    manifest: DatasetManifest, split: str | None = None
) -> dict[str, frozenset]:
    """Ground-truth bias-conflicting slices: group id -> member sample ids.

    A sample belongs to a conflicting slice when its attribute's training
    majority class differs from its label.
    """
    table = manifest.group_table
    conflicting = set(table.conflicting_groups())
    members: dict[str, set] = {table.group_id(a, y): set() for a, y in conflicting}
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        if r.attribute is None:
            continue
        key = (r.attribute, r.label)
        if key in conflicting:
            members[table.group_id(*key)].add(r.id)
    return {g: frozenset(ids) for g, ids in members.items()}
