"""Audit report assembly.

A report gathers whatever stages actually ran (overlap audit, slice
discovery, keywords, mitigation metrics) into one JSON document plus a
human-readable markdown rendering. Wall-clock and host details are
quarantined inside the single ``provenance.run`` field so that reruns stay
byte-identical everywhere else.
"""

from __future__ import annotations

import datetime
import platform
from pathlib import Path
from typing import Mapping, Optional

import jsonschema

from . import __version__, storage
from .types import BiasLensError

REPORT_SCHEMA_VERSION = "1.0"


class ReportError(BiasLensError):
    """Raised when a report would be empty or violates its schema."""


#: Reference numbers from published full-scale benchmark runs of the same
#: method families (real photographic datasets, deep backbones). They are
#: context for reading desk-scale results and are NOT reproducible with the
#: bundled synthetic providers. Values are percentages.
REFERENCE_ANCHORS = {
    "discovery_precision_at_10": {
        "error-aware-mixture": {
            "waterbirds": 90.0,
            "celeba-blond": 87.0,
            "nico-75": 24.0,
            "nico-90": 24.0,
            "nico-95": 24.0,
        },
        "error-aware-mixture+grounding": {
            "waterbirds": 92.0,
            "celeba-blond": 90.0,
            "nico-75": 25.0,
            "nico-90": 24.0,
            "nico-95": 25.4,
        },
        "caption-keyword": {"waterbirds": 92.0, "celeba-blond": 64.0},
        "caption-keyword+grounding": {"waterbirds": 97.0, "celeba-blond": 70.0},
        "bias-amplified-mixture": {
            "waterbirds": 100.0,
            "celeba-blond": 100.0,
            "nico-75": 55.0,
            "nico-90": 60.8,
            "nico-95": 61.0,
        },
        "bias-amplified-mixture+grounding": {
            "waterbirds": 100.0,
            "celeba-blond": 100.0,
            "nico-75": 60.0,
            "nico-90": 66.7,
            "nico-95": 65.0,
        },
    },
    "zero_shot_worst_avg_gap": {
        "base": {
            "waterbirds": [51.0, 79.0, 28.0],
            "celeba-blond": [69.4, 81.9, 12.5],
            "nico-75": [70.7, 76.0, 5.3],
            "nico-90": [70.3, 76.6, 6.3],
            "nico-95": [68.2, 77.3, 9.1],
        },
        "group-informed": {
            "waterbirds": [50.3, 82.7, 32.4],
            "celeba-blond": [71.6, 90.2, 18.6],
            "nico-75": [75.3, 76.8, 1.5],
            "nico-90": [75.8, 77.2, 1.4],
            "nico-95": [75.1, 77.7, 2.6],
        },
        "keyword-augmented": {
            "waterbirds": [55.0, 76.3, 21.3],
            "celeba-blond": [77.5, 86.4, 8.9],
            "nico-75": [77.0, 77.6, 0.6],
            "nico-90": [69.9, 75.0, 5.1],
            "nico-95": [77.1, 75.0, 2.1],
        },
        "keyword-augmented+grounding": {
            "waterbirds": [63.1, 77.8, 14.7],
            "celeba-blond": [78.2, 85.2, 7.0],
            "nico-75": [77.9, 79.4, 1.5],
            "nico-90": [75.3, 80.6, 5.3],
            "nico-95": [74.6, 81.1, 6.5],
        },
    },
    "mitigation_worst_avg_gap": {
        "erm": {"waterbirds": [62.4, 97.7, 35.3], "celeba-blond": [47.0, 94.9, 47.9]},
        "jtt": {"waterbirds": [86.3, 92.8, 6.5], "celeba-blond": [82.0, 88.0, 6.0]},
        "groupdro-annotated-groups": {
            "waterbirds": [88.0, 93.7, 5.7],
            "celeba-blond": [88.4, 91.6, 3.2],
        },
        "groupdro-keyword-groups": {
            "waterbirds": [88.3, 93.8, 5.5],
            "celeba-blond": [87.8, 92.7, 4.9],
        },
        "groupdro-keyword-groups+grounding": {
            "waterbirds": [90.2, 93.4, 3.2],
            "celeba-blond": [91.0, 93.9, 2.9],
        },
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "provenance"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "provenance": {
            "type": "object",
            "required": ["package_version", "config", "run"],
            "properties": {
                "package_version": {"type": "string"},
                "config": {"type": "object"},
                "run": {
                    "type": "object",
                    "required": ["timestamp", "host"],
                    "properties": {
                        "timestamp": {"type": "string"},
                        "host": {"type": "string"},
                    },
                },
            },
        },
        "overlap": {"type": ["object", "null"]},
        "slices": {"type": ["object", "null"]},
        "keywords": {"type": ["object", "null"]},
        "metrics": {"type": ["object", "null"]},
        "reference_anchors": {"type": "object"},
    },
    "additionalProperties": True,
}


def build_provenance(config: Optional[Mapping] = None) -> dict:
    """Provenance block; everything volatile lives under the ``run`` key."""
    return {
        "package_version": __version__,
        "config": dict(config or {}),
        "run": {
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "host": platform.node(),
        },
    }


def validate_report(payload: Mapping) -> None:
    try:
        jsonschema.validate(payload, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ReportError(f"report violates schema: {e.message}") from e


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    # group ids contain "|", which would split a markdown table cell
    return str(value).replace("|", "\\|")


def render_markdown(payload: Mapping) -> str:
    """Human-readable companion to the JSON report."""
    lines = ["# Bias audit report", ""]
    prov = payload.get("provenance", {})
    lines.append(f"Package version: {prov.get('package_version', '?')}")
    lines.append("")

    metrics = payload.get("metrics")
    if metrics:
        lines += ["## Grouped accuracy", ""]
        lines.append("| model | worst group | adjusted average | plain average | gap |")
        lines.append("| --- | --- | --- | --- | --- |")
        for name, m in sorted(metrics.items()):
            lines.append(
                "| {} | {} | {} | {} | {} |".format(
                    name,
                    _fmt(m.get("worst_group_accuracy")),
                    _fmt(m.get("adjusted_average_accuracy")),
                    _fmt(m.get("plain_average_accuracy")),
                    _fmt(m.get("accuracy_gap")),
                )
            )
        lines.append("")
        for name, m in sorted(metrics.items()):
            per_group = m.get("per_group", {})
            if per_group:
                lines.append(f"### Per-group accuracy: {name}")
                lines.append("")
                lines.append("| group | accuracy | n |")
                lines.append("| --- | --- | --- |")
                sizes = m.get("group_sizes", {})
                for g, acc in sorted(per_group.items()):
                    lines.append(f"| {_fmt(g)} | {_fmt(acc)} | {sizes.get(g, '-')} |")
                lines.append("")

    slices = payload.get("slices")
    if slices:
        lines += ["## Discovered slices", ""]
        lines.append("| slice | size | error rate | majority label | majority predicted |")
        lines.append("| --- | --- | --- | --- | --- |")
        for s in slices.get("slices", []):
            lines.append(
                "| {slice} | {size} | {err} | {ml} | {mp} |".format(
                    slice=s.get("slice"),
                    size=s.get("size"),
                    err=_fmt(s.get("error_rate")),
                    ml=_fmt(s.get("majority_label")),
                    mp=_fmt(s.get("majority_predicted")),
                )
            )
        if "precision_at_k" in slices and slices["precision_at_k"] is not None:
            lines.append("")
            lines.append(f"Precision@{slices.get('k', 10)}: {_fmt(slices['precision_at_k'])}")
        lines.append("")

    keywords = payload.get("keywords")
    if keywords:
        lines += ["## Bias keywords", ""]
        for cls, scores in sorted(keywords.get("per_class", {}).items()):
            lines.append(f"### {cls}")
            lines.append("")
            lines.append("| keyword | score | subgroup accuracy |")
            lines.append("| --- | --- | --- |")
            for ks in scores:
                lines.append(
                    f"| {_fmt(ks['keyword'])} | {_fmt(ks['score'])} | {_fmt(ks.get('subgroup_accuracy'))} |"
                )
            lines.append("")

    overlap = payload.get("overlap")
    if overlap:
        lines += ["## Explanation overlap", ""]
        lines.append(f"Threshold tau: {_fmt(overlap.get('tau'))}")
        lines.append("")
        lines.append("| stratum | feature | count | mean IoU | median | q1 | q3 |")
        lines.append("| --- | --- | --- | --- | --- | --- | --- |")
        for stratum, block in sorted(overlap.get("strata", {}).items()):
            for feature, summary in sorted(block.items()):
                lines.append(
                    "| {} | {} | {} | {} | {} | {} | {} |".format(
                        stratum,
                        feature,
                        summary.get("count"),
                        _fmt(summary.get("mean")),
                        _fmt(summary.get("median")),
                        _fmt(summary.get("q1")),
                        _fmt(summary.get("q3")),
                    )
                )
        lines.append("")

    lines += [
        "## Reference context",
        "",
        "Reference numbers from published full-scale benchmark runs are bundled",
        "in the JSON under `reference_anchors`. They contextualize desk-scale",
        "results and are not reproducible with the bundled synthetic providers.",
        "",
    ]
    return "\n".join(lines)


def emit_report(
    out_dir,
    *,
    overlap: Optional[Mapping] = None,
    slices: Optional[Mapping] = None,
    keywords: Optional[Mapping] = None,
    metrics: Optional[Mapping] = None,
    config: Optional[Mapping] = None,
    include_anchors: bool = True,
) -> dict:
    """Write report.json and report.md from whatever sections are present."""
    if overlap is None and slices is None and keywords is None and metrics is None:
        raise ReportError("nothing to report: no stage output was provided")
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "provenance": build_provenance(config),
        "overlap": None if overlap is None else dict(overlap),
        "slices": None if slices is None else dict(slices),
        "keywords": None if keywords is None else dict(keywords),
        "metrics": None if metrics is None else dict(metrics),
    }
    if include_anchors:
        payload["reference_anchors"] = REFERENCE_ANCHORS
    validate_report(payload)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = storage.save_json(out / "report.json", payload)
    md_path = out / "report.md"
    md_path.write_text(render_markdown(payload), encoding="utf-8")
    return {"json": json_path, "markdown": md_path, "payload": payload}
