"""Report assembly: schema validation, provenance isolation, and rendering."""

import pytest

from biaslens import storage
from biaslens.report import (
    REFERENCE_ANCHORS,
    REPORT_SCHEMA_VERSION,
    ReportError,
    build_provenance,
    emit_report,
    render_markdown,
    validate_report,
)


def sample_metrics():
    return {
        "erm": {
            "worst_group_accuracy": 0.25,
            "adjusted_average_accuracy": 0.9,
            "plain_average_accuracy": 0.875,
            "accuracy_gap": 0.65,
            "per_group": {"crimson|striped": 1.0, "teal|striped": 0.25},
            "group_sizes": {"crimson|striped": 12, "teal|striped": 12},
        }
    }


def sample_slices():
    return {
        "n_slices": 2,
        "slices": [
            {
                "slice": 0,
                "size": 10,
                "error_rate": 0.8,
                "majority_label": "striped",
                "majority_predicted": "checker",
            },
            {
                "slice": 1,
                "size": 38,
                "error_rate": 0.05,
                "majority_label": "checker",
                "majority_predicted": "checker",
            },
        ],
        "precision_at_k": 0.9,
        "k": 10,
        "events": [],
        "config": {},
    }


class TestProvenance:
    def test_volatile_fields_live_under_run(self):
        prov = build_provenance({"tau": 0.7})
        assert set(prov) == {"package_version", "config", "run"}
        assert set(prov["run"]) == {"timestamp", "host"}
        assert prov["config"] == {"tau": 0.7}

    def test_schema_accepts_a_full_payload(self):
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "provenance": build_provenance(),
            "metrics": sample_metrics(),
        }
        validate_report(payload)

    def test_schema_rejects_wrong_version_and_missing_run(self):
        payload = {
            "schema_version": "0.9",
            "provenance": build_provenance(),
        }
        with pytest.raises(ReportError):
            validate_report(payload)
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "provenance": {"package_version": "x", "config": {}},
        }
        with pytest.raises(ReportError):
            validate_report(payload)


class TestEmit:
    def test_writes_json_and_markdown(self, tmp_path):
        result = emit_report(
            tmp_path, metrics=sample_metrics(), slices=sample_slices(), config={"seed": 0}
        )
        payload = storage.load_json(result["json"])
        assert payload["metrics"] == sample_metrics()
        assert payload["reference_anchors"] == REFERENCE_ANCHORS
        text = result["markdown"].read_text()
        assert "## Grouped accuracy" in text
        assert "## Discovered slices" in text

    def test_discovery_only_report_has_just_that_section(self, tmp_path):
        result = emit_report(tmp_path, slices=sample_slices())
        text = result["markdown"].read_text()
        assert "## Discovered slices" in text
        assert "## Grouped accuracy" not in text
        assert "## Bias keywords" not in text
        assert result["payload"]["metrics"] is None

    def test_empty_report_is_an_error(self, tmp_path):
        with pytest.raises(ReportError, match="nothing to report"):
            emit_report(tmp_path)

    def test_group_ids_are_escaped_in_markdown_tables(self, tmp_path):
        result = emit_report(tmp_path, metrics=sample_metrics())
        text = result["markdown"].read_text()
        assert "crimson\\|striped" in text
        assert "| crimson|striped |" not in text

    def test_reruns_differ_only_in_the_run_block(self, tmp_path):
        a = emit_report(tmp_path / "a", metrics=sample_metrics(), config={"seed": 1})
        b = emit_report(tmp_path / "b", metrics=sample_metrics(), config={"seed": 1})
        pa = storage.load_json(a["json"])
        pb = storage.load_json(b["json"])
        pa["provenance"].pop("run")
        pb["provenance"].pop("run")
        assert pa == pb
        assert (tmp_path / "a" / "report.md").read_bytes() == (
            tmp_path / "b" / "report.md"
        ).read_bytes()

    def test_anchors_can_be_left_out(self, tmp_path):
        result = emit_report(tmp_path, metrics=sample_metrics(), include_anchors=False)
        assert "reference_anchors" not in result["payload"]


class TestMarkdown:
    def test_none_values_render_as_dashes(self):
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "provenance": build_provenance(),
            "slices": {
                "slices": [
                    {
                        "slice": 0,
                        "size": 0,
                        "error_rate": None,
                        "majority_label": None,
                        "majority_predicted": None,
                    }
                ]
            },
        }
        text = render_markdown(payload)
        assert "| 0 | 0 | - | - | - |" in text

    def test_floats_render_with_four_places(self):
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "provenance": build_provenance(),
            "metrics": sample_metrics(),
        }
        text = render_markdown(payload)
        assert "0.2500" in text

    def test_overlap_table_lists_strata(self):
        overlap = {
            "tau": 0.7,
            "strata": {
                "overall": {
                    "iou_core": {"count": 4, "mean": 0.1, "median": 0.1, "q1": 0.05, "q3": 0.2}
                }
            },
        }
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "provenance": build_provenance(),
            "overlap": overlap,
        }
        text = render_markdown(payload)
        assert "| overall | iou_core | 4 | 0.1000 | 0.1000 | 0.0500 | 0.2000 |" in text
