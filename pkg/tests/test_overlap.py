"""IoU arithmetic and the heatmap-vs-region overlap audit."""

import numpy as np
import pytest

from biaslens.overlap import OverlapError, iou, load_mask_dir, overlap_audit
from biaslens.synthdata import plant_heatmaps
from biaslens.types import BinaryMask, Heatmap, ValidationError


def mask(values):
    return BinaryMask(np.asarray(values, dtype=np.uint8))


class TestIoU:
    def test_identical_masks_score_one(self):
        m = mask([[1, 0], [0, 1]])
        assert iou(m, m) == 1.0

    def test_disjoint_masks_score_zero(self):
        assert iou(mask([[1, 0], [0, 0]]), mask([[0, 0], [0, 1]])) == 0.0

    def test_partial_overlap_counts_cells(self):
        a = mask([[1, 1], [0, 0]])
        b = mask([[1, 0], [1, 0]])
        assert iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_two_empty_masks_agree_perfectly(self):
        z = mask(np.zeros((3, 3)))
        assert iou(z, z) == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            iou(mask([[1]]), mask([[1, 0]]))


class TestAudit:
    def test_planted_spurious_heatmaps_separate_the_regions(self, manifest):
        heatmaps = plant_heatmaps(manifest, target="spurious", sharpness=64.0, split="val")
        masks = load_mask_dir(manifest, manifest.root / "masks", ("core", "spurious"))
        report = overlap_audit(manifest, heatmaps, masks, tau=0.7, split="val")
        overall = report.strata["overall"]
        assert overall["iou_spurious"]["count"] == 48
        assert overall["iou_spurious"]["mean"] == pytest.approx(1.0)
        assert overall["iou_core"]["mean"] == pytest.approx(0.0)

    def test_strata_cover_alignment_and_class(self, manifest):
        heatmaps = plant_heatmaps(manifest, target="core", split="val")
        masks = load_mask_dir(manifest, manifest.root / "masks", ("core", "spurious"))
        report = overlap_audit(manifest, heatmaps, masks, tau=0.7, split="val")
        for key in ("overall", "aligned", "conflicting"):
            assert key in report.strata
        for cls in manifest.class_names:
            assert f"class:{cls}" in report.strata
            assert f"aligned/class:{cls}" in report.strata
        # the four alignment x class strata partition the val split
        total = sum(
            report.strata[f"{s}/class:{c}"]["iou_core"]["count"]
            for s in ("aligned", "conflicting")
            for c in manifest.class_names
        )
        assert total == 48

    def test_all_empty_heatmaps_give_zero_overlap(self, manifest):
        size = manifest.extra["synthetic_world"]["image_size"]
        zero = Heatmap(np.zeros((size, size)), source_size=(size, size))
        heatmaps = {r.id: zero for r in manifest.split("val")}
        masks = load_mask_dir(manifest, manifest.root / "masks", ("core", "spurious"))
        report = overlap_audit(manifest, heatmaps, masks, tau=0.7, split="val")
        # empty prediction vs non-empty region mask has empty intersection
        assert report.strata["overall"]["iou_core"]["mean"] == 0.0
        assert report.strata["overall"]["iou_spurious"]["mean"] == 0.0

    def test_missing_heatmaps_and_masks_are_excluded_with_reasons(self, manifest):
        records = manifest.split("val")
        heatmaps = plant_heatmaps(manifest, target="core", split="val")
        del heatmaps[records[0].id]
        masks = load_mask_dir(manifest, manifest.root / "masks", ("core", "spurious"))
        del masks["core"][records[1].id]
        report = overlap_audit(manifest, heatmaps, masks, tau=0.7, split="val")
        reasons = dict(report.excluded)
        assert reasons[records[0].id] == "missing heatmap"
        assert reasons[records[1].id].startswith("missing mask")
        assert report.strata["overall"]["iou_core"]["count"] == 46

    def test_coarse_heatmaps_are_resized_onto_the_masks(self, manifest):
        size = manifest.extra["synthetic_world"]["image_size"]
        coarse = Heatmap(np.ones((4, 4)), source_size=(size, size))
        heatmaps = {r.id: coarse for r in manifest.split("val")}
        masks = load_mask_dir(manifest, manifest.root / "masks", ("spurious",))
        report = overlap_audit(manifest, heatmaps, masks, tau=0.5, split="val")
        # an everywhere-on heatmap overlaps the background by its area share
        spurious_share = 1.0 - (16 * 16) / (size * size)
        assert report.strata["overall"]["iou_spurious"]["mean"] == pytest.approx(
            spurious_share
        )

    def test_errors_on_unusable_inputs(self, manifest):
        masks = load_mask_dir(manifest, manifest.root / "masks", ("core",))
        with pytest.raises(OverlapError):
            overlap_audit(manifest, {}, {}, split="val")
        with pytest.raises(OverlapError):
            overlap_audit(manifest, {}, masks, split="val")
