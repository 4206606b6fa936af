"""Synthetic world rendering and spurious-correlation dataset generation."""

import numpy as np
import pytest

from biaslens import storage
from biaslens.grounding import threshold_mask
from biaslens.manifest import load_manifest
from biaslens.overlap import iou
from biaslens.synthdata import (
    SynthDataError,
    core_rule_predict,
    generate_spurious_dataset,
    plant_heatmaps,
    spurious_rule_predict,
)
from biaslens.types import ValidationError
from biaslens.world import PALETTE, SyntheticWorld, WorldError, pattern_field


class TestWorld:
    def test_defaults_validate(self):
        world = SyntheticWorld()
        assert world.class_names == ("striped", "checker")
        assert world.attribute_names == ("crimson", "teal")
        assert world.image_size == 32

    def test_rejects_unknown_vocabulary_and_bad_geometry(self):
        with pytest.raises(WorldError):
            SyntheticWorld(class_names=("plaid",))
        with pytest.raises(WorldError):
            SyntheticWorld(attribute_names=("chartreuse",))
        with pytest.raises(ValidationError):
            SyntheticWorld(image_size=4)
        with pytest.raises(ValidationError):
            SyntheticWorld(core_fraction=0.95)

    def test_pattern_field_rejects_unknown_name(self):
        with pytest.raises(WorldError):
            pattern_field("plaid", (4, 4), 0.25)

    def test_render_is_deterministic_for_a_given_stream(self):
        world = SyntheticWorld(noise_level=0.05, color_jitter=0.1, distractor_level=0.3)
        a = world.render(0, 1, np.random.default_rng(11))
        b = world.render(0, 1, np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)
        c = world.render(0, 1, np.random.default_rng(12))
        assert np.abs(a - c).max() > 0

    def test_background_carries_the_attribute_color(self):
        world = SyntheticWorld(noise_level=0.0)
        img = world.render(0, 1, np.random.default_rng(0))
        bg = world.background_mask()
        np.testing.assert_allclose(img[bg].mean(axis=0), PALETTE["teal"], atol=1e-9)

    def test_distractor_only_touches_the_core(self):
        plain = SyntheticWorld(noise_level=0.0)
        messy = SyntheticWorld(noise_level=0.0, distractor_level=1.0)
        img_plain = plain.render(0, 0, np.random.default_rng(5))
        img_messy = messy.render(0, 0, np.random.default_rng(5))
        bg = plain.background_mask()
        np.testing.assert_array_equal(img_plain[bg], img_messy[bg])
        # full-strength distractor replaces the core pattern entirely
        core = plain.core_mask()
        assert np.abs(img_plain[core] - img_messy[core]).max() > 0.01

    def test_nearest_class_and_attribute_read_back_clean_renders(self):
        world = SyntheticWorld(noise_level=0.02)
        rng = np.random.default_rng(3)
        for cid in range(2):
            for aid in range(2):
                img = world.render(cid, aid, rng)
                assert world.nearest_class(img) == cid
                assert world.nearest_attribute(img) == aid

    def test_nearest_class_needs_a_visible_core(self):
        world = SyntheticWorld(noise_level=0.0)
        img = world.render(0, 0, np.random.default_rng(0))
        hidden = np.zeros((world.image_size, world.image_size), dtype=bool)
        with pytest.raises(WorldError):
            world.nearest_class(img, visible=hidden)

    def test_majority_attribute_cycles_classes(self):
        world = SyntheticWorld()
        assert world.majority_attribute(0) == 0
        assert world.majority_attribute(1) == 1

    def test_dict_round_trip_keeps_every_knob(self):
        world = SyntheticWorld(
            noise_level=0.1, core_contrast=0.3, distractor_level=0.4, color_jitter=0.2
        )
        again = SyntheticWorld.from_dict(world.to_dict())
        assert again == world


class TestGeneration:
    def test_rejects_degenerate_requests(self, tmp_path):
        with pytest.raises(SynthDataError):
            generate_spurious_dataset(tmp_path / "a", classes=("striped",), attributes=("crimson",))
        with pytest.raises(SynthDataError):
            generate_spurious_dataset(tmp_path / "b", correlation=0.2)
        with pytest.raises(SynthDataError):
            generate_spurious_dataset(tmp_path / "c", n_train=0)

    def test_full_correlation_leaves_no_conflicting_train_samples(self, tmp_path):
        man = generate_spurious_dataset(
            tmp_path / "rho1", n_train=40, n_val=8, n_test=8, correlation=1.0, write_masks=False
        )
        table = man.group_table
        for a, y in table.conflicting_groups():
            assert table.train_counts[(a, y)] == 0

    def test_half_correlation_balances_groups_within_3_sigma(self, tmp_path):
        # correlation 0.5 on a 2x2 world is attribute-independent labeling
        man = generate_spurious_dataset(
            tmp_path / "rho05",
            n_train=1000,
            n_val=8,
            n_test=8,
            correlation=0.5,
            write_masks=False,
            seed=2,
        )
        counts = dict(man.group_table.train_counts)
        assert sum(counts.values()) == 1000
        # per class 500 draws, attribute Bernoulli(1/2): 3 sigma ~ 33.5
        for g, n in counts.items():
            assert abs(n - 250) <= 34, f"group {g} count {n} outside 3 sigma"

    def test_eval_splits_cycle_groups_in_balance(self, manifest):
        for split, size in (("val", 48), ("test", 48)):
            records = manifest.split(split)
            assert len(records) == size
            per_group = {}
            for r in records:
                per_group[r.group] = per_group.get(r.group, 0) + 1
            assert set(per_group.values()) == {size // 4}

    def test_generation_is_deterministic(self, tmp_path):
        kwargs = dict(n_train=12, n_val=4, n_test=4, seed=9)
        man_a = generate_spurious_dataset(tmp_path / "a", **kwargs)
        man_b = generate_spurious_dataset(tmp_path / "b", **kwargs)
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (
            tmp_path / "b" / "manifest.csv"
        ).read_bytes()
        for r in man_a.records:
            np.testing.assert_array_equal(
                storage.load_image(man_a.image_path(r)),
                storage.load_image(man_b.image_path(r)),
            )

    def test_masks_cover_core_and_background(self, manifest):
        r = manifest.split("train")[0]
        core = storage.load_mask_png(storage.mask_path(manifest.root / "masks", "core", r.id))
        spurious = storage.load_mask_png(
            storage.mask_path(manifest.root / "masks", "spurious", r.id)
        )
        assert core.area > 0 and spurious.area > 0
        assert not np.any(core.as_bool() & spurious.as_bool())
        assert np.all(core.as_bool() | spurious.as_bool())


class TestPlantedHeatmaps:
    def test_sharp_planting_reproduces_the_mask(self, manifest):
        r = manifest.split("val")[0]
        hm = plant_heatmaps(manifest, target="spurious", sharpness=64.0, sample_ids=[r.id])[r.id]
        mask = storage.load_mask_png(storage.mask_path(manifest.root / "masks", "spurious", r.id))
        got = threshold_mask(hm, 0.7)
        assert iou(got, mask) == 1.0

    def test_soft_planting_still_lands_on_the_target_region(self, manifest):
        r = manifest.split("val")[0]
        hm = plant_heatmaps(manifest, target="spurious", sharpness=32.0, sample_ids=[r.id])[r.id]
        spurious = storage.load_mask_png(
            storage.mask_path(manifest.root / "masks", "spurious", r.id)
        )
        core = storage.load_mask_png(storage.mask_path(manifest.root / "masks", "core", r.id))
        got = threshold_mask(hm, 0.7)
        assert iou(got, spurious) >= 0.9
        assert iou(got, core) <= 0.05

    def test_split_filter_and_unknown_target(self, manifest):
        hms = plant_heatmaps(manifest, target="core", split="val")
        assert set(hms) == {r.id for r in manifest.split("val")}
        with pytest.raises(SynthDataError):
            plant_heatmaps(manifest, target="edges")


class TestRulePredictors:
    def test_spurious_rule_tracks_the_attribute(self, manifest, val_arrays, world):
        ids, images, labels, groups = val_arrays
        predicted = spurious_rule_predict(images, world)
        table = manifest.group_table
        for sid, y, yhat in zip(ids, labels, predicted):
            r = manifest.get(sid)
            aligned = table.is_aligned(r.attribute, r.label)
            assert (yhat == y) == aligned

    def test_core_rule_is_nearly_perfect_on_clean_data(self, val_arrays, world):
        ids, images, labels, groups = val_arrays
        predicted = core_rule_predict(images, world)
        assert (predicted == labels).mean() >= 0.95
