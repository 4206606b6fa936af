"""Heatmap construction, thresholding, resizing, and input grounding.

Fixture values are hand-computed from the definitions: weights are global
gradient means, the weighted sum is rectified then min-max normalized, and
grounding keeps pixels whose resized heatmap value reaches tau.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from biaslens import storage
from biaslens.grounding import (
    GroundingError,
    apply_visual_grounding,
    combine_gradcam,
    ground_dataset,
    load_grounded_images,
    resize_heatmap,
    threshold_mask,
)
from biaslens.types import GroundingConfig, Heatmap, ValidationError


def heatmap(values):
    values = np.asarray(values, dtype=np.float64)
    return Heatmap(values=values, source_size=values.shape)


class TestCombine:
    def test_single_map_unit_gradient_minmax_normalizes(self):
        fmap = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        grad = np.ones_like(fmap)
        got = combine_gradcam(fmap, grad)
        np.testing.assert_allclose(
            got.values, [[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]], atol=1e-6
        )

    def test_zero_gradients_give_zero_map(self):
        fmap = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        got = combine_gradcam(fmap, np.zeros_like(fmap))
        np.testing.assert_allclose(got.values, np.zeros((2, 2)), atol=1e-6)

    def test_all_negative_sum_rectifies_to_zero(self):
        fmap = np.array([[[-1.0, -2.0], [-3.0, -4.0]]])
        got = combine_gradcam(fmap, np.ones_like(fmap))
        np.testing.assert_allclose(got.values, np.zeros((2, 2)), atol=1e-6)

    def test_multi_map_weights_are_gradient_means(self):
        fmaps = np.stack([np.eye(2), np.ones((2, 2))])
        grads = np.stack([np.full((2, 2), 2.0), np.full((2, 2), -1.0)])
        # weighted sum: 2*eye - ones = [[1,-1],[-1,1]], relu then minmax
        got = combine_gradcam(fmaps, grads)
        np.testing.assert_allclose(got.values, [[1.0, 0.0], [0.0, 1.0]], atol=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            combine_gradcam(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))


class TestThreshold:
    def test_keeps_values_at_or_above_tau(self):
        hm = heatmap([[0.8, 0.6], [0.71, 0.0]])
        np.testing.assert_array_equal(threshold_mask(hm, 0.7).values, [[1, 0], [1, 0]])

    def test_tau_zero_keeps_everything(self):
        hm = heatmap([[0.8, 0.6], [0.71, 0.0]])
        assert threshold_mask(hm, 0.0).area == 4

    def test_tau_outside_unit_interval_rejected(self):
        hm = heatmap([[0.5]])
        with pytest.raises(ValidationError):
            threshold_mask(hm, 1.2)
        with pytest.raises(ValidationError):
            threshold_mask(hm, -0.1)


class TestResize:
    def test_same_size_is_identity(self):
        hm = heatmap([[0.2, 0.4], [0.6, 0.8]])
        out = resize_heatmap(hm, (2, 2))
        np.testing.assert_array_equal(out.values, hm.values)

    def test_single_cell_extends_to_constant(self):
        out = resize_heatmap(heatmap([[0.3]]), (3, 5))
        np.testing.assert_allclose(out.values, np.full((3, 5), 0.3), atol=1e-12)

    def test_bilinear_corner_aligned_upsample(self):
        out = resize_heatmap(heatmap([[0.0, 1.0], [0.0, 1.0]]), (2, 4))
        expected = np.array([[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]] * 2)
        np.testing.assert_allclose(out.values, expected, atol=1e-9)

    def test_nearest_snaps_to_closest_cell(self):
        out = resize_heatmap(heatmap([[0.0, 1.0]]), (1, 4), method="nearest")
        np.testing.assert_array_equal(out.values, [[0.0, 0.0, 1.0, 1.0]])

    def test_source_size_follows_target(self):
        out = resize_heatmap(heatmap([[0.0, 1.0], [1.0, 0.0]]), (8, 8))
        assert out.source_size == (8, 8)
        assert out.values.shape == (8, 8)


class TestGroundingTransform:
    def test_tau_zero_is_identity(self):
        img = np.random.default_rng(0).random((2, 2, 3))
        hm = heatmap([[0.5, 0.0], [1.0, 0.2]])
        np.testing.assert_array_equal(apply_visual_grounding(img, hm, 0.0), img)

    def test_everything_below_tau_blacks_out(self):
        img = np.full((2, 2), 0.5)
        hm = heatmap([[0.1, 0.2], [0.3, 0.0]])
        np.testing.assert_array_equal(apply_visual_grounding(img, hm, 0.7), np.zeros((2, 2)))

    def test_column_selection_with_zero_fill(self):
        img = np.full((2, 2), 0.5)
        hm = heatmap([[0.9, 0.1], [0.9, 0.1]])
        got = apply_visual_grounding(img, hm, 0.7)
        np.testing.assert_array_equal(got, [[0.5, 0.0], [0.5, 0.0]])

    def test_mean_fill_uses_per_channel_means(self):
        img = np.zeros((2, 2, 3))
        img[:, :, 0] = [[0.2, 0.4], [0.6, 0.8]]
        img[:, :, 1] = 0.5
        hm = heatmap([[1.0, 0.0], [0.0, 0.0]])
        got = apply_visual_grounding(img, hm, 0.7, fill="mean")
        np.testing.assert_allclose(got[0, 0], img[0, 0])
        np.testing.assert_allclose(got[1, 1], [0.5, 0.5, 0.0])

    def test_resolution_mismatch_is_an_error(self):
        with pytest.raises(GroundingError):
            apply_visual_grounding(np.zeros((4, 4)), heatmap([[1.0]]), 0.5)


finite_unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
small_shape3 = st.tuples(
    st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)
)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(
        data=st.data(),
        shape=small_shape3,
    )
    def test_combined_heatmap_stays_in_unit_range(self, data, shape):
        elements = st.floats(min_value=-10, max_value=10, allow_nan=False)
        fmaps = data.draw(arrays(np.float64, shape, elements=elements))
        grads = data.draw(arrays(np.float64, shape, elements=elements))
        values = combine_gradcam(fmaps, grads).values
        assert values.min() >= 0.0 and values.max() <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(
        data=st.data(),
        shape=small_shape3,
        log2_scale=st.integers(min_value=-10, max_value=10),
    )
    def test_combined_heatmap_ignores_positive_gradient_rescaling(self, data, shape, log2_scale):
        # power-of-two scales keep the float arithmetic exact, so any
        # mismatch is a genuine normalization failure rather than round-off
        elements = st.floats(min_value=-10, max_value=10, allow_nan=False)
        fmaps = data.draw(arrays(np.float64, shape, elements=elements))
        grads = data.draw(arrays(np.float64, shape, elements=elements))
        base = combine_gradcam(fmaps, grads).values
        scaled = combine_gradcam(fmaps, grads * 2.0**log2_scale).values
        np.testing.assert_allclose(scaled, base, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(
        data=st.data(),
        shape=st.tuples(st.integers(1, 6), st.integers(1, 6)),
        tau1=finite_unit,
        tau2=finite_unit,
    )
    def test_masks_shrink_as_tau_grows(self, data, shape, tau1, tau2):
        lo, hi = min(tau1, tau2), max(tau1, tau2)
        hm = heatmap(data.draw(arrays(np.float64, shape, elements=finite_unit)))
        tight = threshold_mask(hm, hi).as_bool()
        loose = threshold_mask(hm, lo).as_bool()
        assert not np.any(tight & ~loose)

    @settings(max_examples=60, deadline=None)
    @given(
        data=st.data(),
        shape=st.tuples(st.integers(1, 6), st.integers(1, 6)),
        tau=finite_unit,
    )
    def test_zero_fill_grounding_is_idempotent(self, data, shape, tau):
        hm = heatmap(data.draw(arrays(np.float64, shape, elements=finite_unit)))
        img = data.draw(arrays(np.float64, shape, elements=finite_unit))
        once = apply_visual_grounding(img, hm, tau)
        twice = apply_visual_grounding(once, hm, tau)
        np.testing.assert_array_equal(once, twice)


class TestGroundDataset:
    def test_disabled_config_writes_passthrough_marker(self, manifest, tmp_path):
        cfg = GroundingConfig(enabled=False)
        result = ground_dataset(manifest, cfg, tmp_path, splits=("val",))
        assert result.passthrough is True
        assert result.heatmaps_path is None
        marker = storage.load_json(result.grounded_path)
        assert marker["mode"] == "passthrough"
        assert marker["n_samples"] == 48

    def test_native_run_writes_heatmaps_and_grounded_bundle(self, manifest, model, tmp_path):
        cfg = GroundingConfig()
        result = ground_dataset(manifest, cfg, tmp_path, classifier=model, splits=("val",))
        assert result.passthrough is False
        assert result.n_processed == 48
        assert result.failures == ()
        heatmaps, _ = storage.load_heatmap_store(result.heatmaps_path)
        assert len(heatmaps) == 48
        grounded = load_grounded_images(result.grounded_path, manifest)
        assert len(grounded) == 48
        size = manifest.extra["synthetic_world"]["image_size"]
        for img in grounded.values():
            assert img.shape == (size, size, 3)

    def test_missing_heatmap_is_recorded_not_fatal(self, manifest, tmp_path):
        records = manifest.split("val")
        size = manifest.extra["synthetic_world"]["image_size"]
        keep = Heatmap(np.ones((size, size)), source_size=(size, size))
        store = {r.id: keep for r in records[1:]}
        cfg = GroundingConfig()
        result = ground_dataset(manifest, cfg, tmp_path, heatmaps=store, splits=("val",))
        assert result.n_processed == 47
        assert len(result.failures) == 1
        assert result.failures[0][0] == records[0].id

    def test_non_native_method_requires_a_store(self, manifest, model, tmp_path):
        cfg = GroundingConfig(cam_method="scorecam")
        with pytest.raises(GroundingError, match="store"):
            ground_dataset(manifest, cfg, tmp_path, classifier=model, splits=("val",))

    def test_store_from_other_method_is_accepted(self, manifest, tmp_path):
        records = manifest.split("val")
        size = manifest.extra["synthetic_world"]["image_size"]
        store = {
            r.id: Heatmap(np.ones((size, size)), source_size=(size, size)) for r in records
        }
        cfg = GroundingConfig(cam_method="scorecam")
        result = ground_dataset(manifest, cfg, tmp_path, heatmaps=store, splits=("val",))
        assert result.n_processed == 48
