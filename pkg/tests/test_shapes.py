import numpy as np
import pytest

from partfusion.shapes import (
    FAMILIES,
    AugmentParams,
    LabeledShape,
    ShapeSpec,
    attach_gt_centers,
    augment,
    compute_gt_offsets,
    duplicate_missing_levels,
    generate_shape,
    normalize_to_unit_sphere,
    quantize_coords,
    rotation_matrix,
)


class TestNormalize:
    def test_already_normalized(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        np.testing.assert_allclose(normalize_to_unit_sphere(pts), pts, atol=1e-15)

    def test_pure_scaling(self):
        pts = np.array([[2.0, 0, 0], [-2.0, 0, 0]])
        np.testing.assert_allclose(
            normalize_to_unit_sphere(pts), [[1.0, 0, 0], [-1.0, 0, 0]], atol=1e-15
        )

    def test_centroid_shift_and_scale(self):
        pts = np.array([[3.0, 0, 0], [5.0, 0, 0]])
        np.testing.assert_allclose(
            normalize_to_unit_sphere(pts), [[-1.0, 0, 0], [1.0, 0, 0]], atol=1e-15
        )

    def test_zero_extent(self):
        pts = np.full((4, 3), 2.5)
        np.testing.assert_array_equal(normalize_to_unit_sphere(pts), np.zeros((4, 3)))


class TestGtCenters:
    def test_symmetric_instances_center_region_at_origin(self):
        d = 0.4
        pts = np.array([[d, 0, 0], [d + 0.01, 0, 0], [-d, 0, 0], [-d - 0.01, 0, 0]])
        sem = np.array([1, 1, 1, 1])
        inst = np.array([0, 0, 1, 1])
        inst_off, region_off = compute_gt_offsets(pts, sem, inst)
        np.testing.assert_allclose(pts + region_off, np.zeros_like(pts), atol=1e-15)
        np.testing.assert_allclose((pts + inst_off)[0], [d + 0.005, 0, 0], atol=1e-15)

    def test_single_instance_class_region_equals_instance_center(self):
        pts = np.array([[0.1, 0, 0], [0.3, 0, 0], [-0.5, 0.2, 0]])
        sem = np.array([1, 1, 2])
        inst = np.array([0, 0, 1])
        inst_off, region_off = compute_gt_offsets(pts, sem, inst)
        np.testing.assert_allclose(inst_off, region_off, atol=1e-15)

    def test_three_instance_centers_average(self):
        # Instance centroids at 0, 1, 2 on the x axis -> region center at 1.
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        sem = np.array([1, 1, 1])
        inst = np.array([0, 1, 2])
        _, region_off = compute_gt_offsets(pts, sem, inst)
        np.testing.assert_allclose(pts + region_off, np.tile([1.0, 0, 0], (3, 1)),
                                   atol=1e-15)

    def test_offsets_sum_to_zero_over_instance(self, rng):
        pts = rng.normal(size=(50, 3))
        sem = np.ones(50, dtype=np.int64)
        inst = rng.integers(0, 4, size=50)
        inst_off, _ = compute_gt_offsets(pts, sem, inst)
        for iid in range(4):
            s = inst_off[inst == iid].sum(axis=0)
            assert np.abs(s).max() <= 1e-9 * 50


class TestGenerate:
    def test_determinism(self):
        spec = ShapeSpec("wheelset", parts=3, points=128)
        a = generate_shape(spec, 7)
        b = generate_shape(spec, 7)
        np.testing.assert_array_equal(a.points, b.points)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.sem, lb.sem)
            np.testing.assert_array_equal(la.inst, lb.inst)
            np.testing.assert_array_equal(la.inst_offset, lb.inst_offset)

    def test_different_seeds_differ(self):
        spec = ShapeSpec("legged-table", parts=4, points=128)
        a = generate_shape(spec, 0)
        b = generate_shape(spec, 1)
        assert np.abs(a.points - b.points).max() > 1e-6

    def test_scissor_structure(self):
        shape = generate_shape(ShapeSpec("n-blade-scissor", parts=2, points=256), 0)
        assert shape.class_counts == (2, 2)
        lv = shape.levels[1]
        blades = np.unique(lv.inst[lv.sem == 1])
        handles = np.unique(lv.inst[lv.sem == 2])
        assert len(blades) == 2 and len(handles) == 2
        # Coarse level groups blades into one assembly and handles into another.
        coarse = shape.levels[0]
        assert len(np.unique(coarse.inst)) == 2

    def test_scissor_blades_symmetric_about_origin(self):
        shape = generate_shape(ShapeSpec("n-blade-scissor", parts=2, points=512), 0)
        lv = shape.levels[1]
        centers = []
        for iid in np.unique(lv.inst[lv.sem == 1]):
            m = lv.inst == iid
            centers.append((shape.points[m] + lv.inst_offset[m])[0])
        mid = np.mean(centers, axis=0)
        # Blade centers straddle their shared region center.
        assert np.linalg.norm(centers[0] - centers[1]) > 1e-3
        np.testing.assert_allclose(
            mid, shape.points[lv.sem == 1][0] + lv.region_offset[lv.sem == 1][0],
            atol=1e-12)

    def test_scissor_blade_centers_within_default_bandwidth(self):
        # The near-coincident-center regime: same-class instance centers
        # closer than the default mean-shift bandwidth of 0.1.
        shape = generate_shape(ShapeSpec("n-blade-scissor", parts=2, points=512), 3)
        lv = shape.levels[1]
        centers = []
        for iid in np.unique(lv.inst[lv.sem == 1]):
            m = lv.inst == iid
            centers.append((shape.points[m] + lv.inst_offset[m])[0])
        assert np.linalg.norm(centers[0] - centers[1]) < 0.1

    def test_table_structure(self):
        shape = generate_shape(ShapeSpec("legged-table", parts=4, points=256), 1)
        assert shape.class_counts == (2, 2, 3)
        assert len(np.unique(shape.levels[0].inst)) == 2
        lv_mid = shape.levels[1]
        assert len(np.unique(lv_mid.inst[lv_mid.sem == 2])) == 4
        assert len(np.unique(shape.levels[2].inst)) == 9

    def test_every_family_generates_and_validates(self):
        for family in FAMILIES:
            shape = generate_shape(ShapeSpec(family, parts=3, points=128), 2)
            shape.validate()
            assert shape.n_points == 128

    def test_unit_ball(self):
        shape = generate_shape(ShapeSpec("multi-lamp", parts=3, points=128), 5)
        assert np.linalg.norm(shape.points, axis=1).max() <= 1.0 + 1e-9

    def test_degenerate_spec_rejected(self):
        with pytest.raises(ValueError):
            ShapeSpec("legged-table", parts=0).validate()
        with pytest.raises(ValueError):
            ShapeSpec("no-such-family").validate()
        with pytest.raises(ValueError):
            ShapeSpec("wheelset", points=32).validate()

    def test_hierarchy_refinement_100_shapes(self):
        """Points sharing a fine instance share every coarser instance."""
        for seed in range(100):
            family = FAMILIES[seed % len(FAMILIES)]
            shape = generate_shape(
                ShapeSpec(family, parts=2 + seed % 3, points=96), seed, k_levels=3
            )
            for coarse, fine in zip(shape.levels[:-1], shape.levels[1:]):
                for iid in np.unique(fine.inst):
                    assert len(np.unique(coarse.inst[fine.inst == iid])) == 1


class TestDuplicateLevels:
    def test_expand_single_level(self):
        shape = generate_shape(ShapeSpec("wheelset", parts=2, points=96), 0)
        one = LabeledShape(shape.points, (shape.class_counts[0],), [shape.levels[0]])
        out = duplicate_missing_levels(one, 3)
        assert out.n_levels == 3
        for lv in out.levels[1:]:
            np.testing.assert_array_equal(lv.sem, out.levels[0].sem)
            np.testing.assert_array_equal(lv.inst, out.levels[0].inst)

    def test_identity_when_complete(self):
        shape = generate_shape(ShapeSpec("legged-table", parts=3, points=96), 0)
        out = duplicate_missing_levels(shape, 3)
        for a, b in zip(out.levels, shape.levels):
            np.testing.assert_array_equal(a.sem, b.sem)

    def test_nearest_coarser_rule(self):
        shape = generate_shape(ShapeSpec("n-blade-scissor", parts=2, points=96), 0)
        out = duplicate_missing_levels(shape, 3, annotated_positions=(1, 3))
        np.testing.assert_array_equal(out.levels[1].sem, shape.levels[0].sem)
        np.testing.assert_array_equal(out.levels[1].inst, shape.levels[0].inst)
        np.testing.assert_array_equal(out.levels[2].sem, shape.levels[1].sem)

    def test_shrinking_rejected(self):
        shape = generate_shape(ShapeSpec("legged-table", parts=3, points=96), 0)
        with pytest.raises(ValueError):
            duplicate_missing_levels(shape, 2)


class TestAugment:
    def base_shape(self):
        return generate_shape(ShapeSpec("legged-table", parts=4, points=128), 0)

    def test_identity_params(self):
        shape = self.base_shape()
        out = augment(shape, AugmentParams((1.0, 1.0), 0.0, 0.0), seed=3)
        np.testing.assert_allclose(out.points, shape.points, atol=1e-12)
        np.testing.assert_allclose(out.levels[0].inst_offset,
                                   shape.levels[0].inst_offset, atol=1e-12)

    def test_pure_translation_leaves_offsets(self):
        shape = self.base_shape()
        out = augment(shape, AugmentParams((1.0, 1.0), 0.0, 0.125), seed=5)
        t = out.points[0] - shape.points[0]
        assert np.abs(t).max() <= 0.125
        np.testing.assert_allclose(out.points, shape.points + t, atol=1e-12)
        for lv_out, lv_in in zip(out.levels, shape.levels):
            np.testing.assert_allclose(lv_out.inst_offset, lv_in.inst_offset,
                                       atol=1e-12)
            np.testing.assert_allclose(lv_out.region_offset, lv_in.region_offset,
                                       atol=1e-12)

    def test_pure_scale_scales_offsets(self):
        shape = self.base_shape()
        out = augment(shape, AugmentParams((1.25, 1.25), 0.0, 0.0), seed=5)
        np.testing.assert_allclose(out.points, 1.25 * shape.points, atol=1e-12)
        np.testing.assert_allclose(out.levels[1].inst_offset,
                                   1.25 * shape.levels[1].inst_offset, atol=1e-12)

    def test_determinism(self):
        shape = self.base_shape()
        a = augment(shape, AugmentParams(), seed=11)
        b = augment(shape, AugmentParams(), seed=11)
        np.testing.assert_array_equal(a.points, b.points)

    def test_labels_preserved_and_offsets_consistent(self):
        """Transformed offsets equal offsets recomputed from transformed points."""
        shape = self.base_shape()
        out = augment(shape, AugmentParams(), seed=7)
        for lv_out, lv_in in zip(out.levels, shape.levels):
            np.testing.assert_array_equal(lv_out.sem, lv_in.sem)
            np.testing.assert_array_equal(lv_out.inst, lv_in.inst)
        recomputed = attach_gt_centers(out)
        for lv_out, lv_re in zip(out.levels, recomputed.levels):
            np.testing.assert_allclose(lv_out.inst_offset, lv_re.inst_offset,
                                       atol=1e-12)
            np.testing.assert_allclose(lv_out.region_offset, lv_re.region_offset,
                                       atol=1e-12)

    def test_ball_bound_relaxes_by_scale_and_translation(self):
        shape = self.base_shape()
        params = AugmentParams()
        for seed in range(20):
            out = augment(shape, params, seed)
            bound = params.scale_range[1] + params.translation * np.sqrt(3) + 1e-9
            assert np.linalg.norm(out.points, axis=1).max() <= bound

    def test_rotation_matrix_is_orthonormal(self, rng):
        for _ in range(10):
            rot = rotation_matrix(rng.uniform(-10, 10, size=3))
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(rot) == pytest.approx(1.0)


class TestQuantize:
    def test_quantization_is_idempotent(self, rng):
        pts = rng.normal(size=(32, 3))
        once = quantize_coords(pts)
        np.testing.assert_array_equal(once, quantize_coords(once))

    def test_quantization_error_small(self, rng):
        pts = rng.normal(size=(32, 3))
        assert np.abs(quantize_coords(pts) - pts).max() < 1e-8
