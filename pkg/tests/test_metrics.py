"""Tests for segmentation IoU, the object detector, chi-square statistics,
and embedding-space metrics, each against independent oracles."""

import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from bipartite_gan.imageio import dequantize
from bipartite_gan.metrics import (
    DetectedObject,
    ImageEmbedder,
    N_PAIR_BINS,
    _pair_bin,
    attention_segment_iou,
    chi_square,
    chi_square_report,
    detect_objects,
    detection_class_masks,
    detection_statistics,
    extract_attention_segments,
    frechet_embed_distance,
    knn_precision_recall,
)
from bipartite_gan.scenes import BACKGROUND, PALETTE, render_scene, scene_for_index


def background_image(resolution):
    img = np.broadcast_to(
        dequantize(BACKGROUND.reshape(3, 1, 1)), (3, resolution, resolution)
    )
    return np.ascontiguousarray(img)


def paint(img, color_index, ys, xs):
    img[:, ys, xs] = dequantize(PALETTE[color_index].reshape(3, 1, 1))[:, 0, 0][:, None]


class TestExtractSegments:
    def test_single_latent_full_grid(self):
        weights = np.ones((6, 1))
        segs = extract_attention_segments([weights], [(2, 3)])
        assert np.array_equal(segs[0], np.zeros((2, 3), dtype=np.int64))

    def test_one_hot_assignment_identity(self, rng):
        assignment = rng.integers(0, 4, size=12)
        weights = np.eye(4)[assignment]
        segs = extract_attention_segments([weights], [(3, 4)])
        assert np.array_equal(segs[0].ravel(), assignment)

    def test_matches_linear_scan_oracle(self, rng):
        for _ in range(5):
            weights = rng.random(size=(20, 5))
            weights /= weights.sum(axis=1, keepdims=True)
            segs = extract_attention_segments([weights], [(4, 5)])
            for p in range(20):
                best = 0
                for j in range(5):
                    if weights[p, j] > weights[p, best]:
                        best = j
                assert segs[0].ravel()[p] == best

    def test_tie_breaks_toward_lowest_index(self):
        weights = np.full((4, 3), 1.0 / 3.0)
        segs = extract_attention_segments([weights], [(2, 2)])
        assert np.array_equal(segs[0], np.zeros((2, 2), dtype=np.int64))

    def test_multihead_weights_are_head_averaged(self):
        per_head = np.stack([np.eye(2), np.eye(2)[::-1]])  # average is uniform
        segs = extract_attention_segments([per_head], [(1, 2)])
        assert np.array_equal(segs[0], np.zeros((1, 2), dtype=np.int64))

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError, match="grid"):
            extract_attention_segments([np.ones((5, 2))], [(2, 3)])


class TestSegmentIoU:
    def test_exact_match_scores_one(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[:, 0] = True
        weights = np.where(mask.reshape(4, 1), [[1.0, 0.0]], [[0.0, 1.0]])
        scores = attention_segment_iou([weights], [(2, 2)], {"left": mask})
        assert scores["left"] == 1.0

    def test_empty_mask_scores_zero(self):
        weights = np.array([[1.0, 0.0]] * 4)
        scores = attention_segment_iou(
            [weights], [(2, 2)], {"nothing": np.zeros((2, 2), dtype=bool)}
        )
        assert scores["nothing"] == 0.0

    def test_one_third_overlap(self):
        # segment {p0, p1} vs mask {p1, p2}: intersection 1, union 3
        weights = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        mask = np.array([[False, True], [True, False]])
        scores = attention_segment_iou([weights], [(2, 2)], {"c": mask})
        assert abs(scores["c"] - 1.0 / 3.0) < 1e-12

    def test_max_over_layers_and_latents(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        bad = np.full((4, 2), 0.5)  # uniform layer: segment is the whole grid
        good = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        scores = attention_segment_iou([bad, good], [(2, 2), (2, 2)], {"c": mask})
        assert scores["c"] == 1.0  # the good layer's latent 0 matches exactly

    def test_bilinear_resize_then_argmax(self):
        # 2x2 grid, latent 0 owns the left column; at 4x4 the argmax split
        # still falls between columns 1 and 2
        weights = np.array([[10.0, 0.0], [0.0, 10.0], [10.0, 0.0], [0.0, 10.0]])
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :2] = True
        scores = attention_segment_iou([weights], [(2, 2)], {"left": mask})
        assert scores["left"] == 1.0

    def test_unreachable_resolution_is_error(self):
        weights = np.ones((4, 1))
        with pytest.raises(ValueError, match="resize"):
            attention_segment_iou([weights], [(2, 2)], {"c": np.zeros((6, 6), dtype=bool)})

    def test_mask_shape_mismatch_is_error(self):
        weights = np.ones((4, 1))
        with pytest.raises(ValueError, match="mask"):
            attention_segment_iou(
                [weights], [(2, 2)], {"c": np.zeros((4, 2), dtype=bool)}
            )

    def test_scores_lie_in_unit_interval(self, rng):
        weights = rng.random(size=(16, 3))
        mask = rng.random(size=(4, 4)) > 0.5
        scores = attention_segment_iou([weights], [(4, 4)], {"c": mask})
        assert 0.0 <= scores["c"] <= 1.0


class TestDetector:
    def test_blank_image_detects_nothing(self):
        assert detect_objects(background_image(32)) == []

    def test_exact_pixel_square(self):
        img = background_image(64)
        img[:, 10:30, 14:34] = dequantize(PALETTE[2].reshape(3, 1, 1))
        dets = detect_objects(img)
        assert len(dets) == 1
        d = dets[0]
        assert d.shape == "square" and d.color == 2
        assert d.area == 400  # exactly s^2 for an axis-aligned pixel square
        assert abs(d.r - math.sqrt(400 / 2.0) / 64) < 1e-9

    def test_clean_renders_recovered_exactly(self):
        # 128 px samples every shape well; at coarser grids the fill-ratio
        # quantization bias (roughly perimeter/area ~ 1/rR) can push the
        # smallest objects outside the classification bands
        for i in range(50):
            spec = scene_for_index(2024, i)
            dets = detect_objects(render_scene(spec, 128).image)
            assert sorted((d.shape, d.color) for d in dets) == sorted(
                (o.shape, o.color) for o in spec.objects
            ), i

    def test_centroid_and_radius_accuracy(self):
        for i in range(20):
            spec = scene_for_index(31337, i)
            dets = detect_objects(render_scene(spec, 128).image)
            for o in spec.objects:
                d = min(
                    (d for d in dets if d.color == o.color and d.shape == o.shape),
                    key=lambda d: (d.x - o.x) ** 2 + (d.y - o.y) ** 2,
                )
                assert math.hypot(d.x - o.x, d.y - o.y) < 1.5 / 128
                assert abs(d.r - o.r) / o.r < 0.05

    def test_small_components_ignored(self):
        img = background_image(32)
        ys, xs = np.mgrid[4:7, 4:8]  # 3x4 block minus one pixel: 11 px
        img[:, ys.ravel()[:-1], xs.ravel()[:-1]] = dequantize(
            PALETTE[0].reshape(3, 1, 1)
        )[:, 0, 0][:, None]
        assert detect_objects(img) == []
        img2 = background_image(32)
        img2[:, 4:7, 4:8] = dequantize(PALETTE[0].reshape(3, 1, 1))  # 12 px
        assert len(detect_objects(img2)) == 1

    def test_diagonal_touch_is_two_components(self):
        img = background_image(32)
        img[:, 4:8, 4:7] = dequantize(PALETTE[3].reshape(3, 1, 1))
        img[:, 8:12, 7:10] = dequantize(PALETTE[3].reshape(3, 1, 1))
        assert len(detect_objects(img)) == 2  # 4-connectivity splits corner contact

    def test_low_fill_component_is_unknown(self):
        img = background_image(32)
        for t in range(8):  # thick diagonal: fill ratio ~1/3 of its bbox
            img[:, 4 + t, 4 + t] = dequantize(PALETTE[5].reshape(3, 1, 1))[:, 0, 0]
            img[:, 5 + t, 4 + t] = dequantize(PALETTE[5].reshape(3, 1, 1))[:, 0, 0]
        dets = detect_objects(img)
        assert len(dets) == 1 and dets[0].shape == "unknown"

    def test_class_masks_partition(self):
        spec = scene_for_index(7, 3)
        rendered = render_scene(spec, 64)
        masks = detection_class_masks(detect_objects(rendered.image), 64)
        total = np.zeros((64, 64), dtype=int)
        for mask in masks.values():
            total += mask.astype(int)
        assert np.array_equal(total, np.ones((64, 64), dtype=int))


class TestChiSquare:
    def test_perfect_fit_is_zero(self):
        assert chi_square([3, 5, 2], [3, 5, 2]) == 0.0

    def test_frozen_example(self):
        assert chi_square([10, 0], [5, 5]) == 10.0

    def test_bin_permutation_invariance(self, rng):
        o = rng.integers(1, 30, size=6).astype(float)
        e = rng.integers(1, 30, size=6).astype(float)
        perm = rng.permutation(6)
        assert abs(chi_square(o, e) - chi_square(o[perm], e[perm])) < 1e-12

    def test_zero_expected_is_usage_error(self):
        with pytest.raises(ValueError, match="expected"):
            chi_square([1, 2], [3, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            chi_square([1, 2, 3], [1, 2])

    def test_report_rescales_reference(self):
        stats = {"count": np.array([10.0, 10.0])}
        ref = {"count": np.array([100.0, 100.0])}
        assert chi_square_report(stats, ref)["count"] == 0.0

    def test_report_none_for_empty_observations(self):
        stats = {"color": np.zeros(3)}
        ref = {"color": np.array([5.0, 5.0, 5.0])}
        assert chi_square_report(stats, ref)["color"] is None

    def test_real_scene_factors_fit_uniform_expectation(self):
        # count/color/shape are uniform by construction; detections on clean
        # 64-px renders recover them, so Pearson fit stays below the 95%
        # quantile (size is excluded: placement rejection biases it)
        n = 400
        dets = [
            detect_objects(render_scene(scene_for_index(55, i), 64).image)
            for i in range(n)
        ]
        stats = detection_statistics(dets)
        for prop, k in (("count", 4), ("color", 8), ("shape", 3)):
            observed = stats[prop]
            expected = np.full(k, observed.sum() / k)
            value = chi_square(observed, expected)
            assert value < scipy_stats.chi2.ppf(0.95, k - 1), (prop, value)


def det(shape="circle", color=0, r=0.1):
    return DetectedObject(shape, color, 0.5, 0.5, r, 50, np.zeros((4, 4), dtype=bool))


class TestDetectionStatistics:
    def test_histograms_from_constructed_detections(self):
        images = [
            [det("circle", 0, 0.09), det("square", 3, 0.19)],
            [det("triangle", 5, 0.13)],
            [],
            [det("unknown", 2, 0.15)],
        ]
        stats = detection_statistics(images)
        # images have 2, 1, 0, 1 detections; 0 clamps into the 1 bin
        assert stats["count"].tolist() == [3.0, 1.0, 0.0, 0.0]
        assert stats["color"][0] == 1 and stats["color"][3] == 1
        assert stats["color"][5] == 1 and stats["color"][2] == 1
        assert stats["shape"].tolist() == [1.0, 1.0, 1.0]  # unknown excluded
        assert stats["size"].tolist() == [1.0, 2.0, 1.0]
        assert stats["cooccurrence"].sum() == 1.0
        assert stats["cooccurrence"][_pair_bin(0, 3)] == 1.0

    def test_count_clamps_above_four(self):
        stats = detection_statistics([[det()] * 7])
        assert stats["count"].tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_pair_bins_are_a_bijection(self):
        seen = set()
        for i in range(8):
            for j in range(i, 8):
                idx = _pair_bin(i, j)
                assert 0 <= idx < N_PAIR_BINS
                seen.add(idx)
        assert len(seen) == N_PAIR_BINS
        assert _pair_bin(5, 2) == _pair_bin(2, 5)


class TestEmbedder:
    def test_deterministic_and_seed_sensitive(self, rng):
        images = np.tanh(rng.normal(size=(4, 3, 32, 32))).astype(np.float32)
        a = ImageEmbedder(17, 32).embed(images)
        b = ImageEmbedder(17, 32).embed(images)
        c = ImageEmbedder(18, 32).embed(images)
        assert np.array_equal(a, b)
        assert not np.allclose(a, c)

    def test_output_shape_and_dtype(self, rng):
        images = np.tanh(rng.normal(size=(5, 3, 64, 64))).astype(np.float32)
        feats = ImageEmbedder(3, 64, dim=32).embed(images)
        assert feats.shape == (5, 32) and feats.dtype == np.float64
        assert np.isfinite(feats).all()

    def test_batching_does_not_change_features(self, rng):
        images = np.tanh(rng.normal(size=(9, 3, 16, 16))).astype(np.float32)
        emb = ImageEmbedder(1, 16)
        assert np.allclose(emb.embed(images, batch_size=4), emb.embed(images), atol=1e-6)

    def test_input_validation(self, rng):
        emb = ImageEmbedder(0, 32)
        with pytest.raises(ValueError, match="expected"):
            emb.embed(np.zeros((2, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError, match=">= 8"):
            ImageEmbedder(0, 4)

    def test_distinguishes_image_populations(self, rng):
        flat = np.full((70, 3, 32, 32), -0.5, dtype=np.float32)
        noisy = np.tanh(rng.normal(size=(70, 3, 32, 32))).astype(np.float32)
        emb = ImageEmbedder(17, 32)
        fed = frechet_embed_distance(emb.embed(flat), emb.embed(noisy))
        assert fed > 1.0


class TestFrechetDistance:
    def test_identical_sets_zero(self, rng):
        feats = rng.normal(size=(80, 5))
        assert abs(frechet_embed_distance(feats, feats)) < 1e-6

    def test_one_dimensional_gaussian_closed_form(self):
        rng = np.random.default_rng(1234)
        a = rng.normal(0.0, 1.0, size=(10000, 1))
        b = rng.normal(1.0, 1.0, size=(10000, 1))
        # closed form (mu1-mu2)^2 + (sigma1-sigma2)^2 = 1
        assert abs(frechet_embed_distance(a, b) - 1.0) < 0.1

    def test_swapped_arguments_identical(self, rng):
        a = rng.normal(size=(50, 4))
        b = rng.normal(size=(50, 4)) + 2.0
        assert frechet_embed_distance(a, b) == frechet_embed_distance(b, a)

    def test_pure_mean_shift(self, rng):
        a = rng.normal(size=(200, 3))
        shift = np.array([1.0, -2.0, 0.5])
        got = frechet_embed_distance(a, a + shift)
        assert abs(got - float(shift @ shift)) < 1e-6

    def test_nonnegative(self, rng):
        for _ in range(5):
            a = rng.normal(size=(40, 6))
            b = rng.normal(size=(40, 6)) * rng.uniform(0.5, 2.0)
            assert frechet_embed_distance(a, b) >= 0.0

    def test_too_few_points_rejected(self, rng):
        with pytest.raises(ValueError, match="points"):
            frechet_embed_distance(rng.normal(size=(5, 5)), rng.normal(size=(40, 5)))


class TestKnnPrecisionRecall:
    def test_identical_sets(self, rng):
        feats = rng.normal(size=(30, 4))
        assert knn_precision_recall(feats, feats) == (1.0, 1.0)

    def test_disjoint_supports(self, rng):
        real = rng.normal(size=(30, 4))
        assert knn_precision_recall(real, real + 1e6) == (0.0, 0.0)

    def test_half_covered_recall(self, rng):
        cluster_a = rng.normal(size=(25, 2)) * 0.1
        cluster_b = rng.normal(size=(25, 2)) * 0.1 + 100.0
        real = np.concatenate([cluster_a, cluster_b])
        fake = rng.normal(size=(50, 2)) * 0.1  # covers only cluster A
        precision, recall = knn_precision_recall(real, fake)
        assert abs(recall - 0.5) <= 0.1
        assert precision > 0.9

    def test_matches_brute_force_oracle(self, rng):
        real = rng.normal(size=(12, 3))
        fake = rng.normal(size=(10, 3))
        k = 3
        precision, recall = knn_precision_recall(real, fake, k=k)

        def kth_radius(points, i):
            dists = sorted(
                float(np.linalg.norm(points[i] - points[j]))
                for j in range(len(points))
                if j != i
            )
            return dists[k - 1]

        hits = 0
        for f in fake:
            if any(
                np.linalg.norm(f - real[i]) <= kth_radius(real, i)
                for i in range(len(real))
            ):
                hits += 1
        assert abs(precision - hits / len(fake)) < 1e-12

    def test_small_sets_rejected(self, rng):
        with pytest.raises(ValueError, match="points"):
            knn_precision_recall(rng.normal(size=(3, 2)), rng.normal(size=(10, 2)))
