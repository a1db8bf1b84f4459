import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfkp import geometry as geo


def _random_homography(rng):
    cfg = geo.HomographySampleConfig()
    return geo.sample_homography(cfg, rng)


class TestHomography:
    def test_identity_and_translation(self):
        h = geo.Homography.identity()
        pts, w = h.apply_xy(np.array([[3.0, 4.0]]))
        assert np.allclose(pts, [[3, 4]]) and np.allclose(w, 1)
        t = geo.Homography.translation(2, -1)
        pts, _ = t.apply_xy(np.array([[0.0, 0.0]]))
        assert np.allclose(pts, [[2, -1]])

    def test_normalized_lower_right(self):
        h = geo.Homography(np.diag([2.0, 2.0, 2.0]))
        assert h.matrix[2, 2] == 1.0

    def test_singular_rejected(self):
        with pytest.raises(geo.DegenerateHomography):
            geo.Homography(np.zeros((3, 3)))

    def test_inverse_compose_identity(self):
        rng = np.random.default_rng(0)
        h = _random_homography(rng)
        prod = h.compose(h.inverse()).matrix
        assert np.allclose(prod, np.eye(3), atol=1e-9)

    def test_sampling_ranges_must_contain_identity(self):
        with pytest.raises(ValueError):
            geo.HomographySampleConfig(scale_range=(1.1, 1.3))


class TestDltAndRansac:
    def test_dlt_exact_recovery(self):
        rng = np.random.default_rng(1)
        h = _random_homography(rng)
        src = rng.uniform(0, 150, size=(8, 2))
        dst, _ = h.apply_xy(src)
        est = geo.dlt_homography(src, dst)
        assert np.allclose(est.matrix, h.matrix, rtol=1e-6, atol=1e-8)

    def test_dlt_needs_four_points(self):
        with pytest.raises(geo.EstimationFailed):
            geo.dlt_homography(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_ransac_recovery_with_outliers(self):
        rng = np.random.default_rng(2)
        h = _random_homography(rng)
        src = rng.uniform(0, 150, size=(40, 2))
        dst, _ = h.apply_xy(src)
        dst[30:] += rng.uniform(30, 60, size=(10, 2))   # gross outliers
        est, inliers = geo.estimate_homography(src, dst, geo.RansacConfig(seed=3))
        assert np.allclose(est.matrix, h.matrix, rtol=1e-6, atol=1e-8)
        assert inliers[:30].all() and not inliers[30:].any()

    def test_ransac_too_few_matches(self):
        with pytest.raises(geo.EstimationFailed):
            geo.estimate_homography(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_ransac_seeded_deterministic(self):
        rng = np.random.default_rng(4)
        src = rng.uniform(0, 100, size=(20, 2))
        h = _random_homography(rng)
        dst, _ = h.apply_xy(src)
        dst += rng.normal(0, 0.5, size=dst.shape)
        e1, _ = geo.estimate_homography(src, dst, geo.RansacConfig(seed=9))
        e2, _ = geo.estimate_homography(src, dst, geo.RansacConfig(seed=9))
        assert np.array_equal(e1.matrix, e2.matrix)


class TestWarps:
    def test_identity_warp_bit_exact(self):
        rng = np.random.default_rng(5)
        img = rng.random((24, 30)).astype(np.float32)
        out = geo.warp_image(img, geo.Homography.identity())
        assert np.array_equal(out, img)

    def test_round_trip_interior(self):
        rng = np.random.default_rng(6)
        img = rng.random((60, 80))
        h = geo.Homography.translation(5.0, -3.0)
        back = geo.warp_image(geo.warp_image(img, h), h.inverse())
        # interior pixels unaffected by border zero-fill
        assert np.allclose(back[10:-10, 10:-10], img[10:-10, 10:-10], atol=1e-9)

    def test_point_round_trip(self):
        rng = np.random.default_rng(7)
        h = _random_homography(rng)
        kps = geo.KeypointSet(rng.uniform(0, 100, 20), rng.uniform(0, 100, 20),
                              np.ones(20))
        fwd, d1 = geo.warp_points(kps, h)
        back, d2 = geo.warp_points(fwd, h.inverse())
        assert d1 == d2 == 0
        assert np.allclose(np.sort(back.rows), np.sort(kps.rows), atol=1e-9)
        assert np.allclose(np.sort(back.cols), np.sort(kps.cols), atol=1e-9)

    def test_mask_warp_preserves_labels(self):
        mask = np.zeros((20, 20), dtype=np.uint8)
        mask[5:10, 5:10] = 3
        out = geo.warp_mask_nearest(mask, geo.Homography.translation(2, 0))
        assert set(np.unique(out)) <= {0, 3}
        assert out[7, 9] == 3


class TestKeypointSet:
    def test_sorted_by_score_then_position(self):
        kps = geo.KeypointSet([5, 1, 1], [2, 9, 3], [0.5, 0.9, 0.9])
        assert list(kps.scores) == [0.9, 0.9, 0.5]
        assert list(kps.cols[:2]) == [3, 9]   # equal score: lower col first

    def test_topk_and_select(self):
        kps = geo.KeypointSet([1, 2, 3], [1, 2, 3], [3, 2, 1])
        assert len(kps.topk(2)) == 2
        assert list(kps.select(kps.scores > 1.5).rows) == [1, 2]


class TestNms:
    def test_spacing_and_threshold(self):
        heat = np.zeros((30, 30))
        heat[5, 5] = 1.0
        heat[5, 7] = 0.9     # within radius of (5,5)
        heat[20, 20] = 0.5
        heat[25, 25] = 0.001  # below threshold
        kps = geo.nms(heat, radius=4, threshold=0.01, top_k=10)
        pts = set(zip(kps.rows.astype(int), kps.cols.astype(int)))
        assert pts == {(5, 5), (20, 20)}

    def test_tie_break_row_then_col(self):
        heat = np.zeros((20, 20))
        heat[10, 10] = 0.5
        heat[3, 15] = 0.5
        kps = geo.nms(heat, radius=2, threshold=0.1, top_k=10)
        assert kps.rows[0] == 3 and kps.cols[0] == 15

    def test_top_k_limits(self):
        heat = np.zeros((40, 40))
        heat[::8, ::8] = np.linspace(0.1, 1.0, 25).reshape(5, 5)
        kps = geo.nms(heat, radius=2, threshold=0.01, top_k=7)
        assert len(kps) == 7

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
    @settings(max_examples=25, deadline=None)
    def test_pairwise_separation_property(self, seed, radius):
        rng = np.random.default_rng(seed)
        heat = rng.random((48, 64))
        kps = geo.nms(heat, radius=radius, threshold=0.2, top_k=100)
        if len(kps) > 1:
            dr = np.abs(kps.rows[:, None] - kps.rows[None, :])
            dc = np.abs(kps.cols[:, None] - kps.cols[None, :])
            cheb = np.maximum(dr, dc) + np.eye(len(kps)) * 1e9
            assert cheb.min() > radius
        assert np.all(kps.scores > 0.2)
