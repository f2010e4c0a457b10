"""
特徴マップ（勾配・Canny・距離変換・3 チャンネル化）のテスト
"""

import numpy as np
import pytest

from renoscan.core.featuremaps import (
    ChannelStack,
    EdgeMap,
    build_stack,
    canny_edges,
    central_gradient,
    distance_transform,
    distance_transform_sampled,
    gradient_map,
    relative_gradient,
    squared_edge_distance,
)
from renoscan.core.imaging import BinaryMask, GrayImage, apply_mask
from renoscan.core.normalize import NormalizedImage, fit_ellipse, normalize_kidney
from renoscan.core.phantoms import ellipse_region, generate_phantom
from renoscan.exceptions import ValidationError
from renoscan.utils.config import FeatureMapConfig


def brute_force_sq_distance(edges: np.ndarray) -> np.ndarray:
    er, ec = np.nonzero(edges)
    rows, cols = np.indices(edges.shape)
    d2 = (rows.ravel()[:, None] - er[None, :]) ** 2 + (cols.ravel()[:, None] - ec[None, :]) ** 2
    return d2.min(axis=1).reshape(edges.shape)


@pytest.fixture
def phantom_norm():
    image, mask, _ = generate_phantom(np.random.default_rng(5), 1, 128)
    return normalize_kidney(image, mask, fit_ellipse(mask), n0=64)


class TestGradient:
    def test_constant_image(self):
        out = gradient_map(GrayImage(np.full((8, 8), 42.0)))
        assert np.all(out.data == 0.0)

    def test_ramp(self):
        xx = np.tile(np.arange(12, dtype=float), (5, 1))
        raw = relative_gradient(GrayImage(xx + 1.0))
        for x in range(1, 11):
            np.testing.assert_allclose(raw[1:-1, x], 1.0 / (x + 1))

    def test_single_bright_pixel(self):
        data = np.zeros((7, 7))
        data[3, 3] = 10.0
        g = central_gradient(GrayImage(data))
        expected = np.zeros((7, 7), dtype=bool)
        expected[2, 3] = expected[4, 3] = expected[3, 2] = expected[3, 4] = True
        np.testing.assert_array_equal(g > 0, expected)
        np.testing.assert_allclose(g[expected], 5.0)

    def test_background_is_zero(self):
        data = np.zeros((6, 6))
        data[2:4, 2:4] = 100.0
        raw = relative_gradient(GrayImage(data))
        assert np.all(raw[data == 0] == 0.0)
        assert np.all(np.isfinite(raw))


class TestCanny:
    def test_constant_image(self):
        assert len(canny_edges(GrayImage(np.full((16, 16), 3.0)))) == 0

    def test_vertical_step(self):
        data = np.zeros((32, 32))
        data[:, 16:] = 255.0
        edges = canny_edges(GrayImage(data)).edges
        rows, cols = np.nonzero(edges)
        assert np.all(np.abs(cols - 15.5) <= 1.5)
        assert len(set(rows.tolist())) >= 0.9 * 32
        assert np.all(edges.sum(axis=1) <= 1)

    def test_disk(self):
        bits = ellipse_region((64, 64), 32.0, 32.0, 20.0, 20.0, 0.0)
        edges = canny_edges(GrayImage(np.where(bits, 255.0, 0.0)))
        rows, cols = np.nonzero(edges.edges)
        assert rows.size > 0
        radius = np.hypot(cols - 32.0, rows - 32.0)
        assert np.all(np.abs(radius - 20.0) <= 1.5)

    def test_affine_intensity_invariance(self):
        image, _, _ = generate_phantom(np.random.default_rng(1), 1, 64)
        a = canny_edges(image).edges
        b = canny_edges(GrayImage(2.0 * image.data + 10.0)).edges
        np.testing.assert_array_equal(a, b)

    def test_invalid_thresholds(self):
        with pytest.raises(ValidationError):
            canny_edges(GrayImage(np.zeros((4, 4))), low_frac=0.3, high_frac=0.2)


class TestDistanceTransform:
    def test_single_edge(self):
        d2 = squared_edge_distance(EdgeMap.from_coordinates(5, 5, [(2, 2)]))
        assert d2[0, 0] == 8
        assert d2[0, 2] == 4
        assert d2[2, 2] == 0

    def test_two_edges_in_a_row(self):
        d2 = squared_edge_distance(EdgeMap.from_coordinates(5, 1, [(0, 0), (4, 0)]))
        np.testing.assert_array_equal(d2, [[0, 1, 4, 1, 0]])

    def test_empty_edge_set(self):
        out = distance_transform(EdgeMap(np.zeros((6, 6), dtype=bool)))
        assert np.all(out.data == 0.0)

    def test_random_edges_match_brute_force(self, rng):
        for _ in range(100):
            density = rng.uniform(0.002, 0.05)
            edges = rng.random((64, 64)) < density
            if not edges.any():
                edges[rng.integers(64), rng.integers(64)] = True
            d2 = squared_edge_distance(EdgeMap(edges))
            np.testing.assert_array_equal(d2, brute_force_sq_distance(edges))

    def test_monotone_under_edge_addition(self, rng):
        edges = rng.random((32, 32)) < 0.01
        edges[5, 5] = True
        before = squared_edge_distance(EdgeMap(edges))
        more = edges.copy()
        more[20, 25] = True
        after = squared_edge_distance(EdgeMap(more))
        assert np.all(after <= before)

    def test_sampled_function(self):
        f = np.array([[np.inf, 3.0, np.inf, np.inf, 0.0]])
        np.testing.assert_array_equal(distance_transform_sampled(f), [[4.0, 3.0, 4.0, 1.0, 0.0]])

    def test_euclidean_and_squared_outputs(self):
        edges = EdgeMap.from_coordinates(5, 1, [(0, 0)])
        euclid = distance_transform(edges)
        squared = distance_transform(edges, squared=True)
        np.testing.assert_allclose(euclid.data, [[0.0, 63.75, 127.5, 191.25, 255.0]])
        np.testing.assert_allclose(squared.data, [[0.0, 255 / 16, 255 / 4, 255 * 9 / 16, 255.0]])

    def test_coordinates_out_of_bounds(self):
        with pytest.raises(ValidationError):
            EdgeMap.from_coordinates(3, 3, [(3, 0)])


class TestBuildStack:
    def test_planes_span_full_range(self, phantom_norm):
        stack = build_stack(phantom_norm)
        for name in ("r", "g", "b"):
            plane = stack.plane(name).data
            assert plane.shape == (64, 64)
            assert plane.min() == 0.0
            assert plane.max() == 255.0
            assert np.all(plane[~phantom_norm.mask.bits] == 0.0)

    def test_zero_image(self):
        mask = BinaryMask(ellipse_region((64, 64), 31.5, 31.5, 25.0, 12.0, 0.0))
        norm = NormalizedImage(image=GrayImage(np.zeros((64, 64))), mask=mask,
                               source_fit=fit_ellipse(mask))
        stack = build_stack(norm)
        assert np.all(stack.as_array() == 0.0)

    def test_distance_plane_matches_brute_force_order(self, phantom_norm):
        cfg = FeatureMapConfig()
        stack = build_stack(phantom_norm, cfg)
        edges = canny_edges(stack.r, cfg.canny.sigma, cfg.canny.low_frac, cfg.canny.high_frac)
        inside = phantom_norm.mask.bits
        dist = np.sqrt(brute_force_sq_distance(edges.edges).astype(float))
        expected = 255.0 * dist[inside] / dist[inside].max()
        np.testing.assert_allclose(stack.b.data[inside], expected, atol=1e-9)
        assert np.all(stack.b.data[edges.edges & inside] == 0.0)

    def test_red_plane_is_rescaled_image(self, phantom_norm):
        stack = build_stack(phantom_norm)
        img = apply_mask(phantom_norm.image, phantom_norm.mask).data
        np.testing.assert_allclose(stack.r.data, 255.0 * img / img.max())

    def test_intensity_source_variant(self, phantom_norm):
        stack = build_stack(phantom_norm, FeatureMapConfig(dt_source="intensity"))
        assert stack.b.data.max() == 255.0

    def test_array_round_trip(self, phantom_norm):
        stack = build_stack(phantom_norm)
        array = stack.as_array()
        assert array.shape == (64, 64, 3)
        assert array.dtype == np.float32
        again = ChannelStack.from_array(np.stack([stack.r.data, stack.g.data, stack.b.data], axis=-1))
        np.testing.assert_array_equal(again.g.data, stack.g.data)
