import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from domainscope import scene
from domainscope.scene import BoundingBox, LayoutMetrics, ScaleMetrics

from conftest import identity_profile


def box(x, y, w, h, c=1):
    return BoundingBox(float(x), float(y), float(w), float(h), c)


def test_layout_examples():
    assert scene.compute_layout([], 100, 100) == LayoutMetrics(0, 0.0, 0.0)
    m = scene.compute_layout([box(0, 0, 10, 10), box(50, 50, 10, 10)], 100, 100)
    assert (m.object_count, m.coverage, m.overlap) == (2, 0.02, 0.0)
    m = scene.compute_layout([box(5, 5, 10, 10), box(5, 5, 10, 10)], 100, 100)
    assert math.isclose(m.coverage, 0.01) and math.isclose(m.overlap, 0.5)


def test_layout_coverage_uses_union():
    m = scene.compute_layout([box(0, 0, 10, 10), box(5, 0, 10, 10)], 100, 100)
    assert math.isclose(m.coverage, 150 / 10000)
    assert math.isclose(m.overlap, 50 / 200)


def brute_overlap(boxes):
    total = 0.0
    for a, b in itertools.combinations(boxes, 2):
        iw = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
        ih = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
        total += iw * ih
    return total


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 15), st.integers(1, 15)),
                max_size=8))
def test_layout_matches_brute_force(raw):
    boxes = [box(*r) for r in raw]
    m = scene.compute_layout(boxes, 40, 40)
    cover = np.zeros((40, 40), dtype=bool)
    for b in boxes:
        for y in range(40):
            for x in range(40):
                if b.x <= x + 0.5 < b.x2 and b.y <= y + 0.5 < b.y2:
                    cover[y, x] = True
    assert m.coverage == cover.sum() / 1600
    total = sum(b.area for b in boxes)
    expected_o = brute_overlap(boxes) / total if len(boxes) > 1 else 0.0
    assert math.isclose(m.overlap, expected_o, abs_tol=1e-12)
    assert 0 <= m.coverage <= 1 and m.overlap >= 0


@pytest.mark.parametrize("n, c, o, label", [
    (3, 0.02, 0.0, "sparse"), (15, 0.1, 0.0, "crowded"), (8, 0.1, 0.05, "moderate"),
    (0, 0.0, 0.0, "sparse"), (2, 0.5, 0.0, "crowded"), (2, 0.01, 0.2, "crowded"),
])
def test_classify_layout(n, c, o, label):
    assert scene.classify_layout(LayoutMetrics(n, c, o)) == label


def test_scale_examples():
    m = scene.compute_scale([box(0, 0, 30, 10)], 10000)
    assert math.isclose(m.mean_norm_area, 0.03) and m.small_ratio == 0 and m.large_ratio == 1
    m = scene.compute_scale([box(i * 10, 0, 10, 1) for i in range(4)], 10000)
    assert math.isclose(m.mean_norm_area, 0.001) and m.small_ratio == 1
    assert scene.compute_scale([], 10000) is None


@pytest.mark.parametrize("rs, rl, a, label", [
    (1.0, 0.0, 0.001, "small"), (0.0, 1.0, 0.03, "large"), (0.25, 0.25, 0.01, "medium"),
    (0.6, 0.4, 0.03, "small"), (0.4, 0.6, 0.001, "large"), (0.5, 0.5, 0.01, "medium"),
])
def test_classify_scale(rs, rl, a, label):
    assert scene.classify_scale(ScaleMetrics(a, rs, rl)) == label


def test_background_mask_examples():
    assert scene.background_mask([], 10, 8).all()
    assert not scene.background_mask([box(0, 0, 10, 8)], 10, 8).any()
    assert scene.background_mask([box(20, 30, 10, 10)], 100, 100).sum() == 9900


def test_background_mask_fractional_pixel_centres():
    # covers centres 1.5 and 2.5 only
    m = scene.background_mask([box(1.2, 0, 1.6, 1)], 5, 1)
    assert m.tolist() == [[True, False, False, True, True]]


def test_background_constant_zero(ident):
    raw = scene.background_raw(np.full((20, 20), 50.0), np.ones((20, 20), bool), ident)
    assert raw == {"keypoint_density": 0.0, "edge_density": 0.0, "laplacian_mean": 0.0}
    assert scene.background_score(raw, ident) == 0.0


def test_background_score_weights(ident):
    assert math.isclose(scene.background_score(dict.fromkeys(scene.BACKGROUND_COMPONENTS, 1.0), ident), 1.0)
    assert math.isclose(scene.background_score(dict.fromkeys(scene.BACKGROUND_COMPONENTS, 0.5), ident), 0.5)


def test_background_too_small(ident):
    mask = np.zeros((20, 20), bool)
    mask[0, :3] = True  # 3 of 400 pixels < 1%
    with pytest.raises(scene.BackgroundTooSmall):
        scene.background_raw(np.zeros((20, 20)), mask, ident)
    mask[0, :4] = True
    scene.background_raw(np.zeros((20, 20)), mask, ident)


def test_background_measures_only_masked_pixels(ident):
    rng = np.random.default_rng(3)
    img = np.zeros((40, 40))
    img[:, 20:] = rng.integers(0, 256, (40, 20))
    left = np.zeros((40, 40), bool)
    left[:, :15] = True
    raw = scene.background_raw(img, left, ident)
    assert raw["keypoint_density"] == 0 and raw["edge_density"] == 0 and raw["laplacian_mean"] == 0
    raw = scene.background_raw(img, ~left, ident)
    assert raw["laplacian_mean"] > 0


@pytest.mark.parametrize("b, label", [(0.10, "simple"), (0.25, "textured"), (0.50, "complex")])
def test_classify_background(b, label):
    assert scene.classify_background(b) == label


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_background_score_unit_interval(k, e, m):
    raw = dict(zip(scene.BACKGROUND_COMPONENTS, (k * 2, e, m * 2)))
    assert 0 <= scene.background_score(raw, identity_profile()) <= 1
