import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleo.geometry import (
    AnchorSpec,
    box_iou,
    clip_box,
    decode_delta,
    encode_delta,
    generate_anchors,
    iou_box,
    masks_to_boxes,
    nms,
)
from oracles import brute_nms, encode_by_hand, raster_iou


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(1, size / 4, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


coord = st.floats(0, 50, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    w, h = draw(st.floats(0.5, 30)), draw(st.floats(0.5, 30))
    return (x, y, x + w, y + h)


class TestIoU:
    def test_identity(self):
        assert iou_box((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0

    def test_one_seventh_matches_raster(self):
        # frozen from a 1000x subpixel raster count
        oracle = raster_iou((0, 0, 2, 2), (1, 1, 3, 3))
        assert oracle == pytest.approx(1 / 7, abs=1e-12)
        assert iou_box((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(0.142857142857, abs=1e-9)

    def test_disjoint(self):
        assert iou_box((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_matrix_agrees_with_scalar(self, rng):
        a, b = random_boxes(rng, 20), random_boxes(rng, 15)
        m = box_iou(a, b)
        ref = np.array([[iou_box(x, y) for y in b] for x in a])
        np.testing.assert_allclose(m, ref, atol=1e-12)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou_box(a, b)
        assert v == pytest.approx(iou_box(b, a))
        assert 0.0 <= v <= 1.0
        assert iou_box(a, a) == pytest.approx(1.0)


class TestNMS:
    def test_single_box(self):
        assert nms([(0, 0, 5, 5)], [0.3], 0.5).tolist() == [0]

    def test_duplicate_suppressed(self):
        b = [(0, 0, 5, 5), (0, 0, 5, 5)]
        assert nms(b, [0.9, 0.8], 0.5).tolist() == [0]

    def test_ties_prefer_lower_index(self):
        b = [(0, 0, 5, 5), (0, 0, 5, 5)]
        assert nms(b, [0.5, 0.5], 0.5).tolist() == [0]

    def test_empty(self):
        assert nms(np.zeros((0, 4)), [], 0.5).size == 0

    def test_matches_brute_force_200(self, rng):
        b = random_boxes(rng, 200)
        s = rng.random(200)
        assert nms(b, s, 0.5).tolist() == brute_nms(b, s, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 80), st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]))
    def test_brute_force_property(self, seed, n, thr):
        r = np.random.default_rng(seed)
        b = random_boxes(r, n, size=40.0)
        s = np.round(r.random(n), 1)  # coarse scores force ties
        assert nms(b, s, thr).tolist() == brute_nms(b, s, thr)


class TestDeltas:
    def test_identity(self):
        np.testing.assert_array_equal(encode_delta((1, 2, 5, 9), (1, 2, 5, 9)), np.zeros(4))

    def test_hand_example(self):
        np.testing.assert_allclose(encode_delta((0, 0, 10, 10), (5, 5, 15, 15)), [0.5, 0.5, 0, 0])

    def test_matches_hand_formula(self, rng):
        a, g = random_boxes(rng, 50), random_boxes(rng, 50)
        ref = np.array([encode_by_hand(x, y) for x, y in zip(a, g)])
        np.testing.assert_allclose(encode_delta(a, g), ref, atol=1e-12)

    def test_roundtrip(self, rng):
        a, g = random_boxes(rng, 1000), random_boxes(rng, 1000)
        err = np.abs(decode_delta(a, encode_delta(a, g)) - g).max()
        assert err < 1e-6 * 100

    def test_decode_clamps_size(self):
        out = decode_delta((0, 0, 16, 16), (0, 0, 50, 50))
        assert out[2] - out[0] == pytest.approx(1000.0)

    def test_degenerate_anchor_rejected(self):
        with pytest.raises(ValueError):
            encode_delta((0, 0, 0, 5), (0, 0, 1, 1))


class TestAnchors:
    def test_single_anchor(self):
        spec = AnchorSpec(strides=(8,), scales=((8.0,),), aspect_ratios=(1.0,))
        a, lv = generate_anchors(spec, 8, 8)
        np.testing.assert_allclose(a, [[0, 0, 8, 8]])
        assert lv.tolist() == [0]

    def test_closed_form_count(self):
        spec = AnchorSpec(strides=(4, 8), scales=((16.0,), (32.0,)), aspect_ratios=(0.5, 1.0, 2.0))
        a, _ = generate_anchors(spec, 64, 64)
        assert len(a) == 16 * 16 * 3 + 8 * 8 * 3 == 960

    @pytest.mark.parametrize("hw", [(64, 64), (96, 128), (33, 70)])
    def test_default_count(self, hw):
        spec = AnchorSpec()
        a, lv = generate_anchors(spec, *hw)
        expect = sum(math.ceil(hw[0] / s) * math.ceil(hw[1] / s) * 3 for s in spec.strides)
        assert len(a) == len(lv) == expect

    def test_area_and_ratio(self):
        spec = AnchorSpec(strides=(4,), scales=((16.0, 24.0),), aspect_ratios=(0.5, 1.0, 2.0))
        a, _ = generate_anchors(spec, 8, 8)
        w, h = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
        scales = np.tile(np.repeat([16.0, 24.0], 3), 4)
        ratios = np.tile([0.5, 1.0, 2.0], 8)
        np.testing.assert_allclose(w * h, scales**2, rtol=1e-9)
        np.testing.assert_allclose(h / w, ratios, atol=1e-6)

    def test_ordering_ratio_fastest(self):
        spec = AnchorSpec(strides=(4,), scales=((16.0,),))
        a, _ = generate_anchors(spec, 8, 8)
        centers = (a[:, :2] + a[:, 2:]) / 2
        np.testing.assert_allclose(centers[:3], [[2, 2]] * 3)
        np.testing.assert_allclose(centers[3], [6, 2])

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            AnchorSpec(strides=(8, 4), scales=((1.0,), (2.0,)))


class TestClipAndMasks:
    def test_clip(self):
        np.testing.assert_array_equal(clip_box((-5, -5, 3, 3), 10, 10), [0, 0, 3, 3])
        np.testing.assert_array_equal(clip_box((1, 2, 3, 4), 10, 10), [1, 2, 3, 4])
        np.testing.assert_array_equal(clip_box((8, 8, 20, 20), 10, 10), [8, 8, 10, 10])

    def test_masks_to_boxes(self):
        m = np.zeros((6, 8), bool)
        m[1:3, 2:7] = True
        np.testing.assert_array_equal(masks_to_boxes([m]), [[2, 1, 7, 3]])
