import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avdet.boxes import Box, InvalidBox, iou, iou_matrix


def raster_iou(a: Box, b: Box, res: float) -> float:
    """Pixel-count IoU on a grid of cell size ``res`` (cell centres)."""
    lo = min(a.x1, b.x1, a.y1, b.y1)
    hi = max(a.x2, b.x2, a.y2, b.y2)
    c = np.arange(lo + res / 2, hi, res)
    X, Y = np.meshgrid(c, c)
    ia = (X > a.x1) & (X < a.x2) & (Y > a.y1) & (Y < a.y2)
    ib = (X > b.x1) & (X < b.x2) & (Y > b.y1) & (Y < b.y2)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union


def grid_box(draw, step=0.125, hi=80):
    x1, x2 = sorted(draw(st.lists(st.integers(0, hi), min_size=2, max_size=2, unique=True)))
    y1, y2 = sorted(draw(st.lists(st.integers(0, hi), min_size=2, max_size=2, unique=True)))
    return Box(x1 * step, y1 * step, x2 * step, y2 * step)


boxes = st.builds(lambda a, b, w, h: Box(a, b, a + w, b + h),
                  st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 20), st.floats(0.01, 20))


class TestBox:
    @pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1)])
    def test_degenerate_rejected(self, coords):
        with pytest.raises(InvalidBox):
            Box(*coords)

    def test_area_and_roundtrip(self):
        b = Box(1, 2, 4, 6)
        assert b.area == 12
        assert Box.from_seq(b.as_list()) == b

    def test_clip(self):
        assert Box(-2, -1, 40, 10).clip(32, 32) == Box(0, 0, 32, 10)


class TestIoU:
    def test_identical(self):
        assert iou(Box(1, 2, 3, 5), Box(1, 2, 3, 5)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0

    def test_overlap_example(self):
        a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert raster_iou(a, b, 0.001) == pytest.approx(1 / 7, abs=1e-6)

    @given(boxes, boxes)
    def test_symmetric_bounded(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)

    @given(boxes)
    def test_one_iff_identical(self, a):
        shifted = Box(a.x1, a.y1, a.x2 + 0.5, a.y2)
        assert iou(a, a) == 1.0
        assert iou(a, shifted) < 1.0

    def test_matches_rasterization_oracle(self):
        # coordinates on a 1/8 grid make the raster count exact
        rng = np.random.default_rng(7)
        step = 0.125
        for _ in range(1000):
            xs = np.sort(rng.choice(65, 2, replace=False)) * step
            ys = np.sort(rng.choice(65, 2, replace=False)) * step
            us = np.sort(rng.choice(65, 2, replace=False)) * step
            vs = np.sort(rng.choice(65, 2, replace=False)) * step
            a, b = Box(xs[0], ys[0], xs[1], ys[1]), Box(us[0], vs[0], us[1], vs[1])
            assert abs(iou(a, b) - raster_iou(a, b, step)) <= 1e-6

    def test_matrix_agrees_with_scalar(self, rng):
        a = rng.uniform(0, 10, (6, 2))
        a = np.hstack([a, a + rng.uniform(0.5, 5, (6, 2))])
        b = rng.uniform(0, 10, (4, 2))
        b = np.hstack([b, b + rng.uniform(0.5, 5, (4, 2))])
        m = iou_matrix(a, b)
        for i in range(6):
            for j in range(4):
                assert m[i, j] == pytest.approx(iou(Box(*a[i]), Box(*b[j])), abs=1e-12)
