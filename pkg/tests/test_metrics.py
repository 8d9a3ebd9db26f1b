import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avdet.boxes import Box, iou
from avdet.detector import Detection
from avdet.metrics import (
    EmptyTable,
    argmax_match,
    average_precision,
    binarized_ciou,
    class_agnostic,
    contingency_table,
    hungarian_match,
    kshot_match,
    localization_auc,
    matched_accuracy,
    mean_ap,
    purity,
    rasterize,
    recall_at,
    relabel_detections,
)


def naive_ap(dets, gts, thr):
    """Rank-by-rank greedy matching, then mean over GT of the best precision at or after each hit."""
    ranked = sorted(dets, key=lambda d: -d[2])
    free = {sid: list(bs) for sid, bs in gts.items()}
    hits = []
    for sid, box, _ in ranked:
        cands = [(iou(box, g), k) for k, g in enumerate(free.get(sid, [])) if g is not None]
        hit = False
        if cands:
            v, k = max(cands, key=lambda c: (c[0], -c[1]))
            if v >= thr:
                free[sid][k] = None
                hit = True
        hits.append(hit)
    n_gt = sum(len(b) for b in gts.values())
    prec = [sum(hits[:i + 1]) / (i + 1) for i in range(len(hits))]
    return sum(max(prec[i:]) for i, h in enumerate(hits) if h) / n_gt


def random_scene_set(rng, n_scenes=5, n_det=12):
    gts = {}
    for s in range(n_scenes):
        xy = rng.uniform(0, 20, size=(rng.integers(0, 3), 2))
        gts[s] = [Box(x, y, x + rng.uniform(3, 10), y + rng.uniform(3, 10)) for x, y in xy]
    dets = []
    for _ in range(n_det):
        s = int(rng.integers(0, n_scenes))
        x, y = rng.uniform(0, 20, 2)
        if gts[s] and rng.uniform() < 0.6:
            g = gts[s][rng.integers(0, len(gts[s]))]
            x, y = g.x1 + rng.normal(0, 1.5), g.y1 + rng.normal(0, 1.5)
        dets.append((s, Box(x, y, x + rng.uniform(3, 10), y + rng.uniform(3, 10)), float(rng.uniform())))
    return dets, gts


class TestAveragePrecision:
    def test_perfect(self):
        gts = {0: [Box(0, 0, 4, 4)], 1: [Box(2, 2, 9, 9), Box(10, 10, 12, 12)]}
        dets = [(s, b, 0.5) for s, bs in gts.items() for b in bs]
        assert average_precision(dets, gts, 0.5) == 1.0

    def test_no_detections(self):
        assert average_precision([], {0: [Box(0, 0, 1, 1)]}) == 0.0

    def test_tp_then_fp(self):
        gts = {0: [Box(0, 0, 4, 4)]}
        dets = [(0, Box(0, 0, 4, 4), 0.9), (0, Box(10, 10, 12, 12), 0.5)]
        assert average_precision(dets, gts) == 1.0

    def test_fp_then_tp(self):
        gts = {0: [Box(0, 0, 4, 4)]}
        dets = [(0, Box(10, 10, 12, 12), 0.9), (0, Box(0, 0, 4, 4), 0.5)]
        assert average_precision(dets, gts) == 0.5

    def test_no_ground_truth(self):
        assert average_precision([], {}) == 1.0
        assert average_precision([(0, Box(0, 0, 1, 1), 0.3)], {0: []}) == 0.0

    def test_duplicate_is_false_positive(self):
        gts = {0: [Box(0, 0, 4, 4), Box(20, 20, 24, 24)]}
        dets = [(0, Box(0, 0, 4, 4), 0.9), (0, Box(0, 0, 4, 4), 0.8), (0, Box(20, 20, 24, 24), 0.7)]
        assert average_precision(dets, gts) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            dets, gts = random_scene_set(rng)
            if not any(gts.values()):
                continue
            for thr in (0.3, 0.5, 0.75):
                assert average_precision(dets, gts, thr) == pytest.approx(naive_ap(dets, gts, thr), abs=1e-12)

    @pytest.mark.parametrize("c", [1e-3, 0.5, 7.0])
    def test_score_scaling(self, c):
        rng = np.random.default_rng(4)
        for _ in range(30):
            dets, gts = random_scene_set(rng)
            scaled = [(s, b, c * v) for s, b, v in dets]
            assert average_precision(scaled, gts) == average_precision(dets, gts)

    @given(st.integers(0, 10_000))
    def test_bounded_and_non_increasing_in_threshold(self, seed):
        dets, gts = random_scene_set(np.random.default_rng(seed))
        aps = [average_precision(dets, gts, t) for t in np.linspace(0.05, 0.95, 10)]
        assert all(0.0 <= a <= 1.0 for a in aps)
        assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


def det(box, label, score):
    return Detection(Box(*box), label, score)


class TestMeanAP:
    def test_perfect_single_class(self):
        gts = {0: [(1, Box(0, 0, 5, 5))]}
        rep = mean_ap({0: [det((0, 0, 5, 5), 1, 0.9)]}, gts)
        assert all(v == 1.0 for v in rep["map"].values())
        assert rep["map30"] == rep["map50"] == rep["map_coco"] == 1.0

    def test_unweighted_mean(self):
        gts = {0: [(0, Box(0, 0, 5, 5)), (1, Box(10, 10, 15, 15))]}
        rep = mean_ap({0: [det((0, 0, 5, 5), 0, 0.9)]}, gts)
        assert rep["per_class_ap"][0]["0.50"] == 1.0 and rep["per_class_ap"][1]["0.50"] == 0.0
        assert rep["map50"] == 0.5

    def test_absent_class_excluded(self):
        gts = {0: [(0, Box(0, 0, 5, 5))]}
        rep = mean_ap({0: [det((0, 0, 5, 5), 0, 0.9), det((9, 9, 12, 12), 3, 0.8)]}, gts)
        assert list(rep["per_class_ap"]) == [0]
        assert rep["map50"] == 1.0

    def test_coco_mean(self):
        # IoU 0.64: a hit at 0.50..0.60, a miss from 0.65 up
        gts = {0: [(0, Box(0, 0, 10, 10))]}
        rep = mean_ap({0: [det((0, 0, 10, 6.4), 0, 0.9)]}, gts)
        assert rep["map_coco"] == pytest.approx(0.3)

    def test_class_agnostic(self):
        gts = {0: [(2, Box(0, 0, 5, 5))]}
        d, g = class_agnostic({0: [det((0, 0, 5, 5), 1, 0.9)]}, gts)
        assert mean_ap(d, g)["map50"] == 1.0

    def test_cluster_permutation_invariance(self):
        rng = np.random.default_rng(8)
        gts = {s: [(int(rng.integers(0, 4)), Box(x, x, x + 6, x + 6))] for s, x in enumerate(rng.uniform(0, 20, 30))}
        dets = {}
        for s, objs in gts.items():
            c, b = objs[0]
            guess = c if rng.uniform() < 0.7 else int(rng.integers(0, 4))
            dets[s] = [Detection(Box(b.x1 + rng.normal(), b.y1, b.x2, b.y2), (guess + 1) % 4, float(rng.uniform()))]
        clusters = [d.label for s in gts for d in dets[s]]
        classes = [gts[s][0][0] for s in gts]
        base = mean_ap(relabel_detections(dets, hungarian_match(contingency_table(clusters, classes, 4, 4))), gts)
        for _ in range(5):
            p = rng.permutation(4)
            pd = {s: [Detection(d.box, int(p[d.label]), d.score) for d in ds] for s, ds in dets.items()}
            table = contingency_table([p[k] for k in clusters], classes, 4, 4)
            assert mean_ap(relabel_detections(pd, hungarian_match(table)), gts) == base

    def test_recall(self):
        boxes = {0: [Box(0, 0, 4, 4), Box(10, 10, 14, 14)], 1: [Box(0, 0, 2, 2)]}
        dets = {0: [det((0, 0, 4, 4), 3, 0.1)]}
        assert recall_at(dets, boxes) == pytest.approx(1 / 3)


def pixel_oracle(pred, gt, H, W):
    inter = union = 0
    for y in range(H):
        for x in range(W):
            cx, cy = x + 0.5, y + 0.5
            a = any(b.x1 <= cx < b.x2 and b.y1 <= cy < b.y2 for b in pred)
            b_ = any(b.x1 <= cx < b.x2 and b.y1 <= cy < b.y2 for b in gt)
            inter += a and b_
            union += a or b_
    return inter / union if union else 1.0


class TestCIoU:
    def test_equal_maps(self):
        assert binarized_ciou([det((1, 1, 5, 5), 0, 0.9)], 0.3, [Box(1, 1, 5, 5)], (8, 8)) == 1.0

    def test_empty_prediction(self):
        assert binarized_ciou([det((1, 1, 5, 5), 0, 0.1)], 0.3, [Box(1, 1, 5, 5)], (8, 8)) == 0.0

    def test_example(self):
        assert binarized_ciou([det((0, 0, 2, 2), 0, 1.0)], 0.3, [Box(1, 1, 3, 3)], (4, 4)) == pytest.approx(1 / 7)

    def test_rasterize_counts(self):
        assert rasterize([Box(0.4, 0, 2.6, 1)], (2, 4)).sum() == 3

    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            def boxes(n):
                xy = rng.uniform(-2, 14, size=(n, 2))
                return [Box(x, y, x + rng.uniform(0.5, 8), y + rng.uniform(0.5, 8)) for x, y in xy]
            pred, gt = boxes(rng.integers(0, 4)), boxes(rng.integers(1, 3))
            dets = [Detection(b, 0, 1.0) for b in pred]
            assert binarized_ciou(dets, 0.5, gt, (12, 12)) == pixel_oracle(pred, gt, 12, 12)

    def test_per_class(self):
        dets = [det((0, 0, 4, 4), 0, 0.9), det((4, 4, 8, 8), 1, 0.9)]
        gts = [(0, Box(0, 0, 4, 4)), (2, Box(4, 4, 8, 8))]
        assert binarized_ciou(dets, 0.3, gts, (8, 8)) == 1.0
        assert binarized_ciou(dets, 0.3, gts, (8, 8), per_class=True) == pytest.approx(1 / 3)


class TestAUC:
    def test_all_one(self):
        assert localization_auc([1.0, 1.0]) == 1.0

    def test_all_zero(self):
        assert localization_auc([0.0] * 5) == pytest.approx(1 / 21)

    def test_half_and_half(self):
        assert localization_auc([0.0, 1.0] * 3) == pytest.approx(11 / 21)

    def test_empty(self):
        assert localization_auc([]) == 0.0


def brute_force_best(table):
    K, C = table.shape
    if K <= C:
        return max(sum(table[k, c] for k, c in zip(range(K), p)) for p in itertools.permutations(range(C), K))
    return max(sum(table[k, c] for k, c in zip(p, range(C))) for p in itertools.permutations(range(K), C))


class TestMatching:
    def test_diagonal(self):
        assert hungarian_match(np.diag([5, 6, 7]) + 1) == {0: 0, 1: 1, 2: 2}

    def test_anti_diagonal(self):
        m = hungarian_match([[1, 5], [5, 1]])
        assert m == {0: 1, 1: 0}

    def test_more_clusters_than_classes(self):
        m = hungarian_match(np.array([[4, 0], [0, 4], [1, 1]]))
        assert len(m) == 2 and len(set(m.values())) == 2

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            K, C = rng.integers(1, 8, 2)
            table = rng.integers(0, 20, size=(K, C))
            m = hungarian_match(table)
            assert len(set(m.values())) == len(m) == min(K, C)
            assert sum(table[k, c] for k, c in m.items()) == brute_force_best(table)

    def test_argmax(self):
        assert argmax_match(np.eye(3, dtype=int) * 4) == {0: 0, 1: 1, 2: 2}
        assert argmax_match([[3, 3]]) == {0: 0}
        assert argmax_match([[5, 0], [4, 0]]) == {0: 0, 1: 0}
        assert argmax_match([[0, 0], [1, 2]]) == {1: 1}

    def test_kshot_full_vote_equals_argmax(self):
        rng = np.random.default_rng(5)
        clusters = rng.integers(0, 4, 200)
        classes = rng.integers(0, 3, 200)
        strengths = rng.uniform(size=200)
        assert kshot_match(clusters, strengths, classes, 200) == argmax_match(
            contingency_table(clusters, classes, 4, 3))

    def test_kshot_constructed(self):
        # cluster 0: strongest item says class 2, the next nine say class 1
        clusters = [0] * 10 + [1] * 3
        strengths = [1.0] + [0.9 - 0.01 * i for i in range(9)] + [0.5, 0.7, 0.6]
        labels = [2] + [1] * 9 + [0, 3, 0]
        assert kshot_match(clusters, strengths, labels, 1) == {0: 2, 1: 3}
        assert kshot_match(clusters, strengths, labels, 10) == {0: 1, 1: 0}

    def test_kshot_validation(self):
        with pytest.raises(ValueError):
            kshot_match([0], [1.0], [0], 0)

    def test_accuracy(self):
        assert matched_accuracy([0, 1, 1, 2], [1, 0, 0, 2], {0: 1, 1: 0}) == 0.75

    def test_purity(self):
        assert purity(np.eye(3) * 2) == 1.0
        assert purity(np.ones((2, 2))) == 0.5
        assert purity([[7, 3]]) == 0.7
        with pytest.raises(EmptyTable):
            purity(np.zeros((2, 2)))

    def test_contingency(self):
        t = contingency_table([0, 0, 1, 2], [1, 1, 0, 1], 3, 2)
        np.testing.assert_array_equal(t, [[0, 2], [1, 0], [0, 1]])
        assert t.sum() == 4

    def test_relabel_drops_unmapped(self):
        out = relabel_detections({0: [det((0, 0, 1, 1), 0, 0.5), det((0, 0, 1, 1), 3, 0.4)]}, {0: 2})
        assert [d.label for d in out[0]] == [2]
