"""Detection metric tests against exhaustive plain-loop oracles."""

import numpy as np
import pytest

from covfuzz import deteval, net
from covfuzz.errors import ArgumentError
from covfuzz.net import Detection


def oracle_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def oracle_ap(preds, gts, iou_min=0.5):
    """Independent AP: naive matching loops and direct area computation."""
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, k))
    matched = set()
    flags = []
    for k in order:
        best_g, best_v = None, -1.0
        for g, gt in enumerate(gts):
            if g in matched:
                continue
            v = oracle_iou(preds[k].box, gt)
            if v >= iou_min and v > best_v:
                best_g, best_v = g, v
        if best_g is not None:
            matched.add(best_g)
            flags.append(True)
        else:
            flags.append(False)
    if not gts:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    points = []
    tp = fp = 0
    for flag in flags:
        tp, fp = tp + flag, fp + (not flag)
        points.append((tp / len(gts), tp / (tp + fp)))
    area = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r > prev_r:
            best_p = max(p for (rr, p) in points if rr >= r)
            area += (r - prev_r) * best_p
            prev_r = r
    return area


def random_instance(rng, max_preds=5, max_gts=5):
    n_preds = int(rng.integers(0, max_preds + 1))
    n_gts = int(rng.integers(0, max_gts + 1))
    preds = []
    scores = rng.permutation(np.linspace(0.1, 0.9, n_preds)) if n_preds else []
    for k in range(n_preds):
        x1, y1 = rng.uniform(0, 60, 2)
        w, h = rng.uniform(4, 40, 2)
        preds.append(Detection((x1, y1, x1 + w, y1 + h), float(scores[k])))
    gts = []
    for _ in range(n_gts):
        x1, y1 = rng.uniform(0, 60, 2)
        w, h = rng.uniform(4, 40, 2)
        gts.append((x1, y1, x1 + w, y1 + h))
    return preds, gts


class TestIou:
    def test_identical(self):
        assert deteval.iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert deteval.iou((0, 0, 2, 2), (5, 5, 7, 7)) == 0.0

    def test_partial_overlap(self):
        assert deteval.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = tuple(np.sort(rng.uniform(0, 50, 2))) * 1
            x1, x2 = sorted(rng.uniform(0, 50, 2))
            y1, y2 = sorted(rng.uniform(0, 50, 2))
            a = (x1, y1, x2 + 1, y2 + 1)
            x1, x2 = sorted(rng.uniform(0, 50, 2))
            y1, y2 = sorted(rng.uniform(0, 50, 2))
            b = (x1, y1, x2 + 1, y2 + 1)
            assert deteval.iou(a, b) == pytest.approx(deteval.iou(b, a))
            assert 0.0 <= deteval.iou(a, b) <= 1.0

    def test_zero_area_rejected(self):
        with pytest.raises(ArgumentError):
            deteval.iou((0, 0, 0, 4), (0, 0, 4, 4))


class TestAveragePrecision:
    def test_single_match(self):
        preds = [Detection((10, 10, 20, 20), 0.8)]
        assert deteval.average_precision(preds, [(10, 10, 20, 20)]) == 1.0

    def test_high_score_miss_then_match(self):
        preds = [Detection((50, 50, 60, 60), 0.9),
                 Detection((10, 10, 20, 20), 0.3)]
        ap = deteval.average_precision(preds, [(10, 10, 20, 20)])
        assert ap == pytest.approx(0.5)

    def test_recall_capped_at_half(self):
        preds = [Detection((10, 10, 20, 20), 0.9)]
        gts = [(10, 10, 20, 20), (40, 40, 50, 50)]
        assert deteval.average_precision(preds, gts) == pytest.approx(0.5)

    def test_degenerate_cases(self):
        assert deteval.average_precision([], []) == 1.0
        assert deteval.average_precision([Detection((0, 0, 5, 5), 0.5)], []) == 0.0
        assert deteval.average_precision([], [(0, 0, 5, 5)]) == 0.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(400):
            preds, gts = random_instance(rng)
            assert deteval.average_precision(preds, gts) == pytest.approx(
                oracle_ap(preds, gts), abs=1e-9)

    def test_invariant_under_score_rescaling(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            preds, gts = random_instance(rng)
            scaled = [Detection(p.box, p.score * 0.37) for p in preds]
            assert deteval.average_precision(preds, gts) == pytest.approx(
                deteval.average_precision(scaled, gts), abs=1e-12)


def identity_head_graph():
    """detect_head-only graph: the input image IS the raw head tensor."""
    layers = [net.LayerSpec.detect((12, 12), [(0.15, 0.35), (0.40, 0.80)], 2)]
    return net.ModelGraph(layers, np.zeros(0, np.float32), (12, 12, 10))


class TestDatasetMap:
    def test_perfect_predictions(self):
        from tests.test_net import make_raw_for_boxes
        graph = identity_head_graph()   # 12x12 canvas
        rng = np.random.default_rng(5)
        dataset = []
        for _ in range(6):
            x1, y1 = rng.uniform(0, 5, 2)
            w, h = rng.uniform(2, 6, 2)
            box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            raw = make_raw_for_boxes(graph, [(box, 0.999, 0)])
            dataset.append((raw, [box]))
        assert deteval.dataset_map(graph, dataset) == pytest.approx(1.0, abs=1e-6)

    def test_no_predictions(self):
        graph = identity_head_graph()
        raw = np.full((12, 12, 10), -50.0, dtype=np.float32)
        dataset = [(raw, [(2.0, 2.0, 8.0, 8.0)])]
        assert deteval.dataset_map(graph, dataset) == 0.0

    def test_empty_dataset(self):
        graph = identity_head_graph()
        with pytest.raises(ArgumentError):
            deteval.dataset_map(graph, [])

    def test_pooled_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        per_image = [random_instance(rng) for _ in range(10)]
        got = deteval.pooled_ap(per_image)
        pooled_preds = []
        for img_idx, (preds, _) in enumerate(per_image):
            pooled_preds += [(p, img_idx) for p in preds]
        pooled_preds.sort(key=lambda pk: -pk[0].score)
        matched = [set() for _ in per_image]
        flags = []
        for pred, img_idx in pooled_preds:
            gts = per_image[img_idx][1]
            best_g, best_v = None, -1.0
            for g, gt in enumerate(gts):
                if g in matched[img_idx]:
                    continue
                v = oracle_iou(pred.box, gt)
                if v >= 0.5 and v > best_v:
                    best_g, best_v = g, v
            if best_g is not None:
                matched[img_idx].add(best_g)
                flags.append(True)
            else:
                flags.append(False)
        n_gt = sum(len(gts) for _, gts in per_image)
        points = []
        tp = fp = 0
        for flag in flags:
            tp, fp = tp + flag, fp + (not flag)
            points.append((tp / n_gt, tp / (tp + fp)))
        area, prev_r = 0.0, 0.0
        for r, _ in points:
            if r > prev_r:
                area += (r - prev_r) * max(p for rr, p in points if rr >= r)
                prev_r = r
        assert got == pytest.approx(area, abs=1e-9)


class TestRelativeChange:
    def test_examples(self):
        assert deteval.relative_change(0.5, 0.4) == pytest.approx(25.0)
        assert deteval.relative_change(0.4, 0.4) == 0.0

    def test_reporting_convention(self):
        base = 43.45
        assert deteval.relative_change(base * 1.2621, base) == pytest.approx(
            26.21, abs=1e-9)

    def test_zero_base(self):
        with pytest.raises(ArgumentError):
            deteval.relative_change(0.5, 0.0)


class TestCorruptionScores:
    def test_grid_means(self):
        grid = {("a", 1): 0.2, ("a", 2): 0.4, ("b", 1): 0.3, ("b", 2): 0.1}
        mpc, rpc = deteval.corruption_scores_from_maps(grid, 0.5)
        assert mpc == pytest.approx(0.25)
        assert rpc == pytest.approx(0.5)

    def test_equal_to_clean(self):
        grid = {("a", s): 0.42 for s in range(1, 6)}
        _, rpc = deteval.corruption_scores_from_maps(grid, 0.42)
        assert rpc == pytest.approx(1.0)

    def test_percent_rendering(self):
        mpc, rpc = 0.2532, 0.5841
        assert f"{mpc * 100:.2f}" == "25.32"
        assert f"{rpc * 100:.2f}" == "58.41"

    def test_empty_grid(self):
        with pytest.raises(ArgumentError):
            deteval.corruption_scores_from_maps({}, 0.5)
