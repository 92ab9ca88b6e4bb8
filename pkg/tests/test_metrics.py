import itertools

import numpy as np
import pytest

from partfusion.metrics import (
    InstanceRecord,
    average_precision,
    coverage_metrics,
    evaluate_dataset,
    instances_from_labels,
    mask_iou,
    render_summary,
    render_tsv,
    semantic_miou,
    shape_ap,
)


def rec(points, category=1, conf=1.0, shape_id=0, order_id=0):
    return InstanceRecord(shape_id, category, np.asarray(points, dtype=np.int64),
                          conf, order_id)


class TestMaskIou:
    def test_identical(self):
        assert mask_iou(np.array([1, 2, 3]), np.array([1, 2, 3])) == 1.0

    def test_disjoint(self):
        assert mask_iou(np.array([1, 2]), np.array([3, 4])) == 0.0

    def test_partial_overlap(self):
        assert mask_iou(np.array([1, 2]), np.array([2, 3])) == pytest.approx(1 / 3)

    def test_empty(self):
        empty = np.array([], dtype=np.int64)
        assert mask_iou(empty, empty) == 0.0


class TestAveragePrecision:
    def test_single_match_above_threshold(self):
        gts = [rec([0, 1, 2, 3, 4])]
        preds = [rec([0, 1, 2], conf=0.9)]  # IoU 3/5 = 0.6
        assert average_precision(preds, gts, 1, 0.5) == 1.0

    def test_single_match_below_threshold(self):
        gts = [rec([0, 1, 2, 3, 4])]
        preds = [rec([0, 1], conf=0.9)]  # IoU 2/5 = 0.4
        assert average_precision(preds, gts, 1, 0.5) == 0.0

    def test_worked_half_example(self):
        gts = [rec([0, 1]), rec([4, 5], order_id=1)]
        preds = [rec([0, 1], conf=0.9, order_id=0),
                 rec([6, 7], conf=0.8, order_id=1)]
        assert average_precision(preds, gts, 1, 0.5) == 0.5

    def test_zero_gt_category_excluded(self):
        assert average_precision([rec([0], category=2)], [rec([0])], 2, 0.5) is None

    def test_threshold_monotonicity(self, rng):
        for _ in range(50):
            gts, preds = random_micro_case(rng)
            for cat in {g.category for g in gts}:
                values = [average_precision(preds, gts, cat, t)
                          for t in (0.25, 0.5, 0.75)]
                assert values[0] >= values[1] >= values[2]

    def test_confidence_rescale_invariance(self, rng):
        for _ in range(25):
            gts, preds = random_micro_case(rng)
            scaled = [rec(p.points, p.category, p.confidence * 37.5, p.shape_id,
                          p.order_id) for p in preds]
            for cat in {g.category for g in gts}:
                assert average_precision(preds, gts, cat, 0.5) == \
                    average_precision(scaled, gts, cat, 0.5)


# --------------------------------------------------------------------------
# Exhaustive PR-curve oracle: re-runs the greedy matching from scratch for
# every confidence-sorted prefix, then integrates the right-max envelope over
# the recall grid {t / n_gt}.
# --------------------------------------------------------------------------


def oracle_ap(preds, gts, category, threshold):
    cat_gts = [g for g in gts if g.category == category]
    if not cat_gts:
        return None
    cat_preds = sorted([p for p in preds if p.category == category],
                       key=lambda r: (-r.confidence, r.order_id))
    n_gt = len(cat_gts)

    def prefix_tp(k):
        matched = [False] * n_gt
        tp = 0
        for pred in cat_preds[:k]:
            best, best_j = 0.0, -1
            for j, gt in enumerate(cat_gts):
                if matched[j] or gt.shape_id != pred.shape_id:
                    continue
                iou = mask_iou(pred.points, gt.points)
                if iou > best:
                    best, best_j = iou, j
            if best_j >= 0 and best > threshold:
                matched[best_j] = True
                tp += 1
        return tp

    points = [(prefix_tp(k) / n_gt, prefix_tp(k) / k)
              for k in range(1, len(cat_preds) + 1)]
    area = 0.0
    for t in range(1, n_gt + 1):
        r = t / n_gt
        candidates = [p for (rr, p) in points if rr >= r - 1e-12]
        if candidates:
            area += max(candidates)
    return area / n_gt


def random_micro_case(rng):
    """Up to 3 ground truths and 3 predictions over 8 points, two categories,
    coarse confidences so ties occur."""
    universe = np.arange(8)
    gts = []
    for j in range(int(rng.integers(1, 4))):
        size = int(rng.integers(1, 5))
        gts.append(rec(np.sort(rng.choice(universe, size=size, replace=False)),
                       category=int(rng.integers(1, 3)), order_id=j))
    preds = []
    for j in range(int(rng.integers(0, 4))):
        size = int(rng.integers(1, 5))
        preds.append(rec(np.sort(rng.choice(universe, size=size, replace=False)),
                         category=int(rng.integers(1, 3)),
                         conf=float(rng.integers(1, 4)) / 4.0, order_id=j))
    return gts, preds


class TestApAgainstOracle:
    def test_micro_cases_exact(self, rng):
        checked = 0
        for _ in range(500):
            gts, preds = random_micro_case(rng)
            for cat in (1, 2):
                want = oracle_ap(preds, gts, cat, 0.5)
                got = average_precision(preds, gts, cat, 0.5)
                assert got == want  # exact float equality
                checked += want is not None
        assert checked > 300

    def test_structured_overlap_sweep(self):
        """All two-set overlap layouts on 8 points, one category."""
        universe = list(range(8))
        for gt_size, pred_size, inter in itertools.product(
                range(1, 5), range(1, 5), range(0, 5)):
            if inter > min(gt_size, pred_size):
                continue
            gt_pts = universe[:gt_size]
            pred_pts = universe[gt_size - inter:gt_size - inter + pred_size]
            gts = [rec(gt_pts)]
            preds = [rec(pred_pts, conf=0.9)]
            for thr in (0.25, 0.5, 0.75):
                assert average_precision(preds, gts, 1, thr) == \
                    oracle_ap(preds, gts, 1, thr)


class TestShapeAp:
    def test_perfect_everywhere(self):
        gts = [rec([0, 1], shape_id=0), rec([2, 3], shape_id=1)]
        preds = [rec([0, 1], shape_id=0, conf=0.9),
                 rec([2, 3], shape_id=1, conf=0.9)]
        assert shape_ap(preds, gts, 0.5) == 1.0

    def test_one_perfect_one_wrong(self):
        gts = [rec([0, 1], shape_id=0), rec([2, 3], shape_id=1)]
        preds = [rec([0, 1], shape_id=0, conf=0.9),
                 rec([6, 7], shape_id=1, conf=0.9)]
        assert shape_ap(preds, gts, 0.5) == 0.5

    def test_three_shape_mean_matches_brute_force(self, rng):
        gts, preds = [], []
        per_shape = []
        for sid in range(3):
            s_gts, s_preds = random_micro_case(rng)
            for g in s_gts:
                g.shape_id = sid
            for p in s_preds:
                p.shape_id = sid
            gts.extend(s_gts)
            preds.extend(s_preds)
            per_shape.append((s_gts, s_preds))
        got = shape_ap(preds, gts, 0.5)
        brute = []
        for s_gts, s_preds in per_shape:
            flags = []
            matched = [False] * len(s_gts)
            for p in sorted(s_preds, key=lambda r: (-r.confidence, r.order_id)):
                best, best_j = 0.0, -1
                for j, g in enumerate(s_gts):
                    if matched[j] or g.category != p.category:
                        continue
                    iou = mask_iou(p.points, g.points)
                    if iou > best:
                        best, best_j = iou, j
                if best_j >= 0 and best > 0.5:
                    matched[best_j] = True
                    flags.append(True)
                else:
                    flags.append(False)
            tp = 0
            precisions = []
            for i, f in enumerate(flags):
                tp += f
                precisions.append(tp / (i + 1))
            for i in range(len(precisions) - 2, -1, -1):
                precisions[i] = max(precisions[i], precisions[i + 1])
            brute.append(sum(p for f, p in zip(flags, precisions) if f) / len(s_gts))
        assert got == pytest.approx(np.mean(brute), abs=1e-12)


class TestSemanticMiou:
    def test_identical(self):
        labels = np.array([1, 2, 1, 2])
        assert semantic_miou(labels, labels, 2) == 1.0

    def test_disjoint_swap(self):
        assert semantic_miou(np.array([1, 1, 2, 2]), np.array([2, 2, 1, 1]), 2) == 0.0

    def test_one_mislabeled_point(self):
        gt = np.array([1, 1, 2, 2])
        pred = np.array([1, 1, 1, 2])
        assert semantic_miou(pred, gt, 2) == pytest.approx((2 / 3 + 1 / 2) / 2)

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            semantic_miou(np.array([1, 3]), np.array([1, 2]), 2)


class TestCoverage:
    def test_perfect(self):
        gts = [rec([0, 1]), rec([2, 3, 4])]
        preds = [rec([0, 1], conf=0.9), rec([2, 3, 4], conf=0.8)]
        assert coverage_metrics(preds, gts) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_predictions(self):
        gts = [rec([0, 1])]
        mcov, mwcov, mprec, mrec = coverage_metrics([], gts)
        assert (mcov, mwcov, mprec, mrec) == (0.0, 0.0, 0.0, 0.0)

    def test_worked_example(self):
        gt_small = rec(list(range(10)))
        gt_big = rec(list(range(10, 40)))
        pred_exact = rec(list(range(10)))            # IoU 1.0 with gt_small
        pred_partial = rec(list(range(10, 22)))      # 12/30 = 0.4 with gt_big
        mcov, mwcov, mprec, mrec = coverage_metrics([pred_exact, pred_partial],
                                                    [gt_small, gt_big])
        assert mcov == pytest.approx(0.7)
        assert mwcov == pytest.approx((10 * 1.0 + 30 * 0.4) / 40)
        assert mprec == mrec == 0.5


class TestReport:
    def make_report(self):
        from partfusion.clustering import InstancePrediction, LevelPrediction
        from partfusion.shapes import ShapeSpec, generate_shape

        shapes, preds = [], []
        for i in range(3):
            s = generate_shape(ShapeSpec("legged-table", parts=3, points=96), i)
            shapes.append(s)
            levels = []
            for lv in s.levels:
                ids, inv = np.unique(lv.inst, return_inverse=True)
                labels = np.array([lv.sem[lv.inst == iid][0] for iid in ids])
                levels.append(LevelPrediction(inv, labels, np.ones(len(ids))))
            preds.append(InstancePrediction(levels))
        return shapes, preds

    def test_perfect_predictions_score_one(self):
        shapes, preds = self.make_report()
        report = evaluate_dataset(shapes, preds)
        for lv in report.levels:
            for thr in (0.25, 0.5, 0.75):
                assert lv.ap_mean[thr] == 1.0
            assert lv.s_ap50 == 1.0 and lv.miou == 1.0
            assert lv.mcov == lv.mwcov == lv.mprec == lv.mrec == 1.0
        assert report.overall(0.5) == 1.0

    def test_render_formats(self):
        shapes, preds = self.make_report()
        report = evaluate_dataset(shapes, preds)
        tsv = render_tsv(report)
        assert tsv.startswith("level\tcategory")
        assert "\t1.0\t1.0\t1.0" in tsv
        summary = render_summary(report)
        entries = dict(line.split("=") for line in summary.strip().splitlines())
        assert float(entries["overall.ap50"]) == 1.0
        assert float(entries["level1.miou"]) == 1.0
        assert float(entries["level3.mcov"]) == 1.0
