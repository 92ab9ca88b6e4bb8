"""Evaluation measures: per-category average precision at IoU thresholds,
per-shape-averaged AP, semantic mIoU and instance coverage metrics.

Instances are point-index sets tagged with a category (semantic class), a
confidence and the shape they belong to; matching never crosses shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AP_THRESHOLDS = (0.25, 0.50, 0.75)


@dataclass
class InstanceRecord:
    """One ground-truth or predicted instance."""

    shape_id: int
    category: int
    points: np.ndarray          # sorted point indices within the shape
    confidence: float = 1.0
    order_id: int = 0           # stable tie-break for equal confidences


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two point-index sets (0 when both empty)."""
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def _greedy_match(preds: list[InstanceRecord], gts: list[InstanceRecord],
                  threshold: float) -> list[bool]:
    """True-positive flags for confidence-sorted predictions.

    Each prediction takes the unmatched ground truth of its shape and
    category with the highest IoU, provided that IoU exceeds the threshold.
    """
    matched = [False] * len(gts)
    flags = []
    for pred in preds:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.shape_id != pred.shape_id or gt.category != pred.category:
                continue
            iou = mask_iou(pred.points, gt.points)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou > threshold:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """Area under the precision-recall curve with the precision replaced by
    its running right-max envelope. Each true positive advances recall by
    1 / n_gt, so the area is the sum of envelope precisions at those steps."""
    if n_gt == 0:
        return 0.0
    precisions = []
    tp = 0
    for i, flag in enumerate(flags):
        tp += int(flag)
        precisions.append(tp / (i + 1))
    # Right-max envelope.
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    area = 0.0
    for flag, p in zip(flags, precisions):
        if flag:
            area += p
    return area / n_gt


def _sorted_preds(preds: list[InstanceRecord]) -> list[InstanceRecord]:
    return sorted(preds, key=lambda r: (-r.confidence, r.order_id))


def average_precision(preds: list[InstanceRecord], gts: list[InstanceRecord],
                      category: int, threshold: float) -> float | None:
    """AP of one category; ``None`` when the category has no ground truth
    (excluded from category means)."""
    cat_gts = [g for g in gts if g.category == category]
    if not cat_gts:
        return None
    cat_preds = _sorted_preds([p for p in preds if p.category == category])
    flags = _greedy_match(cat_preds, cat_gts, threshold)
    return _ap_from_flags(flags, len(cat_gts))


def shape_ap(preds: list[InstanceRecord], gts: list[InstanceRecord],
             threshold: float) -> float | None:
    """AP computed within each shape then averaged uniformly over shapes;
    shapes without ground truth are skipped."""
    shape_ids = sorted({g.shape_id for g in gts})
    if not shape_ids:
        return None
    values = []
    for sid in shape_ids:
        s_gts = [g for g in gts if g.shape_id == sid]
        s_preds = _sorted_preds([p for p in preds if p.shape_id == sid])
        flags = _greedy_match(s_preds, s_gts, threshold)
        values.append(_ap_from_flags(flags, len(s_gts)))
    return float(np.mean(values))


def semantic_miou(pred_labels: np.ndarray, gt_labels: np.ndarray, n_classes: int) -> float:
    """Mean per-class point IoU over classes present in either labeling."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("label arrays must have identical shape")
    if gt.min(initial=1) < 1 or gt.max(initial=1) > n_classes \
            or pred.min(initial=1) < 1 or pred.max(initial=1) > n_classes:
        raise ValueError(f"labels must lie in 1..{n_classes}")
    ious = []
    for m in range(1, n_classes + 1):
        p = pred == m
        g = gt == m
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def coverage_metrics(preds: list[InstanceRecord], gts: list[InstanceRecord]
                     ) -> tuple[float, float, float, float]:
    """(mCov, mWCov, mPrec, mRec) over one point universe.

    mCov: mean over ground-truth instances of the best IoU against any
    prediction; mWCov weights each ground truth by its point count; mPrec and
    mRec count matches with IoU strictly above 0.5.
    """
    if not gts:
        return 0.0, 0.0, 0.0, 0.0
    best = []
    for gt in gts:
        ious = [mask_iou(gt.points, p.points) for p in preds
                if p.shape_id == gt.shape_id]
        best.append(max(ious) if ious else 0.0)
    sizes = np.array([g.points.size for g in gts], dtype=np.float64)
    mcov = float(np.mean(best))
    mwcov = float(np.sum(sizes * best) / sizes.sum())
    tp = 0
    matched = [False] * len(gts)
    for p in preds:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.shape_id != p.shape_id:
                continue
            iou = mask_iou(p.points, gt.points)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou > 0.5:
            matched[best_j] = True
            tp += 1
    mprec = tp / len(preds) if preds else 0.0
    mrec = tp / len(gts)
    return mcov, mwcov, mprec, mrec


# ---------------------------------------------------------------------------
# Dataset-level report
# ---------------------------------------------------------------------------


@dataclass
class LevelMetrics:
    ap_per_category: dict[float, dict[int, float]]  # threshold -> category -> AP
    ap_mean: dict[float, float]                     # threshold -> category mean
    s_ap50: float
    miou: float
    mcov: float
    mwcov: float
    mprec: float
    mrec: float


@dataclass
class MetricsReport:
    levels: list[LevelMetrics] = field(default_factory=list)

    def overall(self, threshold: float = 0.50) -> float:
        """Category-mean AP at a threshold, averaged over levels."""
        return float(np.mean([lv.ap_mean[threshold] for lv in self.levels]))


def instances_from_labels(shape_id: int, sem: np.ndarray, inst: np.ndarray,
                          confidences: np.ndarray | None = None,
                          order_base: int = 0) -> list[InstanceRecord]:
    """Build instance records from per-point labels.

    ``confidences`` maps contiguous instance ids to scores (predictions);
    ground truth gets confidence 1.
    """
    records = []
    for j, iid in enumerate(np.unique(inst)):
        members = np.flatnonzero(inst == iid)
        conf = float(confidences[j]) if confidences is not None else 1.0
        records.append(InstanceRecord(
            shape_id=shape_id,
            category=int(sem[members[0]]),
            points=members,
            confidence=conf,
            order_id=order_base + j,
        ))
    return records


def evaluate_level(preds: list[InstanceRecord], gts: list[InstanceRecord],
                   pred_sem: np.ndarray, gt_sem: np.ndarray,
                   n_classes: int) -> LevelMetrics:
    categories = sorted({g.category for g in gts})
    ap_per_cat: dict[float, dict[int, float]] = {}
    ap_mean: dict[float, float] = {}
    for thr in AP_THRESHOLDS:
        per_cat = {}
        for cat in categories:
            ap = average_precision(preds, gts, cat, thr)
            if ap is not None:
                per_cat[cat] = ap
        ap_per_cat[thr] = per_cat
        ap_mean[thr] = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
    s50 = shape_ap(preds, gts, 0.50)
    mcov, mwcov, mprec, mrec = coverage_metrics(preds, gts)
    return LevelMetrics(
        ap_per_category=ap_per_cat,
        ap_mean=ap_mean,
        s_ap50=s50 if s50 is not None else 0.0,
        miou=semantic_miou(pred_sem, gt_sem, n_classes),
        mcov=mcov, mwcov=mwcov, mprec=mprec, mrec=mrec,
    )


def evaluate_dataset(shapes, predictions) -> MetricsReport:
    """Full report for aligned lists of shapes and instance predictions."""
    if len(shapes) != len(predictions):
        raise ValueError("shapes and predictions must align")
    if not shapes:
        raise ValueError("nothing to evaluate")
    n_levels = shapes[0].n_levels
    report = MetricsReport()
    for k in range(n_levels):
        gts: list[InstanceRecord] = []
        preds: list[InstanceRecord] = []
        gt_sem_all = []
        pred_sem_all = []
        for sid, (shape, pred) in enumerate(zip(shapes, predictions)):
            lv_gt = shape.levels[k]
            lv_pr = pred.levels[k]
            gts.extend(instances_from_labels(sid, lv_gt.sem, lv_gt.inst,
                                             order_base=len(gts)))
            preds.extend(instances_from_labels(
                sid, lv_pr.point_sem(), lv_pr.point_inst,
                confidences=lv_pr.confidences, order_base=len(preds)))
            gt_sem_all.append(lv_gt.sem)
            pred_sem_all.append(lv_pr.point_sem())
        report.levels.append(evaluate_level(
            preds, gts,
            np.concatenate(pred_sem_all), np.concatenate(gt_sem_all),
            shapes[0].class_counts[k],
        ))
    return report


def render_tsv(report: MetricsReport) -> str:
    """Per-level, per-category AP table plus a per-level summary table."""
    lines = ["level\tcategory\tap25\tap50\tap75"]
    for k, lv in enumerate(report.levels, start=1):
        cats = sorted(lv.ap_per_category[0.50])
        for cat in cats:
            lines.append("\t".join([
                str(k), str(cat),
                repr(lv.ap_per_category[0.25].get(cat, 0.0)),
                repr(lv.ap_per_category[0.50].get(cat, 0.0)),
                repr(lv.ap_per_category[0.75].get(cat, 0.0)),
            ]))
    lines.append("")
    lines.append("level\tap25\tap50\tap75\ts_ap50\tmiou\tmcov\tmwcov\tmprec\tmrec")
    for k, lv in enumerate(report.levels, start=1):
        lines.append("\t".join([str(k)] + [repr(v) for v in (
            lv.ap_mean[0.25], lv.ap_mean[0.50], lv.ap_mean[0.75],
            lv.s_ap50, lv.miou, lv.mcov, lv.mwcov, lv.mprec, lv.mrec,
        )]))
    return "\n".join(lines) + "\n"


def render_summary(report: MetricsReport) -> str:
    """Machine-readable key=value summary."""
    lines = []
    for k, lv in enumerate(report.levels, start=1):
        prefix = f"level{k}."
        lines.append(f"{prefix}ap25={lv.ap_mean[0.25]!r}")
        lines.append(f"{prefix}ap50={lv.ap_mean[0.50]!r}")
        lines.append(f"{prefix}ap75={lv.ap_mean[0.75]!r}")
        lines.append(f"{prefix}s_ap50={lv.s_ap50!r}")
        lines.append(f"{prefix}miou={lv.miou!r}")
        lines.append(f"{prefix}mcov={lv.mcov!r}")
        lines.append(f"{prefix}mwcov={lv.mwcov!r}")
        lines.append(f"{prefix}mprec={lv.mprec!r}")
        lines.append(f"{prefix}mrec={lv.mrec!r}")
    for thr, key in ((0.25, "ap25"), (0.50, "ap50"), (0.75, "ap75")):
        lines.append(f"overall.{key}={report.overall(thr)!r}")
    return "\n".join(lines) + "\n"
