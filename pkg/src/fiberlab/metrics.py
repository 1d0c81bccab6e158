"""Detection evaluation: matching, precision-recall, AP, MAPE, divergence.

Detections are matched to ground truths greedily in descending score
order; each detection takes the highest-IoU still-unmatched ground truth
at or above the threshold. A detection whose only candidates are already
matched is, by default, counted as a false negative rather than a false
positive ("paper" duplicate policy); the conventional behavior is
available as the "coco" policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pruning import mask_iou

#: IoU thresholds for the mean average precision (0.50 to 0.95, step 0.05).
DEFAULT_IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
#: Number of uniformly spaced recall samples when averaging precision.
RECALL_SAMPLE_COUNT = 101

DUPLICATE_POLICIES = ("paper", "coco")


class DivergenceUndefinedError(ValueError):
    """Raised when two histograms share no bin where both are nonzero."""


@dataclass
class MatchResult:
    tp_count: int
    fp_count: int
    fn_count: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass(frozen=True)
class PRCurve:
    """Interpolated precision-recall points as (recall, precision, score)."""

    points: list[tuple[float, float, float]]


@dataclass
class APReport:
    ap_by_threshold: dict[float, float]
    map_value: float

    def _lookup(self, threshold: float) -> float | None:
        for key, value in self.ap_by_threshold.items():
            if abs(key - threshold) < 1e-9:
                return value
        return None

    @property
    def ap50(self) -> float | None:
        return self._lookup(0.50)

    @property
    def ap75(self) -> float | None:
        return self._lookup(0.75)


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin probability density (integrates to one)."""

    bin_edges: np.ndarray
    densities: np.ndarray
    weight_policy: str = "objectness"


def iou_matrix(det_masks, gt_masks) -> np.ndarray:
    """Pairwise mask IoU, detections along rows."""
    out = np.zeros((len(det_masks), len(gt_masks)))
    for i, det in enumerate(det_masks):
        for j, gt in enumerate(gt_masks):
            out[i, j] = mask_iou(det, gt)
    return out


def match_outcomes(ious: np.ndarray, scores, iou_threshold: float,
                   duplicate_policy: str = "paper"):
    """Per-detection outcomes in descending score order.

    Returns a list of (detection index, score, outcome, matched gt index
    or None, iou) with outcome one of 'tp', 'fp', 'dup'.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    if duplicate_policy not in DUPLICATE_POLICIES:
        raise ValueError(f"duplicate_policy must be one of {DUPLICATE_POLICIES}")
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    matched: set[int] = set()
    outcomes = []
    for di in order:
        di = int(di)
        row = ious[di]
        candidates = np.flatnonzero(row >= iou_threshold)
        free = [int(g) for g in candidates if int(g) not in matched]
        if free:
            gi = max(free, key=lambda g: (row[g], -g))
            matched.add(gi)
            outcomes.append((di, float(scores[di]), "tp", gi, float(row[gi])))
        elif candidates.size:
            outcome = "dup" if duplicate_policy == "paper" else "fp"
            outcomes.append((di, float(scores[di]), outcome, None, 0.0))
        else:
            outcomes.append((di, float(scores[di]), "fp", None, 0.0))
    return outcomes


def match_detections(detections, ground_truths, iou_threshold: float,
                     duplicate_policy: str = "paper") -> MatchResult:
    """Categorize scored detection masks against ground-truth masks.

    ``detections`` is a sequence of (mask, score). Ground truths left
    unmatched count as false negatives; under the default duplicate
    policy, duplicate detections of an already-matched ground truth do
    too.
    """
    det_masks = [np.asarray(m, dtype=bool) for m, _ in detections]
    scores = [float(s) for _, s in detections]
    gt_masks = [np.asarray(m, dtype=bool) for m in ground_truths]
    shapes = {m.shape for m in det_masks} | {m.shape for m in gt_masks}
    if len(shapes) > 1:
        raise ValueError(f"masks must share one canvas, got shapes {sorted(shapes)}")
    outcomes = match_outcomes(iou_matrix(det_masks, gt_masks), scores,
                              iou_threshold, duplicate_policy)
    tp = sum(1 for o in outcomes if o[2] == "tp")
    fp = sum(1 for o in outcomes if o[2] == "fp")
    dup = sum(1 for o in outcomes if o[2] == "dup")
    pairs = [(o[0], o[3], o[4]) for o in outcomes if o[2] == "tp"]
    return MatchResult(tp_count=tp, fp_count=fp,
                       fn_count=len(gt_masks) - tp + dup, pairs=pairs)


def precision_recall(match: MatchResult, total_gts: int) -> tuple[float, float]:
    """Precision TP/(TP+FP) and recall TP/total; zero when undefined."""
    if total_gts < 0:
        raise ValueError("total_gts must be >= 0")
    denominator = match.tp_count + match.fp_count
    precision = match.tp_count / denominator if denominator else 0.0
    recall = match.tp_count / total_gts if total_gts else 0.0
    return precision, recall


def pr_curve_from_outcomes(outcomes, total_gts: int) -> PRCurve:
    """Cumulative PR sweep over every distinct score, then interpolation.

    ``outcomes`` are (score, kind) pairs with kind 'tp', 'fp' or 'dup';
    duplicates count toward neither precision term. Each recall is
    assigned the maximum precision at any recall at or beyond it.
    """
    ranked = sorted(outcomes, key=lambda o: -o[0])
    raw = []
    tp = fp = 0
    for i, (score, kind) in enumerate(ranked):
        if kind == "tp":
            tp += 1
        elif kind == "fp":
            fp += 1
        elif kind != "dup":
            raise ValueError(f"unknown outcome kind {kind!r}")
        if i + 1 < len(ranked) and ranked[i + 1][0] == score:
            continue  # extend the prefix to include ties before recording
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / total_gts if total_gts else 0.0
        raw.append((recall, precision, score))
    # envelope: every recall gets the maximum raw precision at any recall
    # at or beyond it (entries sharing a recall share one envelope value)
    n = len(raw)
    suffix = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = max(raw[i][1], suffix[i + 1])
    points = []
    group_start = 0
    for i, (recall, _, score) in enumerate(raw):
        if raw[group_start][0] != recall:
            group_start = i
        points.append((recall, suffix[group_start], score))
    return PRCurve(points=points)


def pr_curve(detections, ground_truths, iou_threshold: float,
             duplicate_policy: str = "paper") -> PRCurve:
    """Interpolated precision-recall curve for one scene."""
    det_masks = [np.asarray(m, dtype=bool) for m, _ in detections]
    scores = [float(s) for _, s in detections]
    gt_masks = [np.asarray(m, dtype=bool) for m in ground_truths]
    outcomes = match_outcomes(iou_matrix(det_masks, gt_masks), scores,
                              iou_threshold, duplicate_policy)
    return pr_curve_from_outcomes([(o[1], o[2]) for o in outcomes], len(gt_masks))


def average_precision(curve: PRCurve) -> float:
    """Mean interpolated precision over uniformly spaced recall samples.

    Recall values beyond the curve contribute zero precision.
    """
    if not curve.points:
        return 0.0
    recalls = np.array([p[0] for p in curve.points])
    precisions = np.array([p[1] for p in curve.points])
    samples = np.linspace(0.0, 1.0, RECALL_SAMPLE_COUNT)
    idx = np.searchsorted(recalls, samples, side="left")
    values = np.where(idx < len(recalls), precisions[np.minimum(idx, len(recalls) - 1)], 0.0)
    return float(values.mean())


def mean_ap(detections, ground_truths, thresholds=DEFAULT_IOU_THRESHOLDS,
            duplicate_policy: str = "paper") -> APReport:
    """AP at each IoU threshold plus their mean."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    det_masks = [np.asarray(m, dtype=bool) for m, _ in detections]
    scores = [float(s) for _, s in detections]
    gt_masks = [np.asarray(m, dtype=bool) for m in ground_truths]
    ious = iou_matrix(det_masks, gt_masks)
    ap_by_threshold = {}
    for threshold in thresholds:
        outcomes = match_outcomes(ious, scores, threshold, duplicate_policy)
        curve = pr_curve_from_outcomes([(o[1], o[2]) for o in outcomes], len(gt_masks))
        ap_by_threshold[float(threshold)] = average_precision(curve)
    values = list(ap_by_threshold.values())
    return APReport(ap_by_threshold=ap_by_threshold, map_value=float(np.mean(values)))


def percentage_error(predicted: float, target: float) -> float:
    """Signed percentage error of a prediction against its target."""
    if target == 0:
        raise ValueError("target must be nonzero")
    return (predicted - target) / target * 100.0


def mape(matched_errors, unmatched_count: int, mode: str = "strict") -> float:
    """Mean absolute percentage error over matched plus unmatched instances.

    Every unmatched instance contributes 100% in 'strict' mode and 0% in
    'loose' mode.
    """
    if mode not in ("strict", "loose"):
        raise ValueError("mode must be 'strict' or 'loose'")
    if unmatched_count < 0:
        raise ValueError("unmatched_count must be >= 0")
    matched_errors = list(matched_errors)
    total = len(matched_errors) + unmatched_count
    if total == 0:
        raise ValueError("need at least one instance")
    penalty = 100.0 if mode == "strict" else 0.0
    return (sum(abs(e) for e in matched_errors) + penalty * unmatched_count) / total


def weighted_histogram(values, weights, bin_count: int,
                       value_range: tuple[float, float] | None = None,
                       weight_policy: str = "objectness") -> Histogram:
    """Weighted probability density over uniform bins.

    Bins span the given range, or the min and max of ``values`` when no
    range is supplied (callers comparing two histograms should pass the
    pooled range so the edges coincide).
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape != weights.shape:
        raise ValueError("values and weights must have the same length")
    if values.size == 0:
        raise ValueError("need at least one value")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    if weights.sum() <= 0:
        raise ValueError("total weight must be positive")
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    densities, edges = np.histogram(values, bins=bin_count, range=value_range,
                                    weights=weights, density=True)
    return Histogram(bin_edges=edges, densities=densities, weight_policy=weight_policy)


def kl_divergence(p: Histogram, q: Histogram) -> float:
    """Divergence sum(P * ln(P/Q)) over bins where both masses are nonzero.

    Bins with a zero on either side are excluded without renormalizing.
    Natural logarithm.
    """
    if not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share identical bin edges")
    widths = np.diff(p.bin_edges)
    p_mass = p.densities * widths
    q_mass = q.densities * widths
    common = (p_mass > 0) & (q_mass > 0)
    if not common.any():
        raise DivergenceUndefinedError("no bin has nonzero mass in both histograms")
    pm = p_mass[common]
    qm = q_mass[common]
    return float(np.sum(pm * np.log(pm / qm)))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight (x0, y0, x1, y1) box of the true pixels, or None when empty."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def bbox_iou(a, b) -> float:
    """IoU of two pixel-index boxes (x0, y0, x1, y1), inclusive bounds."""
    if a is None or b is None:
        return 0.0
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    if ix0 > ix1 or iy0 > iy1:
        return 0.0
    inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)
