"""Detection metrics on a single-image basis.

Matching is greedy by descending score at IoU >= 0.5 within each class; AP
uses all-point interpolation (area under the running-max precision envelope).
Ties are broken deterministically everywhere — equal scores order by image id
then detection index — so metric files are bit-reproducible. A linear domain
probe on frozen features quantifies how much domain identity leaks into the
backbone.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from .boxes import NUM_THREAT_CLASSES, THREAT_CLASS_NAMES, compute_iou

DEFAULT_MATCH_IOU = 0.5

METRICS_COLUMNS = ("experiment", "mode", "class", "ap", "map",
                   "far_at_threshold", "probe_auc", "seed")


@dataclass
class MatchResult:
    true_positive: np.ndarray  # [n_det] bool, original detection order
    gt_matched: np.ndarray     # [n_gt] bool


@dataclass(frozen=True)
class PRCurve:
    class_id: int
    recall: np.ndarray
    precision: np.ndarray


@dataclass(frozen=True)
class APResult:
    per_class: dict[int, float]   # class id -> AP, only classes with gt
    excluded: tuple[int, ...]     # classes with zero gt, flagged not averaged
    map: float


def match_detections(detections, gt, iou_match: float = DEFAULT_MATCH_IOU) -> MatchResult:
    """Greedy one-to-one matching. Detections are visited by descending score
    (original index breaks ties); each takes the highest-IoU unmatched gt of
    its own class at IoU >= iou_match (lowest gt index on equal IoU)."""
    n_det, n_gt = len(detections), len(gt)
    tp = np.zeros(n_det, dtype=bool)
    matched = np.zeros(n_gt, dtype=bool)
    order = sorted(range(n_det), key=lambda i: (-detections[i].score, i))
    for i in order:
        det = detections[i]
        best_g, best_v = -1, -1.0
        for g, ann in enumerate(gt):
            if matched[g] or ann.class_id != det.class_id:
                continue
            v = compute_iou(np.asarray(det.box), np.asarray(ann.box))
            if v >= iou_match and v > best_v:
                best_g, best_v = g, v
        if best_g >= 0:
            matched[best_g] = True
            tp[i] = True
    return MatchResult(true_positive=tp, gt_matched=matched)


def _pool(per_image_detections, per_image_gt, iou_match: float):
    """Matched detections pooled across the set, per class.

    Returns {class_id: (scores desc, tp flags)} plus {class_id: n_gt}.
    Pooled order: score desc, then image id asc, then detection index asc.
    """
    if len(per_image_detections) != len(per_image_gt):
        raise ValueError("per-image detection and gt lists differ in length")
    rows = {k: [] for k in range(1, NUM_THREAT_CLASSES + 1)}
    n_gt = {k: 0 for k in range(1, NUM_THREAT_CLASSES + 1)}
    for image_id, (dets, gt) in enumerate(zip(per_image_detections, per_image_gt)):
        result = match_detections(dets, gt, iou_match)
        for idx, det in enumerate(dets):
            rows[det.class_id].append(
                (-det.score, image_id, idx, bool(result.true_positive[idx])))
        for ann in gt:
            n_gt[ann.class_id] += 1
    pooled = {}
    for k, entries in rows.items():
        entries.sort()
        scores = np.array([-e[0] for e in entries])
        flags = np.array([e[3] for e in entries], dtype=bool)
        pooled[k] = (scores, flags)
    return pooled, n_gt


def average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from true-positive flags in ranked order."""
    if n_gt <= 0:
        raise ValueError("average_precision: class has no ground truth")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    deltas = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(deltas * envelope))


def pr_curve(tp_flags: np.ndarray, n_gt: int, class_id: int) -> PRCurve:
    if n_gt <= 0:
        raise ValueError("pr_curve: class has no ground truth")
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    return PRCurve(class_id=class_id, recall=tp / n_gt, precision=tp / (tp + fp))


def evaluate_detections(per_image_detections, per_image_gt,
                        iou_match: float = DEFAULT_MATCH_IOU):
    """AP per class + mAP over classes that have gt, and the PR curves."""
    pooled, n_gt = _pool(per_image_detections, per_image_gt, iou_match)
    per_class, curves, excluded = {}, {}, []
    for k in range(1, NUM_THREAT_CLASSES + 1):
        if n_gt[k] == 0:
            excluded.append(k)
            continue
        _, flags = pooled[k]
        per_class[k] = average_precision(flags, n_gt[k])
        curves[k] = pr_curve(flags, n_gt[k], k)
    if not per_class:
        raise ValueError("evaluate_detections: no class has any ground truth")
    mean = float(np.mean(list(per_class.values())))
    return APResult(per_class=per_class, excluded=tuple(excluded), map=mean), curves


def false_alarm_rate(per_image_detections, score_threshold: float) -> float:
    """Mean count of at-or-above-threshold detections per image on a set with
    no ground truth (every such detection is a false alarm)."""
    if not per_image_detections:
        raise ValueError("false_alarm_rate: empty image list")
    hits = sum(sum(1 for d in dets if d.score >= score_threshold)
               for dets in per_image_detections)
    return hits / len(per_image_detections)


def recall_at_threshold(per_image_detections, per_image_gt, score_threshold: float,
                        iou_match: float = DEFAULT_MATCH_IOU) -> float:
    """Fraction of all gt boxes matched by detections scoring >= threshold."""
    total = sum(len(gt) for gt in per_image_gt)
    if total == 0:
        raise ValueError("recall_at_threshold: no ground truth")
    matched = 0
    for dets, gt in zip(per_image_detections, per_image_gt):
        kept = [d for d in dets if d.score >= score_threshold]
        matched += int(match_detections(kept, gt, iou_match).gt_matched.sum())
    return matched / total


def threshold_for_recall(per_image_detections, per_image_gt, target_recall: float,
                         iou_match: float = DEFAULT_MATCH_IOU) -> float | None:
    """Highest score threshold at which pooled recall (all classes) reaches
    the target; None if even keeping everything falls short.

    Greedy matching assigns each detection independently of lower-scored
    ones, so thresholding the pooled ranked list is exact.
    """
    entries = []
    total_gt = 0
    for image_id, (dets, gt) in enumerate(zip(per_image_detections, per_image_gt)):
        result = match_detections(dets, gt, iou_match)
        for idx, det in enumerate(dets):
            entries.append((-det.score, image_id, idx, bool(result.true_positive[idx])))
        total_gt += len(gt)
    if total_gt == 0:
        raise ValueError("threshold_for_recall: no ground truth")
    entries.sort()
    tp = 0
    for neg_score, _, _, flag in entries:
        tp += 1 if flag else 0
        if tp / total_gt >= target_recall:
            return -neg_score
    return None


def domain_probe_auc(cells_hc, cells_soc, seed: int = 0) -> float:
    """Linear separability of frozen per-cell features by domain.

    Each argument is a sequence of per-image cell matrices ([n_cells, dim];
    a bare [dim] vector counts as one cell). The probe balances the image
    counts, fits a logistic regression on the cells of a random half of the
    images per domain, scores each held-out image by its mean cell
    probability, and reports image-level ROC AUC. 0.5 means the background
    cells carry no linearly decodable domain signal; 1.0 means every
    held-out image is placed on the correct side.
    """
    groups_hc = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in cells_hc]
    groups_soc = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in cells_soc]
    n = min(len(groups_hc), len(groups_soc))
    if n < 4:
        raise ValueError("domain_probe_auc: need at least 4 images per domain")
    rng = np.random.default_rng(seed)
    groups_hc = [groups_hc[i] for i in rng.permutation(len(groups_hc))[:n]]
    groups_soc = [groups_soc[i] for i in rng.permutation(len(groups_soc))[:n]]
    half = n // 2
    x_train = np.concatenate(groups_hc[:half] + groups_soc[:half])
    y_train = np.concatenate([
        np.zeros(sum(len(g) for g in groups_hc[:half]), dtype=int),
        np.ones(sum(len(g) for g in groups_soc[:half]), dtype=int),
    ])
    probe = LogisticRegression(max_iter=2000)
    probe.fit(x_train, y_train)
    held_out = groups_hc[half:] + groups_soc[half:]
    scores = [float(probe.predict_proba(g)[:, 1].mean()) for g in held_out]
    labels = [0] * (n - half) + [1] * (n - half)
    return float(roc_auc_score(labels, scores))


# ---------------------------------------------------------------------------
# artifact emission
# ---------------------------------------------------------------------------


def class_name(class_id: int) -> str:
    return THREAT_CLASS_NAMES[class_id - 1]


def format_metric(value) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


def metrics_rows(experiment: str, mode: str, seed: int, ap: APResult,
                 far: float | None, probe_auc: float | None) -> list[dict]:
    """One CSV row per class; run-level scalars repeat on each row."""
    rows = []
    for k in sorted(ap.per_class):
        rows.append({
            "experiment": experiment,
            "mode": mode,
            "class": class_name(k),
            "ap": format_metric(ap.per_class[k]),
            "map": format_metric(ap.map),
            "far_at_threshold": format_metric(far),
            "probe_auc": format_metric(probe_auc),
            "seed": str(seed),
        })
    return rows


def render_metrics_csv(rows: list[dict]) -> str:
    """Deterministic CSV text: fixed columns, rows sorted by key fields."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in sorted(rows, key=lambda r: (r["experiment"], r["mode"],
                                           r["class"], int(r["seed"]))):
        writer.writerow(row)
    return buf.getvalue()


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_metrics_csv(rows))


def write_pr_curve_csv(path, curves: dict[int, PRCurve]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "recall", "precision"])
        for k in sorted(curves):
            curve = curves[k]
            for r, p in zip(curve.recall, curve.precision):
                writer.writerow([class_name(k), f"{r:.6f}", f"{p:.6f}"])
