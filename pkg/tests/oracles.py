"""Brute-force reference implementations used only by tests.

Everything here is written as plain Python loops so it shares no code with
the package. Slow is fine at oracle scale (a handful of boxes per trial).
"""


def iou_oracle(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms_oracle(boxes, scores, iou_threshold):
    """Greedy: highest score first, original index breaks ties; a candidate
    survives only if it stays strictly below the threshold against every
    already-kept box."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_oracle(boxes[i], boxes[j]) < iou_threshold for j in keep):
            keep.append(i)
    return keep


def match_oracle(dets, gts, iou_match=0.5):
    """dets: (score, class_id, box) tuples; gts: (class_id, box) tuples.

    Returns matched gt index or None per detection, in original det order.
    Detections are visited by descending score (index breaks ties); each
    takes the highest-IoU unmatched gt of its class at IoU >= iou_match,
    lowest gt index on equal IoU.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    taken = set()
    assign = [None] * len(dets)
    for i in order:
        score, cls, box = dets[i]
        best_g, best_v = None, -1.0
        for g, (gcls, gbox) in enumerate(gts):
            if g in taken or gcls != cls:
                continue
            v = iou_oracle(box, gbox)
            if v >= iou_match and v > best_v:
                best_g, best_v = g, v
        if best_g is not None:
            taken.add(best_g)
            assign[i] = best_g
    return assign


def ap_oracle(tp_flags, n_gt):
    """All-point interpolated AP from true-positive flags in ranked order."""
    if n_gt == 0:
        return 0.0
    tp = fp = 0
    points = []
    for flag in tp_flags:
        tp += 1 if flag else 0
        fp += 0 if flag else 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for k, (recall, _) in enumerate(points):
        envelope = max(precision for _, precision in points[k:])
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    return ap
