"""Axis-aligned box geometry shared by the detector, adaptation, and eval stages.

Boxes are float arrays of shape [N, 4] in (x_min, y_min, x_max, y_max)
image-pixel coordinates. Also holds the threat-class vocabulary and the
Annotation record so the generator and detector agree on labels without
importing each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND_CLASS = 0
THREAT_CLASS_NAMES = ("knife", "blunt", "gun", "lag")  # class ids 1..4
NUM_THREAT_CLASSES = len(THREAT_CLASS_NAMES)

# exp() cap for decoded size ratios; keeps untrained regressors finite
LOG_RATIO_CAP = float(np.log(1000.0 / 16.0))


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        if not 1 <= self.class_id <= NUM_THREAT_CLASSES:
            raise ValueError(f"Annotation: class_id {self.class_id} outside 1..{NUM_THREAT_CLASSES}")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"Annotation: degenerate box {self.box}")


def annotation_boxes(annotations) -> np.ndarray:
    """Stack annotation boxes into an [N, 4] array (possibly N=0)."""
    if not annotations:
        return np.zeros((0, 4))
    return np.array([a.box for a in annotations], dtype=np.float64)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    w = np.clip(boxes[..., 2] - boxes[..., 0], 0.0, None)
    h = np.clip(boxes[..., 3] - boxes[..., 1], 0.0, None)
    return w * h


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape [N, M]. Degenerate boxes contribute zero area."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def compute_iou(a, b) -> float:
    """IoU of a single pair of boxes."""
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(boxes)
    out[:, 0] = np.clip(boxes[:, 0], 0.0, width)
    out[:, 1] = np.clip(boxes[:, 1], 0.0, height)
    out[:, 2] = np.clip(boxes[:, 2], 0.0, width)
    out[:, 3] = np.clip(boxes[:, 3], 0.0, height)
    return out


def _centers(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets (tx, ty, tw, th): center offsets scaled by anchor
    size, log size ratios."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = _centers(boxes)
    acx, acy, aw, ah = _centers(anchors)
    return np.stack([(cx - acx) / aw, (cy - acy) / ah,
                     np.log(w / aw), np.log(h / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centers(anchors)
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = np.exp(np.minimum(deltas[:, 2], LOG_RATIO_CAP)) * aw
    h = np.exp(np.minimum(deltas[:, 3], LOG_RATIO_CAP)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score, lower original index on ties;
    every retained pair has IoU strictly below the threshold. Returns kept
    indices in visit order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"nms: {boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i], boxes[rest])[0]
        order = rest[ious < iou_threshold]
    return np.array(keep, dtype=np.intp)
