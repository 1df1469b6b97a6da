"""Miniature two-stage detector: 3-block conv backbone (stride 8), a region
proposal network over 9 anchors per cell, and an ROI head with class-agnostic
box regression. Sized for 64x64 single-channel images on a CPU.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import (
    NUM_THREAT_CLASSES,
    annotation_boxes,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    iou_matrix,
    nms,
)

RPN_POSITIVE_IOU = 0.7
RPN_NEGATIVE_IOU = 0.3
ROI_POSITIVE_IOU = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (8, 16, 32)
    stride: int = 8
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 28.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_top_n: int = 128
    post_nms_top_n: int = 24
    rpn_nms_threshold: float = 0.7
    rpn_batch: int = 32
    roi_batch: int = 16
    roi_positive_fraction: float = 0.25
    roi_output_size: int = 4
    hidden_dim: int = 64
    detect_nms_threshold: float = 0.3
    score_threshold: float = 0.5
    # which detection-loss stages unlabeled SOC images feed as all-background
    soc_loss_stages: str = "both"  # "both" | "rpn" | "none"


def validate_detector_config(config: DetectorConfig) -> None:
    if config.stride != 2 ** len(config.backbone_channels):
        raise ValueError(f"stride {config.stride} != 2^{len(config.backbone_channels)} "
                         "(one 2x pool per backbone block)")
    if config.image_size % config.stride != 0:
        raise ValueError(f"image_size {config.image_size} not divisible by stride {config.stride}")
    for name in ("pre_nms_top_n", "post_nms_top_n", "rpn_batch", "roi_batch",
                 "roi_output_size", "hidden_dim"):
        if getattr(config, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if not 0.0 < config.roi_positive_fraction <= 1.0:
        raise ValueError("roi_positive_fraction must lie in (0, 1]")
    if config.soc_loss_stages not in ("both", "rpn", "none"):
        raise ValueError(f"soc_loss_stages {config.soc_loss_stages!r} unknown")


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    boxes: np.ndarray  # [H_f * W_f * A, 4], cell-major then (scale, ratio)


@dataclass
class ProposalSet:
    boxes: np.ndarray   # [N, 4], clipped to image bounds
    scores: np.ndarray  # [N] objectness


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass
class DetectionLossBundle:
    rpn_objectness: T.Tensor
    rpn_box: T.Tensor
    roi_class: T.Tensor
    roi_box: T.Tensor

    def total(self) -> T.Tensor:
        return T.add(T.add(self.rpn_objectness, self.rpn_box),
                     T.add(self.roi_class, self.roi_box))


def generate_anchors(config: DetectorConfig, feature_shape) -> AnchorGrid:
    hf, wf = feature_shape
    s = config.stride
    boxes = []
    for i in range(hf):
        cy = (i + 0.5) * s
        for j in range(wf):
            cx = (j + 0.5) * s
            for scale in config.anchor_scales:
                for ratio in config.anchor_ratios:
                    # ratio = height / width at constant area scale^2
                    w = scale / np.sqrt(ratio)
                    h = scale * np.sqrt(ratio)
                    boxes.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return AnchorGrid(stride=s, scales=tuple(config.anchor_scales),
                      ratios=tuple(config.anchor_ratios),
                      boxes=np.array(boxes, dtype=np.float64))


def match_anchors_to_gt(anchors: AnchorGrid, gt):
    """Per-anchor label (1 positive, 0 negative, -1 ignore) and regression
    targets toward the matched gt box."""
    boxes = anchors.boxes
    n = boxes.shape[0]
    targets = np.zeros((n, 4))
    if not gt:
        return np.zeros(n, dtype=np.int8), targets
    gt_boxes = annotation_boxes(gt)
    ious = iou_matrix(boxes, gt_boxes)
    max_iou = ious.max(axis=1)
    argmax_gt = ious.argmax(axis=1)

    labels = np.full(n, -1, dtype=np.int8)
    labels[max_iou < RPN_NEGATIVE_IOU] = 0
    labels[max_iou >= RPN_POSITIVE_IOU] = 1
    for j in range(gt_boxes.shape[0]):
        col_max = ious[:, j].max()
        if col_max > 0:
            labels[ious[:, j] == col_max] = 1

    pos = labels == 1
    if pos.any():
        targets[pos] = encode_boxes(gt_boxes[argmax_gt[pos]], boxes[pos])
    return labels, targets


class MiniDetector:
    """Parameter container plus the three forward stages. One instance is a
    single-threaded unit of work."""

    def __init__(self, config: DetectorConfig, seed: int):
        validate_detector_config(config)
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, T.Parameter] = {}
        a = len(config.anchor_scales) * len(config.anchor_ratios)
        c_in = 1
        for b, c_out in enumerate(config.backbone_channels, start=1):
            self._add(f"backbone.b{b}.weight", (c_out, c_in, 3, 3), fan_in=c_in * 9)
            self._add(f"backbone.b{b}.bias", (c_out,), fan_in=c_in * 9)
            c_in = c_out
        self._add("rpn.conv.weight", (c_in, c_in, 3, 3), fan_in=c_in * 9)
        self._add("rpn.conv.bias", (c_in,), fan_in=c_in * 9)
        self._add("rpn.obj.weight", (a, c_in, 1, 1), fan_in=c_in)
        self._add("rpn.obj.bias", (a,), fan_in=c_in)
        self._add("rpn.box.weight", (4 * a, c_in, 1, 1), fan_in=c_in)
        self._add("rpn.box.bias", (4 * a,), fan_in=c_in)
        r = config.roi_output_size
        d = c_in * r * r
        self._add("roi.fc.weight", (d, config.hidden_dim), fan_in=d)
        self._add("roi.fc.bias", (config.hidden_dim,), fan_in=d)
        self._add("roi.cls.weight", (config.hidden_dim, NUM_THREAT_CLASSES + 1),
                  fan_in=config.hidden_dim)
        self._add("roi.cls.bias", (NUM_THREAT_CLASSES + 1,), fan_in=config.hidden_dim)
        self._add("roi.box.weight", (config.hidden_dim, 4), fan_in=config.hidden_dim)
        self._add("roi.box.bias", (4,), fan_in=config.hidden_dim)

        hf = config.image_size // config.stride
        self.anchors = generate_anchors(config, (hf, hf))

    def _add(self, name, shape, fan_in):
        t = T.init_uniform(shape, fan_in=fan_in, name=name, seed=self.seed)
        self.params[name] = T.Parameter(name, t)

    def _p(self, name) -> T.Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[T.Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self.params.items()}

    def load_state_dict(self, named: dict[str, np.ndarray]) -> None:
        if set(named) != set(self.params):
            missing = set(self.params) - set(named)
            extra = set(named) - set(self.params)
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in named.items():
            t = self.params[name].tensor
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data[...] = arr

    # ---- forward stages -------------------------------------------------

    def backbone(self, image: np.ndarray) -> T.Tensor:
        """image [H, W] float in (0,1] -> feature map [1, C, H/8, W/8]."""
        x = T.Tensor(np.asarray(image, dtype=np.float32)[None, None])
        for b in range(1, len(self.config.backbone_channels) + 1):
            x = T.conv2d(x, self._p(f"backbone.b{b}.weight"), self._p(f"backbone.b{b}.bias"),
                         stride=1, padding=1)
            x = T.max_pool2(T.relu(x))
        return x

    def rpn_heads(self, fm: T.Tensor):
        """Objectness probabilities [N_anchor] and box deltas [N_anchor, 4],
        ordered to match generate_anchors."""
        a = len(self.config.anchor_scales) * len(self.config.anchor_ratios)
        h = T.relu(T.conv2d(fm, self._p("rpn.conv.weight"), self._p("rpn.conv.bias"),
                            stride=1, padding=1))
        obj = T.conv2d(h, self._p("rpn.obj.weight"), self._p("rpn.obj.bias"))
        box = T.conv2d(h, self._p("rpn.box.weight"), self._p("rpn.box.bias"))
        _, _, hf, wf = obj.shape
        # [1, A, H, W] -> [H, W, A] -> [N]
        probs = T.reshape(T.permute(T.reshape(obj, (a, hf, wf)), (1, 2, 0)), (hf * wf * a,))
        probs = T.sigmoid(probs)
        # [1, 4A, H, W] -> [A, 4, H, W] -> [H, W, A, 4] -> [N, 4]
        deltas = T.reshape(T.permute(T.reshape(box, (a, 4, hf, wf)), (2, 3, 0, 1)),
                           (hf * wf * a, 4))
        return probs, deltas

    def roi_features(self, fm: T.Tensor, boxes: np.ndarray) -> T.Tensor:
        """Pooled per-proposal features [N, hidden_dim]."""
        r = self.config.roi_output_size
        pooled = T.roi_align(T.reshape(fm, fm.shape[1:]), boxes,
                             stride=self.config.stride, output_size=(r, r))
        flat = T.reshape(pooled, (boxes.shape[0], -1))
        return T.relu(T.linear(flat, self._p("roi.fc.weight"), self._p("roi.fc.bias")))

    def roi_heads(self, feats: T.Tensor):
        logits = T.linear(feats, self._p("roi.cls.weight"), self._p("roi.cls.bias"))
        deltas = T.linear(feats, self._p("roi.box.weight"), self._p("roi.box.bias"))
        return logits, deltas


def _sample_balanced(labels: np.ndarray, batch: int, positive_fraction: float, rng):
    """Indices of up to `batch` anchors/proposals honoring the positive cap."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(pos.size, int(round(batch * positive_fraction)))
    n_neg = min(neg.size, batch - n_pos)
    take_pos = rng.permutation(pos)[:n_pos] if pos.size else pos
    take_neg = rng.permutation(neg)[:n_neg] if neg.size else neg
    return np.sort(np.concatenate([take_pos, take_neg]))


def rpn_forward(model: MiniDetector, fm: T.Tensor, gt=None, rng=None):
    """Proposals (always) plus RPN losses when gt is a list (possibly empty).

    Proposal boxes are detached from the graph: gradients reach the RPN only
    through its losses, as in standard two-stage training.
    """
    config = model.config
    probs, deltas = model.rpn_heads(fm)
    size = float(config.image_size)

    scores = probs.data.astype(np.float64)
    decoded = clip_boxes(decode_boxes(deltas.data, model.anchors.boxes), size, size)
    wide = (decoded[:, 2] - decoded[:, 0] > 1e-3) & (decoded[:, 3] - decoded[:, 1] > 1e-3)
    cand = np.flatnonzero(wide)
    order = cand[np.argsort(-scores[cand], kind="stable")][:config.pre_nms_top_n]
    keep = order[nms(decoded[order], scores[order], config.rpn_nms_threshold)]
    keep = keep[:config.post_nms_top_n]
    if keep.size == 0:
        boxes = np.array([[0.0, 0.0, size, size]])
        obj = np.array([1.0])
    else:
        boxes = decoded[keep]
        obj = scores[keep]

    losses = None
    if gt is not None:
        if rng is None:
            raise ValueError("rpn_forward: training mode needs an rng")
        labels, targets = match_anchors_to_gt(model.anchors, gt)
        take = _sample_balanced(labels, config.rpn_batch, 0.5, rng)
        obj_loss = T.binary_cross_entropy(T.gather_rows(probs, take),
                                          labels[take].astype(np.float32))
        pos_take = take[labels[take] == 1]
        if pos_take.size:
            box_loss = T.smooth_l1(T.gather_rows(deltas, pos_take), targets[pos_take])
        else:
            box_loss = T.constant(0.0)
        losses = (obj_loss, box_loss)
        if gt:
            # bootstrap the second stage: gt boxes join the proposal pool
            boxes = np.concatenate([boxes, annotation_boxes(gt)])
            obj = np.concatenate([obj, np.ones(len(gt))])
    return ProposalSet(boxes=boxes, scores=obj), losses


def label_proposals(proposals: ProposalSet, gt):
    """Per-proposal class target (0 = background) and box targets."""
    n = proposals.boxes.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, 4))
    if gt:
        gt_boxes = annotation_boxes(gt)
        ious = iou_matrix(proposals.boxes, gt_boxes)
        max_iou = ious.max(axis=1)
        argmax_gt = ious.argmax(axis=1)
        fg = max_iou >= ROI_POSITIVE_IOU
        labels[fg] = np.array([gt[g].class_id for g in argmax_gt], dtype=np.int64)[fg]
        if fg.any():
            targets[fg] = encode_boxes(gt_boxes[argmax_gt[fg]], proposals.boxes[fg])
    return labels, targets


def roi_loss_forward(model: MiniDetector, fm: T.Tensor, proposals: ProposalSet, gt, rng):
    """Sampled ROI classification/regression losses plus the pooled features
    actually used (for the adaptation stage)."""
    config = model.config
    labels, targets = label_proposals(proposals, gt)
    binary = np.where(labels > 0, 1, 0)
    take = _sample_balanced(binary, config.roi_batch, config.roi_positive_fraction, rng)
    if take.size == 0:
        take = np.arange(min(config.roi_batch, labels.size))
    feats = model.roi_features(fm, proposals.boxes[take])
    logits, deltas = model.roi_heads(feats)
    cls_loss = T.softmax_cross_entropy(logits, labels[take])
    pos_rows = np.flatnonzero(labels[take] > 0)
    if pos_rows.size:
        box_loss = T.smooth_l1(T.gather_rows(deltas, pos_rows), targets[take][pos_rows])
    else:
        box_loss = T.constant(0.0)
    return cls_loss, box_loss


def detection_losses(model: MiniDetector, fm: T.Tensor, gt, rng,
                     stages: str = "both"):
    """Full two-stage loss bundle for one image. `stages` limits which stages
    contribute (used to route unlabeled SOC images)."""
    if stages not in ("both", "rpn", "none"):
        raise ValueError(f"detection_losses: unknown stages {stages!r}")
    zero = T.constant(0.0)
    if stages == "none":
        return DetectionLossBundle(zero, zero, zero, zero), None
    proposals, rpn_losses = rpn_forward(model, fm, gt=gt, rng=rng)
    rpn_obj, rpn_box = rpn_losses
    if stages == "rpn":
        return DetectionLossBundle(rpn_obj, rpn_box, zero, zero), proposals
    roi_cls, roi_box = roi_loss_forward(model, fm, proposals, gt, rng)
    return DetectionLossBundle(rpn_obj, rpn_box, roi_cls, roi_box), proposals


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def roi_detections(model: MiniDetector, fm: T.Tensor, proposals: ProposalSet,
                   score_threshold=None) -> list[Detection]:
    """Inference: per-class score threshold + NMS, sorted by descending score
    (ties: lower class id, then lower proposal index)."""
    config = model.config
    thr = config.score_threshold if score_threshold is None else score_threshold
    feats = model.roi_features(fm, proposals.boxes)
    logits, deltas = model.roi_heads(feats)
    probs = _softmax(logits.data.astype(np.float64))
    size = float(config.image_size)
    boxes = clip_boxes(decode_boxes(deltas.data, proposals.boxes), size, size)
    out: list[Detection] = []
    for k in range(1, NUM_THREAT_CLASSES + 1):
        sel = np.flatnonzero(probs[:, k] > thr)
        sel = sel[(boxes[sel, 2] - boxes[sel, 0] > 1e-3) & (boxes[sel, 3] - boxes[sel, 1] > 1e-3)]
        if sel.size == 0:
            continue
        keep = nms(boxes[sel], probs[sel, k], config.detect_nms_threshold)
        for i in sel[keep]:
            out.append(Detection(class_id=k, score=float(probs[i, k]),
                                 box=tuple(float(v) for v in boxes[i])))
    out.sort(key=lambda d: (-d.score, d.class_id))
    return out


def detect(model: MiniDetector, image: np.ndarray, score_threshold=None) -> list[Detection]:
    fm = model.backbone(image)
    proposals, _ = rpn_forward(model, fm)
    return roi_detections(model, fm, proposals, score_threshold=score_threshold)
