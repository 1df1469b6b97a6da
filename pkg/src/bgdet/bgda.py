"""Background-restricted adversarial domain adaptation.

Two domain discriminators sit behind a gradient reversal layer: a per-cell
image-level head (1x1 convolutions only, so a masked cell can never leak
gradient) and a per-proposal instance-level head on the shared ROI features.
On HC images only verified background participates: proposals whose max
gt-IoU is at or below a small threshold, and feature cells whose stride
rectangle misses every gt box interior. SOC images participate in full. A
consistency term ties the two discriminators together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import annotation_boxes, iou_matrix
from .detector import MiniDetector, ProposalSet

HC = "HC"
SOC = "SOC"

DEFAULT_LAMBDA = 0.1
DEFAULT_GRL_WEIGHT = 0.1
DEFAULT_IOU_BG_THRESHOLD = 0.01

RUN_MODES = ("baseline", "naive_negatives", "instance", "full")
# modes whose composite loss carries adaptation terms
_LOSS_MODES = ("baseline", "instance", "full")


@dataclass
class DAOutputs:
    image_domain_prob_map: T.Tensor | None   # [H_f, W_f], P(SOC) per cell
    instance_domain_probs: T.Tensor | None   # [N], P(SOC) per proposal
    da_image_loss: T.Tensor
    da_instance_loss: T.Tensor
    consistency_loss: T.Tensor
    # detached copy of the roi features the instance head saw, for
    # discriminator-only refinement steps that must not touch the detector
    instance_feature_data: np.ndarray | None = None


def select_background_proposals(proposals: ProposalSet, gt,
                                iou_bg_threshold: float = DEFAULT_IOU_BG_THRESHOLD):
    """Indices of proposals whose max IoU over gt is <= the threshold.
    Empty gt keeps everything."""
    n = proposals.boxes.shape[0]
    if not gt:
        return np.arange(n)
    ious = iou_matrix(proposals.boxes, annotation_boxes(gt))
    return np.flatnonzero(ious.max(axis=1) <= iou_bg_threshold)


def assert_background_selection(proposals: ProposalSet, gt, indices,
                                iou_bg_threshold: float = DEFAULT_IOU_BG_THRESHOLD) -> None:
    """Per-batch guarantee: every selected HC proposal is background."""
    if len(indices) == 0 or not gt:
        return
    ious = iou_matrix(proposals.boxes[indices], annotation_boxes(gt))
    worst = float(ious.max())
    if worst > iou_bg_threshold:
        raise AssertionError(
            f"background proposal with gt IoU {worst:.6f} > {iou_bg_threshold}")


def anti_crop_mask(gt, feature_shape, stride: int) -> np.ndarray:
    """Binary [H_f, W_f] grid: cell (i, j) is 0 iff the pixel rectangle
    [j*s,(j+1)*s) x [i*s,(i+1)*s) intersects the interior of any gt box."""
    hf, wf = feature_shape
    mask = np.ones((hf, wf), dtype=np.uint8)
    for ann in gt:
        x1, y1, x2, y2 = ann.box
        j_lo = max(0, int(np.floor(x1 / stride)))
        j_hi = min(wf, int(np.ceil(x2 / stride)))
        i_lo = max(0, int(np.floor(y1 / stride)))
        i_hi = min(hf, int(np.ceil(y2 / stride)))
        # cells whose half-open rect meets the open box interior
        for i in range(i_lo, i_hi):
            for j in range(j_lo, j_hi):
                if j * stride < x2 and (j + 1) * stride > x1 \
                        and i * stride < y2 and (i + 1) * stride > y1:
                    mask[i, j] = 0
    return mask


class BackgroundAdapter:
    """Parameter container for the two domain discriminators.

    Both heads are single (linear) layers ending in sigmoid: per-cell and
    per-proposal logistic regressors. Keeping the adversary in the same
    hypothesis class as a linear domain probe makes the minimax objective
    exactly "leave no linearly decodable domain signal", and the convex
    per-step problem gives the discriminator useful gradients from the
    first step instead of an initialization plateau."""

    def __init__(self, feature_channels: int, roi_feature_dim: int, seed: int = 0):
        self.params: dict[str, T.Parameter] = {}
        spec = [
            ("da.img.c1.weight", (1, feature_channels, 1, 1), feature_channels),
            ("da.img.c1.bias", (1,), feature_channels),
            ("da.inst.f1.weight", (roi_feature_dim, 1), roi_feature_dim),
            ("da.inst.f1.bias", (1,), roi_feature_dim),
        ]
        for name, shape, fan_in in spec:
            t = T.init_uniform(shape, fan_in=fan_in, name=name, seed=seed)
            self.params[name] = T.Parameter(name, t)

    def _p(self, name) -> T.Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[T.Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self.params.items()}

    def load_state_dict(self, named: dict[str, np.ndarray]) -> None:
        for name, arr in named.items():
            self.params[name].tensor.data[...] = arr

    def image_prob_map(self, fm: T.Tensor, grl_weight: float) -> T.Tensor:
        """Per-cell P(SOC), shape [H_f, W_f]. 1x1 convolution only: the
        probability at a cell depends on that cell's features alone."""
        h = T.grad_reverse(fm, grl_weight)
        h = T.conv2d(h, self._p("da.img.c1.weight"), self._p("da.img.c1.bias"))
        return T.sigmoid(T.reshape(h, h.shape[2:]))

    def image_cell_probs(self, cells: T.Tensor, grl_weight: float) -> T.Tensor:
        """The same per-cell logistic as image_prob_map, applied to an [N, C]
        matrix of individual cell features; P(SOC) per row."""
        w = self._p("da.img.c1.weight")
        h = T.grad_reverse(cells, grl_weight)
        h = T.linear(h, T.reshape(w, (w.shape[1], 1)), self._p("da.img.c1.bias"))
        return T.sigmoid(T.reshape(h, (h.shape[0],)))

    def instance_probs(self, roi_feats: T.Tensor, grl_weight: float) -> T.Tensor:
        """Per-proposal P(SOC), shape [N]."""
        h = T.grad_reverse(roi_feats, grl_weight)
        h = T.linear(h, self._p("da.inst.f1.weight"), self._p("da.inst.f1.bias"))
        return T.sigmoid(T.reshape(h, (h.shape[0],)))


def da_image_loss(prob_map: T.Tensor, mask: np.ndarray, domain: str) -> T.Tensor:
    """BCE over mask=1 cells (label 1 for SOC, 0 for HC); all-zero mask
    contributes zero. Masked-out cells never enter the graph."""
    label = _domain_label(domain)
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        return T.constant(0.0)
    flat = T.reshape(prob_map, (prob_map.data.size,))
    return T.binary_cross_entropy(T.gather_rows(flat, idx), label)


def da_instance_loss(instance_probs: T.Tensor | None, domain: str) -> T.Tensor:
    """Mean BCE over proposals; empty selection contributes zero."""
    if instance_probs is None or instance_probs.data.size == 0:
        return T.constant(0.0)
    return T.binary_cross_entropy(instance_probs, _domain_label(domain))


def consistency_loss(prob_map: T.Tensor | None, mask: np.ndarray | None,
                     instance_probs: T.Tensor | None) -> T.Tensor:
    """Squared l2 between the image-level mean (over unmasked cells) and each
    instance probability, averaged over proposals. Undefined parts -> 0."""
    if prob_map is None or instance_probs is None or instance_probs.data.size == 0:
        return T.constant(0.0)
    idx = np.flatnonzero(mask.reshape(-1)) if mask is not None else None
    if idx is not None and idx.size == 0:
        return T.constant(0.0)
    flat = T.reshape(prob_map, (prob_map.data.size,))
    if idx is not None:
        flat = T.gather_rows(flat, idx)
    image_mean = T.mean(flat)
    diff = T.add(instance_probs, T.mul(image_mean, T.constant(-1.0)))
    return T.mean(T.mul(diff, diff))


def _domain_label(domain: str) -> float:
    if domain == SOC:
        return 1.0
    if domain == HC:
        return 0.0
    raise ValueError(f"unknown domain {domain!r}")


def total_loss(det, da: DAOutputs | None, lambda_da: float, mode: str) -> T.Tensor:
    """Composite training loss for one image.

    baseline -> detection only; instance -> + lambda * instance term;
    full -> + lambda * (instance + image + consistency).
    """
    if mode not in _LOSS_MODES:
        raise ValueError(f"total_loss: mode {mode!r} not in {_LOSS_MODES}")
    loss = det.total()
    if mode == "baseline" or da is None:
        return loss
    weight = T.constant(float(lambda_da))
    loss = T.add(loss, T.mul(da.da_instance_loss, weight))
    if mode == "full":
        loss = T.add(loss, T.mul(da.da_image_loss, weight))
        loss = T.add(loss, T.mul(da.consistency_loss, weight))
    return loss


def adaptation_outputs(model: MiniDetector, adapter: BackgroundAdapter,
                       fm: T.Tensor, proposals: ProposalSet, gt, domain: str,
                       mode: str, grl_weight: float = DEFAULT_GRL_WEIGHT,
                       iou_bg_threshold: float = DEFAULT_IOU_BG_THRESHOLD,
                       retain_prob_grad: bool = False) -> tuple[DAOutputs, np.ndarray]:
    """Run the discriminators for one image and bundle the DA losses.

    HC images contribute only verified background (selected proposals, anti-
    cropped cells); SOC images contribute everything. The background-proposal
    guarantee is asserted on every call.
    """
    if mode not in ("instance", "full"):
        raise ValueError(f"adaptation_outputs: mode {mode!r} has no DA terms")
    zero = T.constant(0.0)

    if domain == HC:
        keep = select_background_proposals(proposals, gt, iou_bg_threshold)
        assert_background_selection(proposals, gt, keep, iou_bg_threshold)
        mask = anti_crop_mask(gt, fm.shape[2:], model.config.stride)
    else:
        keep = np.arange(proposals.boxes.shape[0])
        mask = np.ones(fm.shape[2:], dtype=np.uint8)

    inst_probs = None
    inst_feature_data = None
    if keep.size:
        feats = model.roi_features(fm, proposals.boxes[keep])
        inst_probs = adapter.instance_probs(feats, grl_weight)
        inst_feature_data = feats.data.copy()
    inst_loss = da_instance_loss(inst_probs, domain)

    prob_map = None
    img_loss = zero
    cons_loss = zero
    if mode == "full":
        prob_map = adapter.image_prob_map(fm, grl_weight)
        if retain_prob_grad:
            prob_map.retain_grad = True
        img_loss = da_image_loss(prob_map, mask, domain)
        cons_loss = consistency_loss(prob_map, mask, inst_probs)

    return DAOutputs(image_domain_prob_map=prob_map,
                     instance_domain_probs=inst_probs,
                     da_image_loss=img_loss,
                     da_instance_loss=inst_loss,
                     consistency_loss=cons_loss,
                     instance_feature_data=inst_feature_data), mask


def assert_masked_cells_dead(prob_map: T.Tensor | None, mask: np.ndarray) -> None:
    """Per-batch guarantee: after backward, masked-out cells of the image
    discriminator received exactly zero gradient (1x1 heads then imply zero
    gradient on the masked feature cells through this branch)."""
    if prob_map is None or prob_map.grad is None:
        return
    dead = prob_map.grad[mask == 0]
    if dead.size and np.any(dead != 0.0):
        raise AssertionError("masked feature cell received image-DA gradient")
