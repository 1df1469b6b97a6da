"""Two-stage detector: anchors, matching, forward stages, loss plumbing."""
import numpy as np
import pytest

from bgdet import detector as D
from bgdet import tensor as T
from bgdet.boxes import Annotation, compute_iou, iou_matrix

SQ2 = float(np.sqrt(2.0))


def ann(box, class_id=1):
    return Annotation(class_id=class_id, box=tuple(float(v) for v in box))


def make_model(seed=0, **overrides):
    config = D.DetectorConfig(**overrides)
    return D.MiniDetector(config, seed=seed)


def random_image(seed=0, size=64):
    rng = np.random.default_rng(seed)
    return np.clip(rng.uniform(0.05, 1.0, (size, size)), 1e-3, 1.0)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_config_stride_must_match_block_count():
    with pytest.raises(ValueError, match="stride"):
        D.validate_detector_config(D.DetectorConfig(stride=16))


def test_config_image_size_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        D.validate_detector_config(D.DetectorConfig(image_size=60))


def test_config_fraction_and_stage_checks():
    with pytest.raises(ValueError, match="roi_positive_fraction"):
        D.validate_detector_config(D.DetectorConfig(roi_positive_fraction=0.0))
    with pytest.raises(ValueError, match="soc_loss_stages"):
        D.validate_detector_config(D.DetectorConfig(soc_loss_stages="roi"))


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


def test_anchor_grid_frozen_values():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    assert grid.boxes.shape == (576, 4)
    # cell (0,0), scale 8: ratio 1 is the plain 8x8 square at the corner cell
    np.testing.assert_allclose(grid.boxes[1], [0.0, 0.0, 8.0, 8.0], atol=1e-12)
    # ratio 0.5 halves the height and widens: w = 8*sqrt(2), h = 8/sqrt(2)
    np.testing.assert_allclose(
        grid.boxes[0], [4 - 4 * SQ2, 4 - 4 / SQ2, 4 + 4 * SQ2, 4 + 4 / SQ2], atol=1e-12)
    # next cell over shifts the center by one stride
    np.testing.assert_allclose(grid.boxes[10], [8.0, 0.0, 16.0, 8.0], atol=1e-12)


def test_anchor_area_equals_scale_squared():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    areas = (grid.boxes[:, 2] - grid.boxes[:, 0]) * (grid.boxes[:, 3] - grid.boxes[:, 1])
    scales = np.tile(np.repeat([8.0, 16.0, 28.0], 3), 64)
    np.testing.assert_allclose(areas, scales ** 2, rtol=1e-12)


def test_anchor_centers_on_cell_centers():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    cx = (grid.boxes[:, 0] + grid.boxes[:, 2]) / 2
    cell = np.arange(576) // 9
    np.testing.assert_allclose(cx, (cell % 8 + 0.5) * 8, atol=1e-12)


# ---------------------------------------------------------------------------
# anchor matching
# ---------------------------------------------------------------------------


def test_match_perfect_anchor_positive_with_zero_targets():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    labels, targets = D.match_anchors_to_gt(grid, [ann((8, 0, 16, 8))])
    assert labels[10] == 1
    np.testing.assert_allclose(targets[10], 0.0, atol=1e-12)


def test_match_empty_gt_everything_negative():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    labels, targets = D.match_anchors_to_gt(grid, [])
    assert labels.dtype == np.int8
    assert np.all(labels == 0)
    assert np.all(targets == 0.0)


def test_match_low_iou_negative_midrange_ignored():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    gt = [ann((8, 0, 16, 8))]
    labels, _ = D.match_anchors_to_gt(grid, gt)
    ious = iou_matrix(grid.boxes, np.array([[8.0, 0.0, 16.0, 8.0]])).ravel()
    col_max = ious.max()
    for k in range(576):
        if ious[k] == col_max or ious[k] >= 0.7:
            assert labels[k] == 1
        elif ious[k] < 0.3:
            assert labels[k] == 0
        else:
            assert labels[k] == -1


def test_match_small_gt_forces_best_anchor_positive():
    grid = D.generate_anchors(D.DetectorConfig(), (8, 8))
    # a 4x4 object overlaps no anchor at 0.7, yet must own its argmax anchor
    labels, _ = D.match_anchors_to_gt(grid, [ann((30, 30, 34, 34))])
    assert (labels == 1).sum() >= 1
    ious = iou_matrix(grid.boxes, np.array([[30.0, 30.0, 34.0, 34.0]])).ravel()
    assert np.all(ious[labels == 1] == ious.max())


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------


def test_parameter_count_frozen():
    model = make_model()
    assert sum(p.tensor.data.size for p in model.parameters()) == 50038


def test_init_deterministic_per_seed():
    a, b, c = make_model(seed=7), make_model(seed=7), make_model(seed=8)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].tensor.data,
                                      b.params[name].tensor.data)
    assert any(np.any(a.params[n].tensor.data != c.params[n].tensor.data)
               for n in a.params)


def test_state_dict_roundtrip_and_mismatch():
    a, b = make_model(seed=1), make_model(seed=2)
    b.load_state_dict({k: v.copy() for k, v in a.state_dict().items()})
    for name, arr in a.state_dict().items():
        np.testing.assert_array_equal(arr, b.state_dict()[name])
    state = {k: v.copy() for k, v in a.state_dict().items()}
    state.pop("roi.fc.bias")
    with pytest.raises(ValueError, match="missing"):
        b.load_state_dict(state)
    state = {k: v.copy() for k, v in a.state_dict().items()}
    state["roi.fc.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        b.load_state_dict(state)


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------


def test_backbone_output_shape():
    model = make_model()
    fm = model.backbone(random_image())
    assert fm.shape == (1, 32, 8, 8)
    assert np.all(np.isfinite(fm.data))


def test_rpn_head_shapes_and_ranges():
    model = make_model()
    probs, deltas = model.rpn_heads(model.backbone(random_image()))
    assert probs.shape == (576,)
    assert deltas.shape == (576, 4)
    assert np.all((probs.data > 0) & (probs.data < 1))


def test_rpn_forward_inference_contract():
    model = make_model()
    proposals, losses = D.rpn_forward(model, model.backbone(random_image(3)))
    assert losses is None
    boxes = proposals.boxes
    assert 1 <= boxes.shape[0] <= model.config.post_nms_top_n
    assert np.all(boxes[:, 0] >= 0) and np.all(boxes[:, 2] <= 64)
    assert np.all(boxes[:, 1] >= 0) and np.all(boxes[:, 3] <= 64)
    assert np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])
    # NMS postcondition: no retained pair overlaps at or above the threshold
    for i in range(boxes.shape[0]):
        for j in range(i + 1, boxes.shape[0]):
            assert compute_iou(boxes[i], boxes[j]) < model.config.rpn_nms_threshold


def test_rpn_forward_training_requires_rng():
    model = make_model()
    with pytest.raises(ValueError, match="rng"):
        D.rpn_forward(model, model.backbone(random_image()), gt=[])


def test_rpn_forward_empty_gt_all_negative_losses():
    model = make_model()
    rng = np.random.default_rng(0)
    proposals, losses = D.rpn_forward(model, model.backbone(random_image(4)),
                                      gt=[], rng=rng)
    obj_loss, box_loss = losses
    assert np.isfinite(obj_loss.item()) and obj_loss.item() > 0
    assert box_loss.item() == 0.0  # no positive anchors, no box targets
    assert proposals.boxes.shape[0] <= model.config.post_nms_top_n


def test_rpn_forward_training_appends_gt_boxes():
    model = make_model()
    gt = [ann((10, 12, 30, 28), class_id=2)]
    proposals, losses = D.rpn_forward(model, model.backbone(random_image(5)),
                                      gt=gt, rng=np.random.default_rng(0))
    assert losses is not None
    np.testing.assert_allclose(proposals.boxes[-1], [10, 12, 30, 28])
    assert proposals.scores[-1] == 1.0


def test_rpn_forward_whole_image_fallback(monkeypatch):
    model = make_model()
    monkeypatch.setattr(D, "decode_boxes",
                        lambda deltas, anchors: np.zeros_like(anchors))
    proposals, _ = D.rpn_forward(model, model.backbone(random_image(6)))
    np.testing.assert_array_equal(proposals.boxes, [[0.0, 0.0, 64.0, 64.0]])
    np.testing.assert_array_equal(proposals.scores, [1.0])


# ---------------------------------------------------------------------------
# sampling and proposal labeling
# ---------------------------------------------------------------------------


def test_sample_balanced_caps_positives():
    labels = np.array([1] * 10 + [0] * 20)
    take = D._sample_balanced(labels, 16, 0.25, np.random.default_rng(0))
    assert take.size == 16
    assert (labels[take] == 1).sum() == 4  # 25% of 16
    assert np.array_equal(take, np.sort(take))
    assert np.unique(take).size == take.size


def test_sample_balanced_fills_with_negatives():
    labels = np.array([1] * 2 + [0] * 30)
    take = D._sample_balanced(labels, 16, 0.5, np.random.default_rng(0))
    assert (labels[take] == 1).sum() == 2
    assert (labels[take] == 0).sum() == 14


def test_sample_balanced_ignores_minus_one():
    labels = np.array([-1] * 20 + [0] * 3)
    take = D._sample_balanced(labels, 16, 0.5, np.random.default_rng(0))
    assert np.all(labels[take] == 0) and take.size == 3


def test_label_proposals_frozen():
    props = D.ProposalSet(
        boxes=np.array([[0.0, 0.0, 10.0, 10.0],   # IoU 1.0 with gt 0
                        [0.0, 0.0, 10.0, 5.0],    # IoU 0.5 with gt 0: boundary in
                        [40.0, 40.0, 60.0, 60.0],  # IoU 1.0 with gt 1
                        [0.0, 30.0, 5.0, 40.0]]),  # background
        scores=np.ones(4))
    gt = [ann((0, 0, 10, 10), class_id=3), ann((40, 40, 60, 60), class_id=1)]
    labels, targets = D.label_proposals(props, gt)
    np.testing.assert_array_equal(labels, [3, 3, 1, 0])
    np.testing.assert_allclose(targets[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(targets[2], 0.0, atol=1e-12)
    assert np.any(targets[1] != 0.0)


def test_label_proposals_empty_gt_all_background():
    props = D.ProposalSet(boxes=np.array([[0.0, 0.0, 10.0, 10.0]]), scores=np.ones(1))
    labels, targets = D.label_proposals(props, [])
    assert labels.tolist() == [0]
    assert np.all(targets == 0.0)


# ---------------------------------------------------------------------------
# loss bundles
# ---------------------------------------------------------------------------


def test_detection_losses_stage_routing():
    model = make_model()
    fm = model.backbone(random_image(7))
    gt = [ann((16, 16, 40, 36), class_id=2)]

    bundle, proposals = D.detection_losses(model, fm, gt, np.random.default_rng(0), "both")
    assert proposals is not None
    for part in (bundle.rpn_objectness, bundle.roi_class):
        assert part.item() > 0.0
    assert np.isfinite(bundle.total().item())

    bundle, proposals = D.detection_losses(model, fm, [], np.random.default_rng(0), "rpn")
    assert proposals is not None
    assert bundle.roi_class.item() == 0.0 and bundle.roi_box.item() == 0.0
    assert bundle.rpn_objectness.item() > 0.0

    bundle, proposals = D.detection_losses(model, fm, [], np.random.default_rng(0), "none")
    assert proposals is None
    assert bundle.total().item() == 0.0

    with pytest.raises(ValueError, match="stages"):
        D.detection_losses(model, fm, [], np.random.default_rng(0), "roi")


def test_detection_losses_deterministic_given_seed():
    def run():
        model = make_model(seed=3)
        fm = model.backbone(random_image(8))
        gt = [ann((8, 8, 28, 30))]
        bundle, _ = D.detection_losses(model, fm, gt, np.random.default_rng(42), "both")
        return bundle.total().item()

    assert run() == run()


def test_bundle_total_is_componentwise_sum():
    parts = [T.constant(v) for v in (0.25, 0.5, 0.125, 0.0625)]
    bundle = D.DetectionLossBundle(*parts)
    assert bundle.total().item() == 0.9375


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def test_roi_detections_contract():
    model = make_model()
    fm = model.backbone(random_image(9))
    proposals, _ = D.rpn_forward(model, fm)
    dets = D.roi_detections(model, fm, proposals, score_threshold=0.0)
    assert all(isinstance(d, D.Detection) for d in dets)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        assert 1 <= d.class_id <= 4
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
    # per-class NMS postcondition
    for k in range(1, 5):
        boxes = [d.box for d in dets if d.class_id == k]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert compute_iou(np.array(boxes[i]), np.array(boxes[j])) \
                    < model.config.detect_nms_threshold


def test_roi_detections_threshold_filters():
    model = make_model()
    fm = model.backbone(random_image(10))
    proposals, _ = D.rpn_forward(model, fm)
    assert D.roi_detections(model, fm, proposals, score_threshold=1.0) == []


def test_detect_end_to_end():
    model = make_model()
    dets = D.detect(model, random_image(11), score_threshold=0.0)
    assert isinstance(dets, list)
    for d in dets:
        assert isinstance(d.box, tuple) and len(d.box) == 4
