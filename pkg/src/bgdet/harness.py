"""Experiment harness: configuration, the joint HC+SOC training loop, run
records, and the ablation matrix (baseline / naive negatives / instance /
full) with metric emission.

Every run is single-threaded and fully determined by (config, mode, seed);
re-running produces identical loss traces and, downstream, byte-identical
metric CSVs. The config hash is embedded in every artifact.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bgda, evaluate, tensor as T
from .bgda import (
    BackgroundAdapter,
    DAOutputs,
    RUN_MODES,
    adaptation_outputs,
    anti_crop_mask,
    assert_masked_cells_dead,
    da_instance_loss,
    total_loss,
)
from .detector import (
    DetectionLossBundle,
    DetectorConfig,
    MiniDetector,
    detect,
    detection_losses,
    rpn_forward,
    validate_detector_config,
)
from .synthgen import HC, SOC, load_image, load_manifest

log = logging.getLogger(__name__)

DETECTION_COMPONENTS = ("rpn_objectness", "rpn_box", "roi_class", "roi_box")
DA_COMPONENTS = ("da_instance", "da_image", "consistency")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "ablation"
    data_dir: str = "data"
    out_dir: str = "runs"
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    lambda_da: float = 0.1
    grl_weight: float = 0.1
    iou_bg_threshold: float = 0.01
    learning_rate: float = 0.003
    momentum: float = 0.9
    # Discriminator-only refinement: extra adversary updates per step, drawn
    # from a rolling pool of recent frozen features. Against single two-image
    # batches the discriminator only chases noise and the feature extractor
    # out-rotates it; a replay pool lets it hold a best response against the
    # slowly drifting feature distribution.
    disc_steps: int = 4
    disc_batch: int = 256      # rows sampled per domain per refinement step
    disc_pool: int = 128       # batches retained per domain in the pool
    disc_lr_scale: float = 10.0  # adversary lr multiplier (after 1/lambda)
    disc_weight_decay: float = 0.01  # bounds adversary confidence
    total_steps: int = 8000
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = RUN_MODES
    log_interval: int = 500
    # evaluation protocol
    detection_floor: float = 0.05     # collection threshold for PR pooling
    eval_score_threshold: float = 0.3  # fixed threshold for probe recall
    far_target_recall: float = 0.9     # FAR is read at this HC-test recall
    eval_max_images: int = 0           # 0 = use every test image


def validate_experiment_config(config: ExperimentConfig) -> None:
    validate_detector_config(config.detector)
    if config.lambda_da < 0 or config.grl_weight < 0:
        raise ValueError("lambda_da and grl_weight must be nonnegative")
    if not 0 <= config.iou_bg_threshold < 1:
        raise ValueError("iou_bg_threshold must lie in [0, 1)")
    if config.learning_rate <= 0 or config.total_steps <= 0:
        raise ValueError("learning_rate and total_steps must be positive")
    if config.disc_steps < 1:
        raise ValueError("disc_steps must be >= 1")
    if config.disc_batch < 1 or config.disc_pool < 1:
        raise ValueError("disc_batch and disc_pool must be >= 1")
    if config.disc_lr_scale <= 0:
        raise ValueError("disc_lr_scale must be positive")
    if config.disc_weight_decay < 0:
        raise ValueError("disc_weight_decay must be nonnegative")
    if not config.seeds:
        raise ValueError("need at least one seed")
    for mode in config.modes:
        if mode not in RUN_MODES:
            raise ValueError(f"unknown run mode {mode!r}")
    if not 0 < config.far_target_recall <= 1:
        raise ValueError("far_target_recall must lie in (0, 1]")


def experiment_config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    detector_raw = raw.pop("detector", {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown experiment config fields: {sorted(unknown)}")
    det_known = {f.name for f in dataclasses.fields(DetectorConfig)}
    det_unknown = set(detector_raw) - det_known
    if det_unknown:
        raise ValueError(f"unknown detector config fields: {sorted(det_unknown)}")
    for name in ("backbone_channels", "anchor_scales", "anchor_ratios"):
        if name in detector_raw:
            detector_raw[name] = tuple(detector_raw[name])
    for name in ("seeds", "modes"):
        if name in raw:
            raw[name] = tuple(raw[name])
    config = ExperimentConfig(detector=DetectorConfig(**detector_raw), **raw)
    validate_experiment_config(config)
    return config


def load_experiment_config(path) -> ExperimentConfig:
    return experiment_config_from_dict(
        json.loads(Path(path).read_text(encoding="utf-8")))


def experiment_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(experiment_config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------------


@dataclass
class LoadedSplit:
    domain: str
    images: list[np.ndarray]
    annotations: list[list]


def load_split(data_dir, name: str, limit: int = 0) -> LoadedSplit:
    root = Path(data_dir)
    manifest = load_manifest(root / f"{name}.json")
    samples = manifest.samples[:limit] if limit else manifest.samples
    images = [load_image(root / s.path) for s in samples]
    return LoadedSplit(domain=manifest.domain, images=images,
                       annotations=[s.annotations for s in samples])


@dataclass
class ExperimentData:
    hc_train: LoadedSplit
    soc_train: LoadedSplit
    hc_test: LoadedSplit
    soc_test: LoadedSplit
    probe: LoadedSplit


def load_experiment_data(config: ExperimentConfig) -> ExperimentData:
    limit = config.eval_max_images
    data = ExperimentData(
        hc_train=load_split(config.data_dir, "hc_train"),
        soc_train=load_split(config.data_dir, "soc_train"),
        hc_test=load_split(config.data_dir, "hc_test", limit),
        soc_test=load_split(config.data_dir, "soc_test", limit),
        probe=load_split(config.data_dir, "probe", limit),
    )
    if data.hc_train.domain != HC or data.soc_train.domain != SOC:
        raise ValueError("train split domains do not match their names")
    return data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    mode: str
    seed: int
    steps: int
    loss_trace: list[dict]
    checkpoint_path: str
    wall_clock_s: float
    metrics: dict = field(default_factory=dict)


def _loss_mode(mode: str) -> str:
    """Map a run mode onto its composite-loss shape."""
    return "baseline" if mode in ("baseline", "naive_negatives") else mode


def _combined(parts: list[T.Tensor]) -> T.Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out


def _check_finite(components: dict[str, float], step: int) -> None:
    for name, value in components.items():
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss component {name!r} at step {step}")


def build_model_and_adapter(config: ExperimentConfig, seed: int):
    model = MiniDetector(config.detector, seed=seed)
    adapter = BackgroundAdapter(config.detector.backbone_channels[-1],
                                config.detector.hidden_dim,
                                seed=seed + 0x5EED)
    return model, adapter


def _adapter_params(adapter, mode: str):
    if mode == "instance":
        return [p for p in adapter.parameters() if p.name.startswith("da.inst.")]
    if mode == "full":
        return adapter.parameters()
    return []


def _optimizers(model, adapter, mode: str, config: ExperimentConfig):
    """Detector parameters train at the base rate. Discriminator gradients
    arrive scaled by lambda_da (the domain losses enter the total through
    it), so their learning rate is compensated by 1/lambda_da and then raised
    by disc_lr_scale: lambda_da and the reversal weight keep their meaning as
    feature-side pressure knobs, while the adversary itself trains fast
    enough to be worth fooling. Discriminators use no momentum (a convex head
    tracking a moving target should not amplify stale gradient directions).
    Weight decay applies only to the instance head: its pooled inputs are
    nearly separable, so without decay its weights and the swings it inflicts
    on the features grow without bound, while the image head's cell-level
    classes overlap enough that its weights stay bounded on their own."""
    opts = [T.SGD(model.parameters(), config.learning_rate, config.momentum)]
    opt_inst = opt_img = None
    disc = _adapter_params(adapter, mode)
    if disc:
        lr = config.learning_rate * config.disc_lr_scale
        if config.lambda_da > 0:
            lr /= config.lambda_da
        inst = [p for p in disc if p.name.startswith("da.inst.")]
        img = [p for p in disc if not p.name.startswith("da.inst.")]
        if inst:
            opt_inst = T.SGD(inst, lr, momentum=0.0,
                             weight_decay=config.disc_weight_decay)
            opts.append(opt_inst)
        if img:
            opt_img = T.SGD(img, lr, momentum=0.0)
            opts.append(opt_img)
    return opts, opt_inst, opt_img


class _FeatureReplay:
    """Rolling pool of recent per-row features for one discriminator head."""

    def __init__(self, max_batches: int):
        self._pools = {HC: deque(maxlen=max_batches),
                       SOC: deque(maxlen=max_batches)}

    def push(self, domain: str, rows: np.ndarray) -> None:
        if len(rows):
            self._pools[domain].append(np.ascontiguousarray(rows))

    def ready(self) -> bool:
        return bool(self._pools[HC]) and bool(self._pools[SOC])

    def sample(self, domain: str, n: int, rng) -> np.ndarray:
        pool = self._pools[domain]
        rows = pool[0] if len(pool) == 1 else np.concatenate(pool, axis=0)
        idx = rng.integers(len(rows), size=min(n, len(rows)))
        return rows[idx]


def _refine_discriminators(adapter, config: ExperimentConfig,
                           replay_img: _FeatureReplay,
                           replay_inst: _FeatureReplay,
                           rng, opt_inst, opt_img) -> None:
    """Extra discriminator-only steps on features sampled from the replay
    pools. Sampled rows enter as constants, so no gradient can reach the
    detector; losses are scaled by lambda_da to match the gradient scale of
    the joint step (and to stay an exact no-op at lambda_da = 0)."""
    weight = float(config.lambda_da)
    if weight == 0.0:
        return
    for _ in range(config.disc_steps - 1):
        with T.Tape():
            terms = []
            use_img = opt_img is not None and replay_img.ready()
            use_inst = opt_inst is not None and replay_inst.ready()
            if use_img:
                for domain in (HC, SOC):
                    rows = replay_img.sample(domain, config.disc_batch, rng)
                    probs = adapter.image_cell_probs(T.Tensor(rows), 0.0)
                    terms.append(da_instance_loss(probs, domain))
            if use_inst:
                for domain in (HC, SOC):
                    rows = replay_inst.sample(domain, config.disc_batch, rng)
                    probs = adapter.instance_probs(T.Tensor(rows), 0.0)
                    terms.append(da_instance_loss(probs, domain))
            if not terms:
                return
            loss = terms[0]
            for term in terms[1:]:
                loss = T.add(loss, term)
            loss = T.mul(loss, T.constant(weight))
            T.backward(loss)
            if use_inst:
                opt_inst.step()
            if use_img:
                opt_img.step()


def train(config: ExperimentConfig, mode: str, seed: int,
          data: ExperimentData | None = None) -> tuple[RunRecord, MiniDetector, BackgroundAdapter]:
    """One training run. Per step: one HC image always; one SOC image in
    every mode except baseline. DA terms per mode; a NaN in any component
    aborts with its name. Masking guarantees are asserted on every batch."""
    validate_experiment_config(config)
    if mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {mode!r}")
    if data is None:
        data = load_experiment_data(config)
    started = time.monotonic()

    model, adapter = build_model_and_adapter(config, seed)
    optimizers, opt_inst, opt_img = _optimizers(model, adapter, mode, config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB81C]))
    # The replay sampler draws from its own stream so the main stream's
    # consumption pattern is independent of the refinement schedule.
    replay_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    replay_img = _FeatureReplay(config.disc_pool)
    replay_inst = _FeatureReplay(config.disc_pool)
    soc_stages = config.detector.soc_loss_stages
    trace: list[dict] = []

    for step in range(1, config.total_steps + 1):
        hc_idx = int(rng.integers(len(data.hc_train.images)))
        gt = data.hc_train.annotations[hc_idx]
        with T.Tape():
            fm_hc = model.backbone(data.hc_train.images[hc_idx])
            det_hc, props_hc = detection_losses(model, fm_hc, gt, rng, stages="both")
            det_parts = {name: [getattr(det_hc, attr)]
                         for name, attr in zip(DETECTION_COMPONENTS,
                                               ("rpn_objectness", "rpn_box",
                                                "roi_class", "roi_box"))}

            da = None
            da_hc = mask_hc = None
            if mode != "baseline":
                soc_idx = int(rng.integers(len(data.soc_train.images)))
                soc_img = data.soc_train.images[soc_idx]
                fm_soc = model.backbone(soc_img)
                det_soc, props_soc = detection_losses(model, fm_soc, [], rng,
                                                      stages=soc_stages)
                if props_soc is not None:
                    for name, part in zip(DETECTION_COMPONENTS,
                                          (det_soc.rpn_objectness, det_soc.rpn_box,
                                           det_soc.roi_class, det_soc.roi_box)):
                        det_parts[name].append(part)
                if mode in ("instance", "full"):
                    if props_soc is None:
                        props_soc, _ = rpn_forward(model, fm_soc)
                    da_hc, mask_hc = adaptation_outputs(
                        model, adapter, fm_hc, props_hc, gt, HC, mode,
                        config.grl_weight, config.iou_bg_threshold,
                        retain_prob_grad=True)
                    da_soc, _ = adaptation_outputs(
                        model, adapter, fm_soc, props_soc, [], SOC, mode,
                        config.grl_weight, config.iou_bg_threshold)
                    da = DAOutputs(
                        image_domain_prob_map=None,
                        instance_domain_probs=None,
                        da_image_loss=T.add(da_hc.da_image_loss, da_soc.da_image_loss),
                        da_instance_loss=T.add(da_hc.da_instance_loss,
                                               da_soc.da_instance_loss),
                        consistency_loss=T.add(da_hc.consistency_loss,
                                               da_soc.consistency_loss),
                    )

            bundle = DetectionLossBundle(*(_combined(det_parts[n])
                                           for n in DETECTION_COMPONENTS))
            loss = total_loss(bundle, da, config.lambda_da, _loss_mode(mode))

            components = {n: _combined(det_parts[n]).item()
                          for n in DETECTION_COMPONENTS}
            if mode in ("instance", "full"):
                components["da_instance"] = da.da_instance_loss.item()
            if mode == "full":
                components["da_image"] = da.da_image_loss.item()
                components["consistency"] = da.consistency_loss.item()
            components["total"] = loss.item()
            _check_finite(components, step)

            T.backward(loss)
            if da_hc is not None and mask_hc is not None:
                assert_masked_cells_dead(da_hc.image_domain_prob_map, mask_hc)
            for opt in optimizers:
                opt.step()

        if da is not None:
            if mode == "full":
                cells_hc = fm_hc.data[0].reshape(fm_hc.data.shape[1], -1).T
                replay_img.push(HC, cells_hc[mask_hc.reshape(-1) == 1])
                cells_soc = fm_soc.data[0].reshape(fm_soc.data.shape[1], -1).T
                replay_img.push(SOC, cells_soc)
            for outputs, domain in ((da_hc, HC), (da_soc, SOC)):
                feats = outputs.instance_feature_data
                if feats is not None:
                    replay_inst.push(domain, feats)
            if config.disc_steps > 1:
                _refine_discriminators(adapter, config, replay_img,
                                       replay_inst, replay_rng,
                                       opt_inst, opt_img)

        if step % config.log_interval == 0 or step == config.total_steps:
            trace.append({"step": step, **components})

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{mode}-seed{seed}.ckpt"
    state = dict(model.state_dict())
    if mode in ("instance", "full"):
        state.update(adapter.state_dict())
    T.save_tensors(ckpt_path, state)

    record = RunRecord(
        config_hash=experiment_hash(config),
        mode=mode,
        seed=seed,
        steps=config.total_steps,
        loss_trace=trace,
        checkpoint_path=str(ckpt_path),
        wall_clock_s=time.monotonic() - started,
    )
    return record, model, adapter


def load_checkpoint(path, config: ExperimentConfig):
    """Rebuild model (+adapter when its weights were saved) from a file."""
    named = T.load_tensors(path)
    model, adapter = build_model_and_adapter(config, seed=0)
    model.load_state_dict({k: v for k, v in named.items()
                           if not k.startswith("da.")})
    da_state = {k: v for k, v in named.items() if k.startswith("da.")}
    if da_state:
        adapter.load_state_dict(da_state)
    return model, adapter


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def collect_detections(model: MiniDetector, split: LoadedSplit, floor: float):
    return [detect(model, image, score_threshold=floor) for image in split.images]


def backbone_domain_features(model: MiniDetector, data: ExperimentData):
    """Frozen-feature domain probe inputs, grouped per image: each element is
    the [n_cells, channels] matrix of one image's final-feature-map cells.
    HC is restricted to anti-crop background cells so the probe measures
    domain leakage rather than threat presence; SOC uses every cell."""
    stride = model.config.stride
    hc_groups, soc_groups = [], []
    for image, gt in zip(data.hc_test.images, data.hc_test.annotations):
        fm = model.backbone(image).data[0]
        mask = anti_crop_mask(gt, fm.shape[1:], stride)
        cells = fm.reshape(fm.shape[0], -1).T[mask.reshape(-1) == 1]
        if len(cells):
            hc_groups.append(cells)
    for image in data.soc_test.images:
        fm = model.backbone(image).data[0]
        soc_groups.append(fm.reshape(fm.shape[0], -1).T)
    return hc_groups, soc_groups


def evaluate_run(model: MiniDetector, config: ExperimentConfig,
                 data: ExperimentData) -> dict:
    """The four ablation measurements: HC-test AP/mAP, SOC false-alarm rate
    at the model's own recall-<target> threshold, injected-threat probe
    recall at the fixed evaluation threshold, and the domain-probe AUC."""
    floor = config.detection_floor
    hc_dets = collect_detections(model, data.hc_test, floor)
    ap_result, _ = evaluate.evaluate_detections(hc_dets, data.hc_test.annotations)

    thr = evaluate.threshold_for_recall(hc_dets, data.hc_test.annotations,
                                        config.far_target_recall)
    if thr is None:
        thr = floor  # recall target unreachable: count every detection
    soc_dets = collect_detections(model, data.soc_test, floor)
    far = evaluate.false_alarm_rate(soc_dets, thr)

    probe_dets = collect_detections(model, data.probe, floor)
    probe_recall = evaluate.recall_at_threshold(probe_dets, data.probe.annotations,
                                                config.eval_score_threshold)

    hc_feats, soc_feats = backbone_domain_features(model, data)
    probe_auc = evaluate.domain_probe_auc(hc_feats, soc_feats, seed=0)

    return {
        "ap_per_class": {int(k): v for k, v in ap_result.per_class.items()},
        "excluded_classes": list(ap_result.excluded),
        "map": ap_result.map,
        "far_threshold": thr,
        "far": far,
        "probe_recall": probe_recall,
        "probe_auc": probe_auc,
    }


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

DISPLAY_NAMES = {"knife": "Knives", "blunt": "Blunts", "gun": "Guns", "lag": "LAGs"}
REPORT_METRICS = ("map", "far", "probe_recall", "probe_auc")


def _experiment_label(config: ExperimentConfig) -> str:
    return f"{config.name}:{experiment_hash(config)}"


def run_single(config: ExperimentConfig, mode: str, seed: int,
               data: ExperimentData) -> RunRecord:
    record, model, _ = train(config, mode, seed, data)
    record.metrics = evaluate_run(model, config, data)
    record_path = Path(config.out_dir) / f"{mode}-seed{seed}.json"
    record_path.write_text(json.dumps(dataclasses.asdict(record), indent=2,
                                      sort_keys=True), encoding="utf-8")
    return record


def run_ablation(config: ExperimentConfig,
                 data: ExperimentData | None = None) -> dict:
    """Run modes x seeds, evaluate each, and emit metrics.csv, report.txt,
    and summary.json. A failed run is recorded and the rest continue."""
    validate_experiment_config(config)
    if data is None:
        data = load_experiment_data(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = _experiment_label(config)

    rows: list[dict] = []
    results: dict[str, dict[int, dict]] = {}
    errors: list[dict] = []
    for mode in config.modes:
        results[mode] = {}
        for seed in config.seeds:
            try:
                record = run_single(config, mode, seed, data)
            except Exception as exc:  # noqa: BLE001 - record and continue
                log.error("run %s seed %d failed: %s", mode, seed, exc)
                errors.append({"mode": mode, "seed": seed, "error": str(exc)})
                continue
            results[mode][seed] = record.metrics
            ap = evaluate.APResult(
                per_class=record.metrics["ap_per_class"],
                excluded=tuple(record.metrics["excluded_classes"]),
                map=record.metrics["map"])
            rows.extend(evaluate.metrics_rows(
                label, mode, seed, ap,
                far=record.metrics["far"],
                probe_auc=record.metrics["probe_auc"]))

    evaluate.write_metrics_csv(out_dir / "metrics.csv", rows)
    summary = _summarize(results, errors, label)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    (out_dir / "report.txt").write_text(_render_report(summary, results),
                                        encoding="utf-8")
    return summary


def _agg(values: list[float]) -> dict:
    return {
        "mean": float(np.mean(values)),
        "spread": float(np.max(values) - np.min(values)),
        "values": [float(v) for v in values],
    }


def _summarize(results, errors, label) -> dict:
    summary = {"experiment": label, "modes": {}, "errors": errors}
    for mode, by_seed in results.items():
        if not by_seed:
            summary["modes"][mode] = {"failed": True}
            continue
        agg = {}
        for metric in REPORT_METRICS:
            agg[metric] = _agg([m[metric] for m in by_seed.values()])
        per_class = {}
        for name in DISPLAY_NAMES:
            class_id = evaluate.THREAT_CLASS_NAMES.index(name) + 1
            vals = [m["ap_per_class"][class_id] for m in by_seed.values()
                    if class_id in m["ap_per_class"]]
            if vals:
                per_class[name] = _agg(vals)
        agg["ap_per_class"] = per_class
        summary["modes"][mode] = agg
    return summary


def _render_report(summary, results) -> str:
    lines = [f"experiment {summary['experiment']}", ""]
    header = ["mode"] + [DISPLAY_NAMES[n] for n in evaluate.THREAT_CLASS_NAMES] \
        + ["mAP", "FAR", "probe_recall", "probe_auc"]
    lines.append("  ".join(f"{h:>16}" for h in header))
    for mode, agg in summary["modes"].items():
        if agg.get("failed"):
            lines.append("  ".join([f"{mode:>16}"] + [f"{'FAILED':>16}"] * 8))
            continue
        cells = [f"{mode:>16}"]
        for name in evaluate.THREAT_CLASS_NAMES:
            stat = agg["ap_per_class"].get(name)
            cells.append(f"{_pm(stat):>16}" if stat else f"{'-':>16}")
        for metric in REPORT_METRICS:
            cells.append(f"{_pm(agg[metric]):>16}")
        lines.append("  ".join(cells))
    if summary["errors"]:
        lines.append("")
        for err in summary["errors"]:
            lines.append(f"FAILED {err['mode']} seed {err['seed']}: {err['error']}")
    lines.append("")
    return "\n".join(lines)


def _pm(stat: dict) -> str:
    return f"{stat['mean']:.3f}±{stat['spread'] / 2:.3f}"
