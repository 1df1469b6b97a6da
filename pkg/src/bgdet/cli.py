"""Command-line entry points: gen-data, train, eval, ablation, plot.

Exit codes: 0 success, 1 validation/runtime failure (one-line error on
stderr), 2 usage errors (argparse).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import evaluate, harness, synthgen
from .bgda import RUN_MODES
from .detector import detect


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bgdet",
        description="Background-adaptive detector: data generation, training, "
                    "evaluation, and the ablation matrix.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the two-domain dataset")
    p.add_argument("--config", help="JSON with optional 'generator' and 'counts' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--mode", required=True, choices=RUN_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="overrides out_dir from the config")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split manifest JSON")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--threshold", type=float, default=None,
                   help="FAR score threshold (default: detector score threshold)")

    p = sub.add_parser("ablation", help="run modes x seeds and emit reports")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="overrides out_dir from the config")

    p = sub.add_parser("plot", help="render a metrics CSV as an SVG bar chart")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_experiment_config(path: str | None, out: str | None) -> harness.ExperimentConfig:
    if path:
        config = harness.load_experiment_config(path)
    else:
        config = harness.ExperimentConfig()
    if out:
        config = dataclasses.replace(config, out_dir=out)
    harness.validate_experiment_config(config)
    return config


def _cmd_gen_data(args) -> int:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    generator = synthgen.generator_config_from_dict(raw.get("generator", {}))
    counts = synthgen.SplitCounts(**raw.get("counts", {}))
    synthgen.generate_dataset(generator, counts, args.seed, args.out)
    print(f"dataset written to {args.out} "
          f"(config {synthgen.config_hash(generator)}, seed {args.seed})")
    return 0


def _cmd_train(args) -> int:
    config = _load_experiment_config(args.config, args.out)
    record, _, _ = harness.train(config, args.mode, args.seed)
    out_dir = Path(config.out_dir)
    record_path = out_dir / f"{args.mode}-seed{args.seed}.json"
    record_path.write_text(
        json.dumps(dataclasses.asdict(record), indent=2, sort_keys=True),
        encoding="utf-8")
    final = record.loss_trace[-1]["total"] if record.loss_trace else float("nan")
    print(f"trained {args.mode} seed {args.seed}: {record.steps} steps, "
          f"final loss {final:.4f}, checkpoint {record.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_experiment_config(args.config, None)
    model, _ = harness.load_checkpoint(args.checkpoint, config)
    manifest = synthgen.load_manifest(args.data)
    root = Path(args.data).parent
    images = [synthgen.load_image(root / s.path) for s in manifest.samples]
    gts = [s.annotations for s in manifest.samples]
    dets = [detect(model, image, score_threshold=config.detection_floor)
            for image in images]

    threshold = args.threshold if args.threshold is not None \
        else config.detector.score_threshold
    far = evaluate.false_alarm_rate(dets, threshold)
    has_gt = any(gts)
    if has_gt:
        ap_result, _ = evaluate.evaluate_detections(dets, gts)
    else:
        ap_result = evaluate.APResult(per_class={}, excluded=(1, 2, 3, 4), map=0.0)

    label = f"eval:{harness.experiment_hash(config)}"
    rows = []
    for class_id in range(1, 5):
        rows.append({
            "experiment": label,
            "mode": "eval",
            "class": evaluate.class_name(class_id),
            "ap": evaluate.format_metric(ap_result.per_class.get(class_id)),
            "map": evaluate.format_metric(ap_result.map if has_gt else None),
            "far_at_threshold": evaluate.format_metric(far),
            "probe_auc": "",
            "seed": "0",
        })
    evaluate.write_metrics_csv(args.out, rows)
    print(f"evaluated {len(images)} images: mAP "
          f"{ap_result.map if has_gt else float('nan'):.4f}, FAR {far:.4f} "
          f"at threshold {threshold}")
    return 0


def _cmd_ablation(args) -> int:
    config = _load_experiment_config(args.config, args.out)
    summary = harness.run_ablation(config)
    print((Path(config.out_dir) / "report.txt").read_text(encoding="utf-8"))
    if summary["errors"]:
        print(f"{len(summary['errors'])} run(s) failed; see summary.json",
              file=sys.stderr)
    return 0


def _cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.metrics, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["ap"]]
    if not rows:
        raise ValueError(f"no AP rows in {args.metrics}")
    modes = sorted({r["mode"] for r in rows})
    classes = sorted({r["class"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(modes)
    for m, mode in enumerate(modes):
        xs, ys = [], []
        for c, name in enumerate(classes):
            vals = [float(r["ap"]) for r in rows
                    if r["mode"] == mode and r["class"] == name]
            if vals:
                xs.append(c + m * width)
                ys.append(sum(vals) / len(vals))
        ax.bar(xs, ys, width=width, label=mode)
    ax.set_xticks([c + 0.4 - width / 2 for c in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablation": _cmd_ablation,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
