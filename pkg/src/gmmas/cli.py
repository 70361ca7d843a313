"""Command-line entry points.

Subcommands: train | ssl | adapt | infer | calibrate | report | bench.
Exit codes: 0 success (or degraded with a warning), 2 configuration error,
3 runtime abort (non-finite loss; the last good checkpoint is retained).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .adaptation import run_adaptation
from .calibration import expected_calibration_error, reliability_csv
from .errors import ConfigurationError, TrainingStepError, ValidationError, VolumeIOError
from .network import config_fingerprint, presence_tensor
from .postprocess import FilterParams, tumor_filter
from .reporting import AnalysisReport, render_report, report_from_mask
from .semi_supervised import run_two_stage_ssl
from .training import RunConfig, Trainer, load_checkpoint, samples_from_manifest
from .volumes import (
    DatasetManifest,
    SegmentationMask,
    TASKS,
    load_volume,
    save_volume,
)

LLM_ENDPOINT_ENV = "GMMAS_LLM_ENDPOINT"


def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigurationError("--config is required")
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    config = RunConfig.from_json(text)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    return config


def _persist_run(trainer: Trainer, config: RunConfig, name: str = "checkpoint.pt") -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(config.to_json())
    path = out / name
    trainer.save_checkpoint(path)
    return path


def cmd_train(args) -> int:
    config = _load_run_config(args)
    manifest = DatasetManifest.load(config.manifest)
    train = samples_from_manifest(manifest, "train")
    if not train:
        raise ConfigurationError("manifest has no train split")
    trainer = Trainer(config)
    trainer.fit_class_weights(train)
    try:
        trainer.train_epochs(train, config.epochs)
    except TrainingStepError as exc:
        print(f"aborted: {exc}; last good checkpoint retained", file=sys.stderr)
        return 3
    trainer.record_stage("train")
    path = _persist_run(trainer, config)
    val = samples_from_manifest(manifest, "val")
    if val:
        report = trainer.evaluate(val)["report"]
        (Path(config.out_dir) / "val_report.json").write_text(report.to_json())
    trainer.close()
    print(f"checkpoint written to {path}")
    return 0


def cmd_ssl(args) -> int:
    config = _load_run_config(args)
    trainer = Trainer.from_checkpoint(args.checkpoint, config)
    manifest = DatasetManifest.load(config.manifest)
    labeled = samples_from_manifest(manifest, "train")
    unlabeled = samples_from_manifest(manifest, "unlabeled")
    if not unlabeled:
        print("warning: no unlabeled entries; continuing supervised training", file=sys.stderr)
    trainer.fit_class_weights(labeled)
    try:
        _, pools = run_two_stage_ssl(trainer, labeled, unlabeled, config.ssl)
    except TrainingStepError as exc:
        print(f"aborted: {exc}; last good checkpoint retained", file=sys.stderr)
        return 3
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, pool in enumerate(pools):
        pool.save_jsonl(out / f"pseudo_labels_round{i + 1}.jsonl")
    path = _persist_run(trainer, config, "checkpoint_ssl.pt")
    trainer.close()
    print(f"checkpoint written to {path}")
    return 0


def cmd_adapt(args) -> int:
    config = _load_run_config(args)
    trainer = Trainer.from_checkpoint(args.checkpoint, config)
    manifest = DatasetManifest.load(config.manifest)
    train = samples_from_manifest(manifest, "train")
    unlabeled = samples_from_manifest(manifest, "unlabeled")
    trainer.fit_class_weights(train)
    try:
        _, audit = run_adaptation(trainer, train + unlabeled, config.adaptation,
                                  rng_seed=config.seed)
    except TrainingStepError as exc:
        print(f"aborted: {exc}; last good checkpoint retained", file=sys.stderr)
        return 3
    path = _persist_run(trainer, config, "checkpoint_adapted.pt")
    trainer.close()
    print(f"freeze audit passed: {audit['passed']}; checkpoint written to {path}")
    return 0


def cmd_infer(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    config = RunConfig.from_json(payload["run_config"])
    stored_fp = payload["fingerprint"]
    expected_fp = config_fingerprint(config.network)
    if stored_fp != expected_fp:
        raise ConfigurationError(
            f"architecture fingerprint mismatch: checkpoint {stored_fp}, config {expected_fp}"
        )
    trainer = Trainer.from_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    if not any(volume.modality_presence):
        raise ValidationError("volume has no present modalities")

    x = torch.tensor(volume.voxels, dtype=torch.float32)[None]
    pres = presence_tensor(volume.modality_presence)
    mc_passes = args.mc_passes
    if mc_passes > 1:
        from .calibration import mc_dropout_predict

        mc = mc_dropout_predict(trainer.model, x, pres, M=mc_passes, seed=config.seed)
        seg_probs = mc.seg_probs_mean
        class_probs = {t: mc.mean[t] for t in TASKS}
        uncertainties = mc.uncertainty
    else:
        trainer.model.eval()
        with torch.no_grad():
            out = trainer.model(x, pres)
        seg_probs = out["seg_probs"][0].numpy()
        class_probs = {t: out["class_probs"][t][0].numpy() for t in TASKS}
        uncertainties = {t: 0.0 for t in TASKS}

    mask = SegmentationMask(labels=seg_probs.argmax(axis=0).astype(np.uint8))
    if args.filter:
        mask = tumor_filter(mask, FilterParams())
    report = report_from_mask(
        volume.case_id or Path(args.volume).stem,
        mask.labels,
        class_probs,
        uncertainties=uncertainties,
        filter_applied=bool(args.filter),
        mc_passes=mc_passes,
    )
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(mask, out_dir / f"{report.case_id}_mask.u8")
    report_path = out_dir / f"{report.case_id}_report.json"
    report_path.write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_calibrate(args) -> int:
    trainer = Trainer.from_checkpoint(args.checkpoint)
    config = trainer.config
    manifest = DatasetManifest.load(args.manifest or config.manifest)
    split = args.split
    samples = samples_from_manifest(manifest, split)
    if not samples:
        raise ConfigurationError(f"manifest has no '{split}' split")
    result = trainer.evaluate(samples, mc_passes=max(args.mc_passes, 1))
    confidences, correctness = [], []
    for row in result["rows"]:
        for task, (p_pos, label) in row["tasks"].items():
            probs = row["class_probs"][task]
            pred = int(np.argmax(probs))
            confidences.append(max(probs))
            correctness.append(int(pred == label))
    report = expected_calibration_error(confidences, correctness, n_bins=args.bins)
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "calibration.json").write_text(report.to_json())
    (out_dir / "calibration.csv").write_text(reliability_csv(report))
    print(json.dumps({"ece": report.ece, "n": int(sum(report.bin_counts))}))
    return 0


def cmd_report(args) -> int:
    try:
        report = AnalysisReport.from_json(Path(args.analysis).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read analysis report: {exc}") from exc
    endpoint = args.llm_endpoint or os.environ.get(LLM_ENDPOINT_ENV)
    text, warning = render_report(report, endpoint, timeout=args.timeout)
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import BenchConfig, run_bench

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
    config = BenchConfig.from_json(text)
    if args.seed is not None:
        config.run.seed = args.seed
    if args.out is not None:
        config.run.out_dir = args.out
    result = run_bench(config)
    for name, table in result["tables"].items():
        print(f"## {name}")
        print(table["markdown"])
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmas",
        description="Multi-task semi-supervised analysis of multimodal 3D volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("train", help="supervised warm-start training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ssl", help="two-stage semi-supervised training")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_ssl)

    p = sub.add_parser("adapt", help="missing-modality adaptation stages 1-3")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="segment + classify one case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--filter", action="store_true", help="apply the tumor voxel filter")
    p.add_argument("--mc-passes", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("calibrate", help="ECE + reliability table on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--mc-passes", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="render prognosis text from an analysis report")
    p.add_argument("--analysis", required=True, help="AnalysisReport JSON path")
    p.add_argument("--llm-endpoint", default=None)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="ablation tables on phantom splits")
    p.add_argument("--config", required=True, help="bench config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, VolumeIOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingStepError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
