"""Experiment harness: trains the ablation arms and emits the comparison
tables (segmentation progression, multi-task ablation, SSL method comparison,
and the modality-absence grids) from persisted per-case metric logs.

Every table cell is recomputable from ``bench_logs/<arm>.jsonl``; the tables
are derived exclusively from those logs.
"""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import ModalityMask
from .errors import ConfigurationError
from .postprocess import classification_metrics
from .semi_supervised import run_two_stage_ssl
from .training import RunConfig, Trainer, samples_from_manifest
from .volumes import DatasetManifest, MODALITIES, TASKS

SEG_ARMS = ("original", "filter", "fusion", "ssl")
ABLATION_ARMS = ("single_seg", "single_cls", "plain_multi", "uncertainty_multi")
SSL_ARMS = ("supervised", "stage1", "stage2", "two_stage")

SEG_ROW_TITLES = {
    "original": "baseline",
    "filter": "+ tumor voxel filter",
    "fusion": "+ global feature fusion",
    "ssl": "+ semi-supervised learning",
}


@dataclass
class BenchConfig:
    run: RunConfig
    seg_arms: tuple[str, ...] = SEG_ARMS
    ablation_arms: tuple[str, ...] = ABLATION_ARMS
    ssl_arms: tuple[str, ...] = SSL_ARMS
    modality_grid: bool = True

    @classmethod
    def from_json(cls, text: str) -> "BenchConfig":
        d = json.loads(text)
        run = RunConfig.from_dict(d.pop("run"))
        for key in ("seg_arms", "ablation_arms", "ssl_arms"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(run=run, **d)


def _rows_path(out_dir: Path, arm: str) -> Path:
    return out_dir / "bench_logs" / f"{arm}.jsonl"


def _write_rows(out_dir: Path, arm: str, rows: list[dict]) -> None:
    path = _rows_path(out_dir, arm)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


def read_rows(out_dir, arm: str) -> list[dict] | None:
    path = _rows_path(Path(out_dir), arm)
    if not path.exists():
        return None
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def summarize_rows(rows: list[dict]) -> dict:
    """Aggregate a per-case log into table cells (pure function of the log)."""
    out: dict[str, float | None] = {}
    for region in ("whole", "core", "edema"):
        vals = [r["dice"][region] for r in rows if region in r.get("dice", {})]
        out[f"dice_{region}_mean"] = float(np.mean(vals)) if vals else None
        out[f"dice_{region}_std"] = float(np.std(vals)) if vals else None
    aucs, accs, f1s = [], [], []
    for task in TASKS:
        pairs = [r["tasks"][task] for r in rows if task in r.get("tasks", {})]
        if not pairs:
            continue
        m = classification_metrics([p for p, _ in pairs], [l for _, l in pairs])
        if m["auc"] is not None:
            aucs.append(m["auc"])
        accs.append(m["acc"])
        f1s.append(m["f1"])
    out["auc"] = float(np.mean(aucs)) if aucs else None
    out["acc"] = float(np.mean(accs)) if accs else None
    out["f1"] = float(np.mean(f1s)) if f1s else None
    return out


def _fmt(v, pm=None):
    if v is None:
        return "absent"
    return f"{v:.3f}" if pm is None else f"{v:.3f} +/- {pm:.3f}"


def _eval_rows(trainer: Trainer, samples, apply_filter=False, modality_mask=None) -> list[dict]:
    result = trainer.evaluate(samples, apply_filter=apply_filter, modality_mask=modality_mask)
    return result["rows"]


def _variant(run: RunConfig, **net_overrides) -> RunConfig:
    cfg = copy.deepcopy(run)
    if net_overrides:
        d = cfg.network.to_dict()
        d.update(net_overrides)
        from .network import NetworkConfig

        cfg = copy.deepcopy(run)
        cfg.network = NetworkConfig.from_dict(d)
    return cfg


def run_bench(config: BenchConfig) -> dict:
    """Train the requested arms, persist per-case logs, emit tables.

    Missing arms leave their rows marked absent; the suite continues.
    Returns {"tables": {name: markdown}, "out_dir": str}.
    """
    run = config.run
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(run.manifest)
    train = samples_from_manifest(manifest, "train")
    unlabeled = samples_from_manifest(manifest, "unlabeled")
    test = samples_from_manifest(manifest, "test")
    if not train or not test:
        raise ConfigurationError("bench needs non-empty train and test splits")

    def fresh(cfg: RunConfig, tag: str) -> Trainer:
        cfg = copy.deepcopy(cfg)
        cfg.out_dir = str(out_dir / tag)
        return Trainer(cfg)

    # -- segmentation progression ------------------------------------------
    if "original" in config.seg_arms or "filter" in config.seg_arms:
        base_cfg = _variant(run, use_global_branch=False)
        t = fresh(base_cfg, "arm_original")
        t.train_epochs(train, run.epochs)
        if "original" in config.seg_arms:
            _write_rows(out_dir, "original", _eval_rows(t, test))
        if "filter" in config.seg_arms:
            _write_rows(out_dir, "filter", _eval_rows(t, test, apply_filter=True))
        t.close()

    fusion_trainer = None
    if "fusion" in config.seg_arms or "ssl" in config.seg_arms:
        fusion_trainer = fresh(_variant(run, use_global_branch=True), "arm_fusion")
        fusion_trainer.train_epochs(train, run.epochs)
        if "fusion" in config.seg_arms:
            _write_rows(out_dir, "fusion", _eval_rows(fusion_trainer, test, apply_filter=True))

    if "ssl" in config.seg_arms and fusion_trainer is not None:
        run_two_stage_ssl(fusion_trainer, train, unlabeled, copy.deepcopy(run.ssl))
        _write_rows(out_dir, "ssl", _eval_rows(fusion_trainer, test, apply_filter=True))
        fusion_trainer.save_checkpoint(out_dir / "arm_ssl.pt")
    if fusion_trainer is not None:
        fusion_trainer.close()

    # -- multi-task ablation --------------------------------------------------
    ablation_variants = {
        "single_seg": dict(tasks=("seg",)),
        "single_cls": dict(tasks=TASKS),
        "plain_multi": dict(uncertainty_weighting=False),
        "uncertainty_multi": {},
    }
    for arm in config.ablation_arms:
        overrides = ablation_variants[arm]
        cfg = copy.deepcopy(run)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        t = fresh(cfg, f"arm_{arm}")
        t.train_epochs(train, run.epochs)
        _write_rows(out_dir, arm, _eval_rows(t, test))
        t.close()

    # -- SSL method comparison -------------------------------------------------
    for arm in config.ssl_arms:
        t = fresh(copy.deepcopy(run), f"arm_ssl_{arm}")
        t.train_epochs(train, run.epochs)
        ssl_cfg = copy.deepcopy(run.ssl)
        if arm == "stage1":
            ssl_cfg.stage2_epochs = 0
            run_two_stage_ssl(t, train, unlabeled, ssl_cfg)
        elif arm == "stage2":
            ssl_cfg.stage1_rounds = 0
            run_two_stage_ssl(t, train, unlabeled, ssl_cfg)
        elif arm == "two_stage":
            run_two_stage_ssl(t, train, unlabeled, ssl_cfg)
        _write_rows(out_dir, f"ssl_{arm}", _eval_rows(t, test))
        t.close()

    # -- modality-absence grids -------------------------------------------------
    if config.modality_grid:
        t = fresh(copy.deepcopy(run), "arm_grid")
        t.train_epochs(train, run.epochs)
        singles = list(itertools.combinations(range(4), 1))
        doubles = list(itertools.combinations(range(4), 2))
        for drop in singles + doubles:
            mask = ModalityMask.dropping(*drop)
            tag = "drop_" + "_".join(MODALITIES[i] for i in drop)
            _write_rows(out_dir, tag, _eval_rows(t, test, modality_mask=mask))
        t.close()

    tables = render_tables(out_dir, config)
    for name, text in tables.items():
        (out_dir / f"{name}.md").write_text(text["markdown"])
        (out_dir / f"{name}.csv").write_text(text["csv"])
    return {"tables": tables, "out_dir": str(out_dir)}


def render_tables(out_dir, config: BenchConfig | None = None) -> dict:
    """Build all tables purely from the persisted per-case logs."""
    out_dir = Path(out_dir)
    tables = {}

    def cells(arm):
        rows = read_rows(out_dir, arm)
        return None if rows is None else summarize_rows(rows)

    # segmentation progression
    md = ["| method | whole tumor | tumor core | edema |", "|---|---|---|---|"]
    csv_lines = ["method,whole_mean,whole_std,core_mean,core_std,edema_mean,edema_std"]
    for arm in SEG_ARMS:
        c = cells(arm)
        title = SEG_ROW_TITLES[arm]
        if c is None:
            md.append(f"| {title} | absent | absent | absent |")
            csv_lines.append(f"{title},,,,,,")
            continue
        md.append(
            f"| {title} | {_fmt(c['dice_whole_mean'], c['dice_whole_std'])} "
            f"| {_fmt(c['dice_core_mean'], c['dice_core_std'])} "
            f"| {_fmt(c['dice_edema_mean'], c['dice_edema_std'])} |"
        )
        csv_lines.append(
            f"{title},{c['dice_whole_mean']},{c['dice_whole_std']},"
            f"{c['dice_core_mean']},{c['dice_core_std']},"
            f"{c['dice_edema_mean']},{c['dice_edema_std']}"
        )
    tables["segmentation_table"] = {"markdown": "\n".join(md), "csv": "\n".join(csv_lines)}

    # ablation + ssl comparison share a layout
    for name, arms, prefix in (
        ("ablation_table", ABLATION_ARMS, ""),
        ("ssl_table", SSL_ARMS, "ssl_"),
    ):
        md = [
            "| method | whole tumor | tumor core | edema | AUC | Acc | F1 |",
            "|---|---|---|---|---|---|---|",
        ]
        csv_lines = ["method,whole,core,edema,auc,acc,f1"]
        for arm in arms:
            c = cells(prefix + arm)
            if c is None:
                md.append(f"| {arm} | absent | absent | absent | absent | absent | absent |")
                csv_lines.append(f"{arm},,,,,,")
                continue
            md.append(
                f"| {arm} | {_fmt(c['dice_whole_mean'])} | {_fmt(c['dice_core_mean'])} "
                f"| {_fmt(c['dice_edema_mean'])} | {_fmt(c['auc'])} | {_fmt(c['acc'])} "
                f"| {_fmt(c['f1'])} |"
            )
            csv_lines.append(
                f"{arm},{c['dice_whole_mean']},{c['dice_core_mean']},"
                f"{c['dice_edema_mean']},{c['auc']},{c['acc']},{c['f1']}"
            )
        tables[name] = {"markdown": "\n".join(md), "csv": "\n".join(csv_lines)}

    # modality grids
    singles = list(itertools.combinations(range(4), 1))
    doubles = list(itertools.combinations(range(4), 2))
    for name, drops in (("modality_single_table", singles), ("modality_double_table", doubles)):
        md = ["| missing | whole tumor | tumor core | edema |", "|---|---|---|---|"]
        csv_lines = ["missing,whole,core,edema"]
        for drop in drops:
            tag = "drop_" + "_".join(MODALITIES[i] for i in drop)
            title = " & ".join(MODALITIES[i] for i in drop)
            c = cells(tag)
            if c is None:
                md.append(f"| {title} | absent | absent | absent |")
                csv_lines.append(f"{title},,,")
                continue
            md.append(
                f"| {title} | {_fmt(c['dice_whole_mean'], c['dice_whole_std'])} "
                f"| {_fmt(c['dice_core_mean'], c['dice_core_std'])} "
                f"| {_fmt(c['dice_edema_mean'], c['dice_edema_std'])} |"
            )
            csv_lines.append(
                f"{title},{c['dice_whole_mean']},{c['dice_core_mean']},{c['dice_edema_mean']}"
            )
        tables[name] = {"markdown": "\n".join(md), "csv": "\n".join(csv_lines)}
    return tables
