"""Density-gated tumor filtering and evaluation metrics.

The filter computes the tumor density D (nonzero fraction inside the nonzero
bounding box).  Dense predictions (D >= gate) pass through untouched; sparse
ones keep connected components in descending size order until the retained
voxels reach the retention fraction of all nonzero voxels, and the rest are
zeroed.  Subregion labels inside retained components are preserved.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volumes import REGIONS, SegmentationMask


@dataclass(frozen=True)
class FilterParams:
    density_gate: float = 0.1
    retain_fraction: float = 0.6
    connectivity: int = 26

    def __post_init__(self):
        if not 0 < self.density_gate < 1 or not 0 < self.retain_fraction < 1:
            raise ValidationError("density gate and retain fraction must lie in (0, 1)")
        if self.connectivity not in (6, 26):
            raise ValidationError(f"connectivity must be 6 or 26, got {self.connectivity}")


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)


def connected_components(binary: np.ndarray, connectivity: int = 26):
    """Label connected components with a deterministic ordering.

    Returns (labels, sizes) where component k (1-based) has ``sizes[k-1]``
    voxels; components are numbered by descending size, ties broken by the
    lexicographically smallest seed voxel.
    """
    binary = np.asarray(binary).astype(bool)
    raw, n = ndimage.label(binary, structure=_structure(connectivity))
    if n == 0:
        return np.zeros_like(raw, dtype=np.int32), []
    sizes = ndimage.sum_labels(np.ones_like(raw), raw, index=range(1, n + 1)).astype(int)
    seeds = []
    coords = np.argwhere(raw > 0)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    first_seen = {}
    for i in order:
        lab = raw[tuple(coords[i])]
        if lab not in first_seen:
            first_seen[lab] = tuple(coords[i])
    for lab in range(1, n + 1):
        seeds.append(first_seen[lab])
    ranking = sorted(range(n), key=lambda i: (-sizes[i], seeds[i]))
    relabel = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(ranking, start=1):
        relabel[old + 1] = new
    return relabel[raw], [int(sizes[i]) for i in ranking]


def tumor_density(labels: np.ndarray) -> float:
    """Nonzero fraction within the nonzero bounding box; 0 for an empty mask."""
    nz = np.nonzero(labels)
    if len(nz[0]) == 0:
        return 0.0
    sl = tuple(slice(int(ix.min()), int(ix.max()) + 1) for ix in nz)
    box = labels[sl]
    return float((box > 0).sum() / box.size)


def retained_component_count(sizes, retain_fraction: float) -> int:
    """How many of the descending-size components to keep.

    The kept set is the smallest prefix that reaches ``retain_fraction`` of
    all voxels AND is stable as a mask of its own (dropping its smallest
    member would fall below the fraction of the retained total).  Without the
    stability condition re-filtering could shrink the mask again, breaking
    idempotence.  When no proper prefix is stable the mask stays unchanged.
    """
    total = sum(sizes)
    cumulative = 0
    for k, size in enumerate(sizes, start=1):
        previous = cumulative
        cumulative += size
        if cumulative >= retain_fraction * total and previous < retain_fraction * cumulative:
            return k
    return len(sizes)


def tumor_filter(mask: SegmentationMask, params: FilterParams = FilterParams()) -> SegmentationMask:
    """Drop small spurious components from a sparse prediction.

    No-ops when the density gate does not fire (D >= gate) or the mask is
    empty; otherwise keeps the largest components per
    :func:`retained_component_count`.  Never creates voxels and is idempotent.
    """
    labels = mask.labels
    total = int((labels > 0).sum())
    if total == 0:
        return mask
    if tumor_density(labels) >= params.density_gate:
        return mask
    comps, sizes = connected_components(labels > 0, params.connectivity)
    n_keep = retained_component_count(sizes, params.retain_fraction)
    keep = np.zeros(len(sizes) + 1, dtype=bool)
    keep[1 : n_keep + 1] = True
    out = np.where(keep[comps], labels, 0).astype(labels.dtype)
    return SegmentationMask(labels=out)


# ---------------------------------------------------------------------------
# metrics


def dice_score(pred: SegmentationMask | np.ndarray, gt: SegmentationMask | np.ndarray,
               region: str = "whole") -> float:
    """Hard-label Dice over a named region's label set; empty-vs-empty is 1.0."""
    p = pred.labels if isinstance(pred, SegmentationMask) else np.asarray(pred)
    g = gt.labels if isinstance(gt, SegmentationMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    if region not in REGIONS:
        raise ValidationError(f"unknown region '{region}', expected one of {tuple(REGIONS)}")
    labels = REGIONS[region]
    pb = np.isin(p, labels)
    gb = np.isin(g, labels)
    denom = int(pb.sum()) + int(gb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pb & gb).sum()) / denom


def auc_score(scores, labels) -> float | None:
    """Rank-statistic AUC with ties half-credited; None if one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def classification_metrics(probs, labels) -> dict:
    """AUC / accuracy / F1 from positive-class probabilities and 0/1 labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValidationError(f"shape mismatch: {probs.shape} probs vs {labels.shape} labels")
    if probs.size == 0:
        return {"auc": None, "acc": None, "f1": None, "n": 0}
    pred = (probs >= 0.5).astype(int)
    acc = float((pred == labels).mean())
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return {
        "auc": auc_score(probs, labels),
        "acc": acc,
        "f1": float(f1),
        "n": int(labels.size),
    }


@dataclass
class EvaluationReport:
    """Aggregated phantom-set evaluation: per-region Dice and per-task metrics."""

    region_dice: dict[str, dict[str, float]]    # region -> {mean, std, n}
    task_metrics: dict[str, dict]                # task -> {auc, acc, f1, n}
    per_case: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"region_dice": self.region_dice, "task_metrics": self.task_metrics,
             "per_case": self.per_case},
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "whole", "core", "edema"])
        writer.writerow(
            ["dice_mean"] + [f"{self.region_dice[r]['mean']:.4f}" for r in ("whole", "core", "edema")]
        )
        writer.writerow(
            ["dice_std"] + [f"{self.region_dice[r]['std']:.4f}" for r in ("whole", "core", "edema")]
        )
        writer.writerow([])
        writer.writerow(["task", "auc", "acc", "f1", "n"])
        for task, m in self.task_metrics.items():
            auc = "" if m["auc"] is None else f"{m['auc']:.4f}"
            writer.writerow([task, auc, f"{m['acc']:.4f}" if m["acc"] is not None else "",
                             f"{m['f1']:.4f}" if m["f1"] is not None else "", m["n"]])
        return buf.getvalue()


def build_evaluation_report(case_rows: list[dict]) -> EvaluationReport:
    """Aggregate per-case rows: {case_id, dice: {region: v}, tasks: {task: (prob, label)}}."""
    region_dice = {}
    for region in ("whole", "core", "edema"):
        vals = [r["dice"][region] for r in case_rows if region in r.get("dice", {})]
        region_dice[region] = {
            "mean": float(np.mean(vals)) if vals else float("nan"),
            "std": float(np.std(vals)) if vals else float("nan"),
            "n": len(vals),
        }
    task_metrics = {}
    tasks = sorted({t for r in case_rows for t in r.get("tasks", {})})
    for task in tasks:
        pairs = [r["tasks"][task] for r in case_rows if task in r.get("tasks", {})]
        probs = [p for p, _ in pairs]
        labels = [l for _, l in pairs]
        task_metrics[task] = classification_metrics(probs, labels)
    return EvaluationReport(region_dice=region_dice, task_metrics=task_metrics, per_case=case_rows)
