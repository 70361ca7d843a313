"""Epistemic uncertainty via MC-Dropout and calibration-error tooling.

Uncertainty is the population standard deviation of the positive-class
probability over M stochastic forward passes; calibration error is the
bin-count-weighted mean absolute gap between confidence and accuracy over
equal-width confidence bins.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .volumes import TASKS


@dataclass
class MCPredictions:
    """Per-task pass probabilities, their mean, and the epistemic spread."""

    passes: dict[str, np.ndarray]          # task -> [M, 2] probability vectors
    mean: dict[str, np.ndarray]            # task -> [2]
    uncertainty: dict[str, float]          # task -> population std of p(positive)
    seg_probs_mean: np.ndarray | None = None

    @property
    def n_passes(self) -> int:
        return len(next(iter(self.passes.values())))

    def confidence(self, task: str) -> float:
        return float(self.mean[task].max())


def epistemic_from_passes(positive_probs: np.ndarray) -> float:
    """Population standard deviation of a sequence of scalar predictions."""
    p = np.asarray(positive_probs, dtype=np.float64)
    return float(np.sqrt(np.mean((p - p.mean()) ** 2)))


def mc_dropout_predict(model, x: torch.Tensor, presence: torch.Tensor, M: int,
                       seed: int | None = None) -> MCPredictions:
    """Run M stochastic passes with dropout active at test time.

    With M == 1 (or dropout rate 0) all passes coincide and every uncertainty
    is exactly 0.  The segmentation output is averaged across passes.
    """
    if M < 1:
        raise ValidationError(f"pass count must be >= 1, got {M}")
    if seed is not None:
        torch.manual_seed(seed)
    model.set_mc_mode(M > 1)
    per_task = {t: [] for t in TASKS}
    seg_acc = None
    with torch.no_grad():
        for _ in range(M):
            out = model(x, presence)
            for t in TASKS:
                per_task[t].append(out["class_probs"][t][0].numpy())
            seg = out["seg_probs"][0].numpy()
            seg_acc = seg if seg_acc is None else seg_acc + seg
    model.eval()
    passes = {t: np.stack(v) for t, v in per_task.items()}
    mean = {t: v.mean(axis=0) for t, v in passes.items()}
    unc = {t: epistemic_from_passes(v[:, 1]) for t, v in passes.items()}
    return MCPredictions(
        passes=passes, mean=mean, uncertainty=unc, seg_probs_mean=seg_acc / M
    )


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray          # [n_bins + 1]
    bin_confidence: np.ndarray     # [n_bins], NaN where empty
    bin_accuracy: np.ndarray       # [n_bins], NaN where empty
    bin_counts: np.ndarray         # [n_bins]
    ece: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "bin_edges": self.bin_edges.tolist(),
                "bin_confidence": [None if np.isnan(v) else v for v in self.bin_confidence],
                "bin_accuracy": [None if np.isnan(v) else v for v in self.bin_accuracy],
                "bin_counts": self.bin_counts.tolist(),
                "ece": self.ece,
            },
            indent=2,
        )


def expected_calibration_error(confidences, correctness, n_bins: int = 10) -> CalibrationReport:
    """Equal-width-bin ECE; empty bins are skipped.

    ``confidences`` in [0, 1]; ``correctness`` is 0/1 per sample.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correctness, dtype=np.float64)
    if conf.shape != corr.shape:
        raise ValidationError(
            f"length mismatch: {conf.shape} confidences vs {corr.shape} correctness"
        )
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValidationError("confidences must lie in [0, 1]")

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)
    bin_conf = np.full(n_bins, np.nan)
    bin_acc = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=int)
    n = conf.size
    ece = 0.0
    for b in range(n_bins):
        sel = idx == b
        counts[b] = int(sel.sum())
        if counts[b] == 0:
            continue
        bin_conf[b] = conf[sel].mean()
        bin_acc[b] = corr[sel].mean()
        ece += counts[b] / n * abs(bin_acc[b] - bin_conf[b])
    return CalibrationReport(
        bin_edges=edges,
        bin_confidence=bin_conf,
        bin_accuracy=bin_acc,
        bin_counts=counts,
        ece=float(ece),
    )


def reliability_curve(report: CalibrationReport) -> list[tuple[float, float, int]]:
    """(mean confidence, empirical accuracy, count) rows for occupied bins."""
    rows = []
    for c, a, n in zip(report.bin_confidence, report.bin_accuracy, report.bin_counts):
        if n > 0:
            rows.append((float(c), float(a), int(n)))
    return rows


def reliability_csv(report: CalibrationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["mean_confidence", "empirical_accuracy", "count"])
    for row in reliability_curve(report):
        writer.writerow(row)
    return buf.getvalue()
