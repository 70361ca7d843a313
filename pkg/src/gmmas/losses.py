"""Segmentation and classification losses plus the uncertainty-weighted
multi-task objective.

Task weights are trainable noise scales sigma, parameterized as
``s = log(sigma^2)`` so positivity is structural.  Each supervised task
contributes ``L / (2 sigma^2) + log(sigma)``; tasks without supervision in a
batch contribute exactly zero (and their sigma receives no gradient).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import TrainingStepError, ValidationError
from .volumes import N_SEG_CLASSES, TASKS

#: loss bookkeeping keys: segmentation plus the four classification tasks
LOSS_TASKS = ("seg",) + TASKS

_LOG_EPS = 1e-12


def dice_loss(seg_probs: torch.Tensor, mask: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss averaged over the four classes.

    ``seg_probs`` is [4, H, W, D] or [B, 4, H, W, D] softmax output; ``mask``
    holds integer labels of matching spatial shape.  Batch entries pool into
    the per-class voxel sums.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    if seg_probs.dim() == 4:
        seg_probs = seg_probs[None]
        mask = mask[None]
    if seg_probs.shape[1] != N_SEG_CLASSES or seg_probs.shape[2:] != mask.shape[1:]:
        raise ValidationError(
            f"shape mismatch: probs {tuple(seg_probs.shape)} vs mask {tuple(mask.shape)}"
        )
    one_hot = torch.nn.functional.one_hot(mask.long(), N_SEG_CLASSES)
    one_hot = one_hot.permute(0, 4, 1, 2, 3).to(seg_probs.dtype)
    dims = (0, 2, 3, 4)
    intersect = (seg_probs * one_hot).sum(dim=dims)
    denom = seg_probs.sum(dim=dims) + one_hot.sum(dim=dims) + epsilon
    return 1.0 - (2.0 / N_SEG_CLASSES) * (intersect / denom).sum()


def class_weights_from_counts(counts, literal_frequency: bool = False) -> torch.Tensor:
    """Per-class weights from training-split counts.

    Default is inverse frequency ``sum(n) / (C * n_i)`` (mean 1 under the
    class distribution).  ``literal_frequency`` selects ``n_i / sum(n)``
    instead, which up-weights majority classes; kept for comparison.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ValidationError(f"every class needs at least one training sample, got {counts}")
    total = counts.sum()
    if literal_frequency:
        w = counts / total
    else:
        w = total / (len(counts) * counts)
    return torch.tensor(w, dtype=torch.float64)


def weighted_cross_entropy(
    probs: torch.Tensor,
    targets,
    class_weights: torch.Tensor | None = None,
) -> torch.Tensor | None:
    """Class-weighted cross-entropy over probability vectors.

    ``probs`` is [2] or [B, 2]; ``targets`` is a matching array of soft label
    vectors in which a row of NaNs marks a missing label.  Missing rows are
    excluded from the batch mean; returns None when nothing is supervised.
    """
    if probs.dim() == 1:
        probs = probs[None]
    targets = torch.as_tensor(np.asarray(targets, dtype=np.float64), dtype=probs.dtype)
    if targets.dim() == 1:
        targets = targets[None]
    if targets.shape != probs.shape:
        raise ValidationError(
            f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}"
        )
    supervised = ~torch.isnan(targets).any(dim=1)
    if not bool(supervised.any()):
        return None
    probs = probs[supervised]
    targets = targets[supervised]
    w = torch.ones(probs.shape[1], dtype=probs.dtype)
    if class_weights is not None:
        w = class_weights.to(probs.dtype)
    logp = torch.log(torch.clamp(probs, min=_LOG_EPS))
    loss = -(w[None, :] * targets * logp).sum(dim=1)
    return loss.mean()


#: stability band for the learned noise scales; a task whose loss drops far
#: below sigma_min^2 would otherwise amplify its gradients without bound and
#: crowd out the other tasks on shared parameters
SIGMA_MIN = 0.5
SIGMA_MAX = 4.0


class TaskUncertainties(nn.Module):
    """Trainable per-task noise scales, stored as log-variances."""

    def __init__(self, tasks=LOSS_TASKS, sigma_bounds=(SIGMA_MIN, SIGMA_MAX)):
        super().__init__()
        self.tasks = tuple(tasks)
        self.sigma_bounds = sigma_bounds
        self.log_var = nn.ParameterDict(
            {t: nn.Parameter(torch.zeros((), dtype=torch.float64)) for t in self.tasks}
        )

    def _bounded(self, task: str) -> torch.Tensor:
        lo, hi = self.sigma_bounds
        return self.log_var[task].clamp(2 * np.log(lo), 2 * np.log(hi))

    def sigma(self, task: str) -> torch.Tensor:
        return torch.exp(0.5 * self._bounded(task))

    def sigmas(self) -> dict[str, float]:
        return {t: float(self.sigma(t)) for t in self.tasks}

    def weighted(self, task: str, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(effective, regularizer) = (L / 2 sigma^2, log sigma)."""
        s = self._bounded(task)
        return raw * torch.exp(-s) / 2.0, s / 2.0


@dataclass
class LossBreakdown:
    """Per-step loss accounting, serializable as one training-log line."""

    raw: dict[str, float]
    effective: dict[str, float]
    regularizers: dict[str, float]
    total: float
    supervised_counts: dict[str, int]
    cls_subtotal: float = 0.0
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "raw": self.raw,
                "effective": self.effective,
                "regularizers": self.regularizers,
                "cls_subtotal": self.cls_subtotal,
                "total": self.total,
                "supervised_counts": self.supervised_counts,
                **({"extras": self.extras} if self.extras else {}),
            }
        )


def multitask_loss(
    raw_losses: dict[str, torch.Tensor | None],
    uncertainties: TaskUncertainties,
    supervised_counts: dict[str, int] | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine per-task losses under uncertainty weighting.

    ``raw_losses`` maps task name to a scalar tensor or None (unsupervised
    this step).  The classification tasks form a nested subtotal that joins
    the segmentation term; unsupervised tasks contribute nothing and their
    sigma receives no gradient.  Raises TrainingStepError on a non-finite raw
    loss.
    """
    supervised_counts = supervised_counts or {}
    raw, eff, reg = {}, {}, {}
    total = None
    cls_subtotal = 0.0
    for task in uncertainties.tasks:
        L = raw_losses.get(task)
        if L is None:
            raw[task] = None
            eff[task] = 0.0
            reg[task] = 0.0
            continue
        if not torch.isfinite(L):
            raise TrainingStepError(task)
        e, r = uncertainties.weighted(task, L)
        term = e + r
        total = term if total is None else total + term
        raw[task] = float(L.detach())
        eff[task] = float(e.detach())
        reg[task] = float(r.detach())
        if task != "seg":
            cls_subtotal += float(e.detach()) + float(r.detach())
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    breakdown = LossBreakdown(
        raw=raw,
        effective=eff,
        regularizers=reg,
        total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total),
        supervised_counts={t: int(supervised_counts.get(t, 0)) for t in uncertainties.tasks},
        cls_subtotal=cls_subtotal,
    )
    return total, breakdown
