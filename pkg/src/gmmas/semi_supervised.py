"""Two-stage semi-supervised engine.

Stage 1 selects pseudo classification labels with a dual threshold: a case's
task prediction is accepted iff its epistemic uncertainty is at most tau_u
AND its distribution-aligned confidence is at least tau_c (both inclusive).
Accepted labels merge into the labeled pool for self-training rounds.

Stage 2 trains weak-to-strong consistency against an EMA teacher, with the
student additionally classified through two complementary channel-dropout
feature streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import Sample, strong_augment, weak_augment
from .calibration import mc_dropout_predict
from .errors import ValidationError
from .losses import weighted_cross_entropy
from .network import presence_tensor, volume_tensor
from .volumes import CaseLabels, TASKS


@dataclass
class SSLConfig:
    tau_u: float = 0.1
    tau_c: float = 0.95
    mc_passes: int = 20
    ema_decay: float = 0.99
    unsupervised_weight: float = 1.0
    feature_dropout_rate: float = 0.5
    running_decay: float = 0.99
    stage1_rounds: int = 2
    stage1_epochs: int = 2
    stage2_epochs: int = 2
    window: tuple[int, int, int] | None = None
    target_dists: dict = field(default_factory=dict)   # task -> [2]; empty -> labeled empirical

    def __post_init__(self):
        for name in ("tau_u", "tau_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("ema_decay", "running_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.feature_dropout_rate < 1.0:
            raise ValidationError("feature_dropout_rate must lie in [0, 1)")


def align_distribution(probs, target_dist, running_dist) -> np.ndarray:
    """Rescale class probabilities by target/running ratios and renormalize."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target_dist, dtype=np.float64)
    r = np.asarray(running_dist, dtype=np.float64)
    for name, v in (("probs", p), ("target_dist", t), ("running_dist", r)):
        if abs(v.sum() - 1.0) > 1e-6 or (v < 0).any():
            raise ValidationError(f"{name} must be a normalized distribution, got {v}")
    if (r <= 0).any():
        raise ValidationError("running distribution must be strictly positive")
    q = p * (t / r)
    return q / q.sum()


@dataclass
class PseudoLabelEntry:
    case_id: str
    task: str
    probs: np.ndarray          # aligned probabilities
    confidence: float
    uncertainty: float
    decision: str              # accepted | rejected
    label: int | None

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "task": self.task,
            "probs": [float(v) for v in self.probs],
            "confidence": self.confidence,
            "uncertainty": self.uncertainty,
            "decision": self.decision,
            "label": self.label,
        }


@dataclass
class PseudoLabelPool:
    entries: list[PseudoLabelEntry] = field(default_factory=list)

    def accepted(self) -> list[PseudoLabelEntry]:
        return [e for e in self.entries if e.decision == "accepted"]

    def acceptance_rate(self) -> float:
        return len(self.accepted()) / len(self.entries) if self.entries else 0.0

    def labels_by_case(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for e in self.accepted():
            out.setdefault(e.case_id, {})[e.task] = int(e.label)
        return out

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e.to_record()) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "PseudoLabelPool":
        entries = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            entries.append(
                PseudoLabelEntry(
                    case_id=r["case_id"],
                    task=r["task"],
                    probs=np.asarray(r["probs"]),
                    confidence=r["confidence"],
                    uncertainty=r["uncertainty"],
                    decision=r["decision"],
                    label=r["label"],
                )
            )
        return cls(entries=entries)


def gate_decision(uncertainty: float, confidence: float, config: SSLConfig) -> bool:
    """Dual-threshold acceptance; both comparisons are inclusive."""
    return uncertainty <= config.tau_u and confidence >= config.tau_c


def select_pseudo_labels(candidates, config: SSLConfig,
                         running_dists: dict | None = None) -> PseudoLabelPool:
    """Evaluate (case_id, task, probs, uncertainty) candidates against the gate.

    Probabilities are distribution-aligned before thresholding when both a
    target and a running distribution are known for the task; each task is
    decided independently.
    """
    running_dists = running_dists or {}
    entries = []
    for cand in candidates:
        case_id, task, probs, unc = (
            cand["case_id"], cand["task"], np.asarray(cand["probs"], dtype=np.float64),
            float(cand["uncertainty"]),
        )
        target = config.target_dists.get(task)
        running = running_dists.get(task)
        aligned = (
            align_distribution(probs, target, running)
            if target is not None and running is not None
            else probs
        )
        conf = float(aligned.max())
        ok = gate_decision(unc, conf, config)
        entries.append(
            PseudoLabelEntry(
                case_id=case_id,
                task=task,
                probs=aligned,
                confidence=conf,
                uncertainty=unc,
                decision="accepted" if ok else "rejected",
                label=int(aligned.argmax()) if ok else None,
            )
        )
    return PseudoLabelPool(entries=entries)


# ---------------------------------------------------------------------------
# EMA teacher


@dataclass
class TeacherState:
    """Frozen EMA copy of the student plus running prediction distributions."""

    model: torch.nn.Module
    decay: float
    running_dist: dict[str, np.ndarray] = field(default_factory=dict)

    def update_running(self, task: str, probs: np.ndarray, decay: float) -> None:
        probs = np.asarray(probs, dtype=np.float64)
        prev = self.running_dist.get(task)
        cur = probs if prev is None else decay * prev + (1 - decay) * probs
        self.running_dist[task] = cur / cur.sum()


def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, decay: float) -> None:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise.

    Float buffers (batch-norm statistics) follow the same rule; integer
    buffers are copied from the student.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValidationError(f"decay must lie in [0, 1], got {decay}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValidationError("teacher/student parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise ValidationError(f"shape mismatch for '{name}': {tp.shape} vs {sp.shape}")
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)
        for (name, tb), sb in zip(teacher.named_buffers(), student.buffers()):
            if tb.dtype.is_floating_point:
                tb.mul_(decay).add_(sb, alpha=1.0 - decay)
            else:
                tb.copy_(sb)


def make_teacher(student: torch.nn.Module, decay: float) -> TeacherState:
    import copy

    model = copy.deepcopy(student)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return TeacherState(model=model, decay=decay)


# ---------------------------------------------------------------------------
# complementary feature dropout


def complementary_feature_dropout(features: torch.Tensor, rate: float,
                                  generator: torch.Generator):
    """Split channels into two disjoint inverted-dropout streams.

    ``stream_a = features * m / rate`` and ``stream_b = features * (1-m) /
    (1-rate)`` with ``m ~ Bernoulli(rate)`` over the channel axis, so
    ``stream_a * rate + stream_b * (1 - rate)`` reconstructs the input.
    """
    if not 0.0 < rate < 1.0:
        raise ValidationError(f"rate must lie in (0, 1), got {rate}")
    channels = features.shape[0] if features.dim() == 1 else features.shape[1]
    m = torch.bernoulli(torch.full((channels,), rate), generator=generator)
    if features.dim() == 1:
        scale_a, scale_b = m / rate, (1.0 - m) / (1.0 - rate)
    else:
        shape = [1, channels] + [1] * (features.dim() - 2)
        scale_a = (m / rate).view(shape)
        scale_b = ((1.0 - m) / (1.0 - rate)).view(shape)
    return features * scale_a, features * scale_b


# ---------------------------------------------------------------------------
# stage 2: weak-to-strong consistency


def stage2_step(student, teacher: TeacherState, batch: list[Sample], config: SSLConfig,
                rng: np.random.Generator, torch_generator: torch.Generator):
    """Consistency loss for one unlabeled batch.

    The teacher predicts on weak augmentations; aligned predictions passing
    the confidence gate become one-hot targets.  The student sees strong
    augmentations and is supervised on both complementary feature streams.
    Returns (loss tensor or None, stats dict).
    """
    if not batch:
        return None, {"n_gated": 0}
    weak = [weak_augment(s, rng, config.window) for s in batch]
    targets: list[dict[str, np.ndarray | None]] = []
    teacher.model.eval()
    with torch.no_grad():
        for s in weak:
            out = teacher.model(
                volume_tensor(s.volume.voxels), presence_tensor(s.volume.modality_presence)
            )
            per_task = {}
            for task in TASKS:
                probs = out["class_probs"][task][0].numpy().astype(np.float64)
                teacher.update_running(task, probs, config.running_decay)
                target = config.target_dists.get(task)
                running = teacher.running_dist.get(task)
                aligned = (
                    align_distribution(probs, target, running)
                    if target is not None and running is not None and (running > 0).all()
                    else probs
                )
                if float(aligned.max()) >= config.tau_c:
                    one_hot = np.zeros(2)
                    one_hot[int(aligned.argmax())] = 1.0
                    per_task[task] = one_hot
                else:
                    per_task[task] = None
            targets.append(per_task)

    n_gated = sum(1 for t in targets for v in t.values() if v is not None)
    if n_gated == 0:
        return None, {"n_gated": 0}

    donors = [s for s in batch if s.mask is not None and (s.mask.labels > 0).any()]
    losses = []
    for i, s in enumerate(batch):
        donor = donors[int(rng.integers(0, len(donors)))] if donors else None
        strong = strong_augment(s, rng, config.window, donor=donor)
        x = volume_tensor(strong.volume.voxels)
        pres = presence_tensor(strong.volume.modality_presence)
        out_a, out_b = student.forward_two_stream(
            x, pres, config.feature_dropout_rate, torch_generator
        )
        for task, tgt in targets[i].items():
            if tgt is None:
                continue
            for (_, probs) in (out_a, out_b):
                losses.append(weighted_cross_entropy(probs[task][0], tgt))
    loss = torch.stack([l for l in losses if l is not None]).mean()
    return loss, {"n_gated": n_gated, "n_terms": len(losses)}


# ---------------------------------------------------------------------------
# full two-stage driver


def labeled_class_distributions(samples: list[Sample]) -> dict[str, np.ndarray]:
    """Empirical per-task label distributions over a labeled sample list."""
    dists = {}
    for task in TASKS:
        counts = np.zeros(2)
        for s in samples:
            v = s.labels.as_dict().get(task)
            if v is not None:
                counts[int(v)] += 1
        if counts.sum() > 0:
            dists[task] = counts / counts.sum()
    return dists


def collect_candidates(model, samples: list[Sample], mc_passes: int,
                       seed: int = 0) -> list[dict]:
    """MC-dropout predictions for every (case, task) of an unlabeled list."""
    out = []
    for i, s in enumerate(samples):
        mc = mc_dropout_predict(
            model, volume_tensor(s.volume.voxels),
            presence_tensor(s.volume.modality_presence), M=mc_passes, seed=seed + i,
        )
        for task in TASKS:
            out.append(
                {
                    "case_id": s.case_id,
                    "task": task,
                    "probs": mc.mean[task],
                    "uncertainty": mc.uncertainty[task],
                }
            )
    return out


def merge_pseudo_labels(unlabeled: list[Sample], pool: PseudoLabelPool) -> list[Sample]:
    """Unlabeled samples re-labeled with their accepted pseudo labels."""
    by_case = pool.labels_by_case()
    merged = []
    for s in unlabeled:
        accepted = by_case.get(s.case_id)
        if not accepted:
            continue
        merged.append(Sample(volume=s.volume, mask=s.mask, labels=CaseLabels.from_dict(accepted)))
    return merged


def run_two_stage_ssl(trainer, labeled: list[Sample], unlabeled: list[Sample],
                      config: SSLConfig):
    """Stage-1 self-training rounds followed by stage-2 consistency training.

    ``trainer`` owns the student model/optimizer (see ``training.Trainer``).
    Returns (trainer, pool_history); with no unlabeled data this degenerates
    to continued supervised training.
    """
    pool_history: list[PseudoLabelPool] = []
    if not config.target_dists:
        config.target_dists = {
            t: d for t, d in labeled_class_distributions(labeled).items()
        }

    if not unlabeled:
        for _ in range(config.stage1_rounds):
            trainer.train_epochs(labeled, config.stage1_epochs)
        trainer.train_epochs(labeled, config.stage2_epochs)
        trainer.record_stage("ssl")
        return trainer, pool_history

    # stage 1: dual-threshold pseudo-labeling + self-training rounds
    merged = list(labeled)
    for _ in range(config.stage1_rounds):
        candidates = collect_candidates(
            trainer.model, unlabeled, config.mc_passes, seed=trainer.seed
        )
        running = {
            task: np.mean(
                [c["probs"] for c in candidates if c["task"] == task], axis=0
            )
            for task in TASKS
        }
        running = {t: r / r.sum() for t, r in running.items() if np.all(np.asarray(r) > 0)}
        pool = select_pseudo_labels(candidates, config, running_dists=running)
        pool_history.append(pool)
        merged = list(labeled) + merge_pseudo_labels(unlabeled, pool)
        trainer.train_epochs(merged, config.stage1_epochs)

    # stage 2: EMA-teacher weak-to-strong consistency
    teacher = make_teacher(trainer.model, config.ema_decay)
    for task, dist in config.target_dists.items():
        teacher.running_dist[task] = np.asarray(dist, dtype=np.float64)
    rng = np.random.default_rng(trainer.seed + 77)
    torch_gen = torch.Generator().manual_seed(trainer.seed + 78)
    batch = max(trainer.config.batch_size, 1)
    for _ in range(config.stage2_epochs):
        order = rng.permutation(len(unlabeled))
        for start in range(0, len(order), batch):
            chunk = [unlabeled[j] for j in order[start : start + batch]]
            sup_batch = [
                merged[j] for j in rng.integers(0, len(merged), size=min(batch, len(merged)))
            ]
            unsup_loss, stats = stage2_step(
                trainer.model, teacher, chunk, config, rng, torch_gen
            )
            extra = None
            if unsup_loss is not None:
                extra = config.unsupervised_weight * unsup_loss
            trainer.step(sup_batch, extra_loss=extra,
                         extras={"ssl_gated": float(stats["n_gated"])})
            ema_update(teacher.model, trainer.model, config.ema_decay)
    trainer.teacher = teacher
    trainer.record_stage("ssl")
    return trainer, pool_history
