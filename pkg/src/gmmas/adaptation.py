"""Three-stage adaptation for missing-modality robustness.

Stage 1: dual-pathway knowledge self-distillation.  A full-modality pass and
a modality-dropped pass share parameters; feature MSE at three deep
supervision points (first/last encoder convolutions, first decoder
convolution) pulls the partial pathway toward detached full-pathway targets,
while both pathways keep segmentation supervision.

Stage 2: SimSiam contrastive fine-tuning over random modality-subset pairs
with stop-gradient on the projector targets.

Stage 3: supervised fine-tuning with the convolutional encoder frozen.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ValidationError
from .losses import dice_loss
from .network import GliomaMultiTaskNet, presence_tensor
from .volumes import N_MODALITIES

#: the 10 legal dropout patterns: drop one (4) or two (6) of four modalities
LEGAL_DROP_SETS = [frozenset(c) for c in itertools.combinations(range(N_MODALITIES), 1)] + [
    frozenset(c) for c in itertools.combinations(range(N_MODALITIES), 2)
]

DISTILL_TAPS = ("encoder_first", "encoder_last", "decoder_first")


@dataclass(frozen=True)
class ModalityMask:
    """Presence vector with one or two modalities dropped."""

    present: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        n_present = sum(self.present)
        if n_present < 2:
            raise ValidationError("at least two modalities must remain present")
        if len(self.present) != N_MODALITIES:
            raise ValidationError("presence vector must have 4 entries")

    @property
    def dropped(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.present) if not p)

    @classmethod
    def dropping(cls, *indices: int) -> "ModalityMask":
        return cls(tuple(i not in indices for i in range(N_MODALITIES)))


ALL_PRESENT = ModalityMask((True,) * N_MODALITIES)


def sample_modality_dropout(rng: np.random.Generator) -> ModalityMask:
    """Uniform draw over the 10 single- and double-drop patterns."""
    drop = LEGAL_DROP_SETS[int(rng.integers(0, len(LEGAL_DROP_SETS)))]
    return ModalityMask.dropping(*drop)


def apply_modality_mask(x: torch.Tensor, mask: ModalityMask) -> torch.Tensor:
    """Zero-fill dropped modality planes (the merge also excludes them)."""
    out = x.clone()
    for m in mask.dropped:
        out[:, m] = 0.0
    return out


@dataclass
class AdaptationConfig:
    stage1_epochs: int = 2
    stage2_epochs: int = 2
    stage3_epochs: int = 2
    distill_weight: float = 1.0
    contrastive_lr: float = 1e-3
    projector_dims: tuple[int, int, int] = (128, 128, 64)
    predictor_hidden: int = 32
    symmetric_distill_gradients: bool = False


def distillation_step(model: GliomaMultiTaskNet, x: torch.Tensor, presence: torch.Tensor,
                      mask_labels: torch.Tensor, modality_mask: ModalityMask,
                      distill_weight: float = 1.0,
                      symmetric_gradients: bool = False) -> tuple[torch.Tensor, dict]:
    """Dual-pathway step: feature MSE at the deep-supervision taps plus Dice
    supervision for both pathways.

    The volume must carry all four modalities so the full pathway is
    computable; full-pathway features are detached targets unless
    ``symmetric_gradients`` is set.  Returns (total loss, term dict).
    """
    if not bool(presence.all()):
        raise ValidationError("distillation requires a volume with all modalities present")
    full_out = model(x, presence)
    partial_x = apply_modality_mask(x, modality_mask)
    partial_presence = presence_tensor(modality_mask.present, batch=x.shape[0])
    partial_out = model(partial_x, partial_presence)

    terms: dict[str, float] = {}
    mse_total = None
    for tap in DISTILL_TAPS:
        target = full_out["taps"][tap]
        if not symmetric_gradients:
            target = target.detach()
        mse = F.mse_loss(partial_out["taps"][tap], target)
        terms[f"mse_{tap}"] = float(mse)
        mse_total = mse if mse_total is None else mse_total + mse

    dice_full = dice_loss(full_out["seg_probs"], mask_labels)
    dice_partial = dice_loss(partial_out["seg_probs"], mask_labels)
    terms["dice_full"] = float(dice_full)
    terms["dice_partial"] = float(dice_partial)
    total = distill_weight * mse_total + dice_full + dice_partial
    return total, terms


# ---------------------------------------------------------------------------
# SimSiam contrastive stage


class SiameseHeads(nn.Module):
    """Projector (3 linear layers with normalization) and 2-layer predictor.

    Both contrastive branches run the same encoder instance, so weight
    sharing is structural rather than copied.
    """

    def __init__(self, in_dim: int, projector_dims=(128, 128, 64), predictor_hidden: int = 32):
        super().__init__()
        d1, d2, d3 = projector_dims
        # LayerNorm keeps the heads batch-size agnostic (CPU runs use batch 1)
        self.projector = nn.Sequential(
            nn.Linear(in_dim, d1), nn.LayerNorm(d1), nn.ReLU(inplace=True),
            nn.Linear(d1, d2), nn.LayerNorm(d2), nn.ReLU(inplace=True),
            nn.Linear(d2, d3), nn.LayerNorm(d3),
        )
        self.predictor = nn.Sequential(
            nn.Linear(d3, predictor_hidden), nn.LayerNorm(predictor_hidden),
            nn.ReLU(inplace=True), nn.Linear(predictor_hidden, d3),
        )

    def forward(self, pooled: torch.Tensor):
        z = self.projector(pooled)
        p = self.predictor(z)
        return z, p


def negative_cosine_pair(z1: torch.Tensor, p1: torch.Tensor,
                         z2: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    """Symmetric negative cosine: -(cos(z1, p2) + cos(z2, p1)) / 2.

    Projector outputs are stop-gradient targets; the value is invariant to
    positive rescaling of any argument.
    """
    c1 = F.cosine_similarity(z1.detach(), p2, dim=-1)
    c2 = F.cosine_similarity(z2.detach(), p1, dim=-1)
    return -0.5 * (c1 + c2).mean()


def split_modalities(present_indices, rng: np.random.Generator):
    """Random partition of the present modalities into two non-empty groups."""
    present = list(present_indices)
    if len(present) < 2:
        raise ValidationError("need at least two present modalities to split")
    while True:
        side = rng.integers(0, 2, size=len(present))
        if 0 < side.sum() < len(present):
            break
    a = [m for m, s in zip(present, side) if s == 0]
    b = [m for m, s in zip(present, side) if s == 1]
    return a, b


def simsiam_step(model: GliomaMultiTaskNet, heads: SiameseHeads, x: torch.Tensor,
                 presence_flags, rng: np.random.Generator) -> torch.Tensor:
    """Contrastive loss between two random modality groups of one volume."""
    present = [i for i, p in enumerate(presence_flags) if p]
    group_a, group_b = split_modalities(present, rng)

    def branch(group):
        keep = ModalityMask.dropping(*(set(range(N_MODALITIES)) - set(group))) \
            if len(group) >= 2 else None
        xa = x.clone()
        for m in range(N_MODALITIES):
            if m not in group:
                xa[:, m] = 0.0
        pres = presence_tensor([m in group for m in range(N_MODALITIES)], batch=x.shape[0])
        pooled = model.encode_pooled(xa, pres)
        return heads(pooled)

    z1, p1 = branch(group_a)
    z2, p2 = branch(group_b)
    return negative_cosine_pair(z1, p1, z2, p2)


# ---------------------------------------------------------------------------
# orchestration


def encoder_conv_parameters(model: GliomaMultiTaskNet) -> dict[str, torch.Tensor]:
    """Named convolutional encoder parameters (the stage-3 freeze set)."""
    out = {}
    for name, p in model.encoder.named_parameters():
        out[f"encoder.{name}"] = p
    if model.global_branch is not None:
        for name, p in model.global_branch.encoder.named_parameters():
            out[f"global_branch.encoder.{name}"] = p
    return out


def freeze_audit(before: dict[str, np.ndarray], model: GliomaMultiTaskNet) -> dict:
    """Byte-compare the frozen set against a snapshot; returns an audit dict."""
    changed = []
    for name, p in encoder_conv_parameters(model).items():
        if not np.array_equal(before[name], p.detach().numpy()):
            changed.append(name)
    return {"frozen_parameters": len(before), "changed": changed, "passed": not changed}


def run_adaptation(trainer, samples, config: AdaptationConfig, rng_seed: int = 0):
    """Stage 1 (distillation) -> stage 2 (contrastive) -> stage 3 (frozen-encoder
    fine-tune).  Stages must run in order; the freeze audit for stage 3 is
    returned and logged through the trainer.
    """
    from .network import volume_tensor

    rng = np.random.default_rng(rng_seed)
    model = trainer.model
    stages_done = []

    # stage 1: knowledge self-distillation over random modality drops
    opt = trainer.optimizer
    batch = max(trainer.config.batch_size, 1)
    full = [s for s in samples if all(s.volume.modality_presence) and s.mask is not None]
    if not full:
        raise ConfigurationError("stage 1 needs full-modality samples with masks")
    model.train()
    for _ in range(config.stage1_epochs):
        order = rng.permutation(len(full))
        for start in range(0, len(order), batch):
            chunk = [full[j] for j in order[start : start + batch]]
            opt.zero_grad()
            total = None
            for s in chunk:
                x = volume_tensor(s.volume.voxels)
                pres = presence_tensor(s.volume.modality_presence)
                m = sample_modality_dropout(rng)
                labels = torch.from_numpy(np.ascontiguousarray(s.mask.labels)).long()[None]
                loss, terms = distillation_step(
                    model, x, pres, labels, m,
                    distill_weight=config.distill_weight,
                    symmetric_gradients=config.symmetric_distill_gradients,
                )
                total = loss if total is None else total + loss
            (total / len(chunk)).backward()
            opt.step()
            trainer.log({"stage": "adapt1", "loss": float(total) / len(chunk)})
    stages_done.append("distill")

    # stage 2: contrastive fine-tuning (encoder convolutions carried over)
    heads = SiameseHeads(
        model.config.bottleneck_channels, config.projector_dims, config.predictor_hidden
    )
    opt2 = torch.optim.SGD(
        list(model.encoder.parameters()) + list(heads.parameters()),
        lr=config.contrastive_lr, momentum=0.9,
    )
    model.train()
    heads.train()
    for _ in range(config.stage2_epochs):
        order = rng.permutation(len(full))
        for j in order:
            s = full[j]
            x = volume_tensor(s.volume.voxels)
            opt2.zero_grad()
            loss = simsiam_step(model, heads, x, s.volume.modality_presence, rng)
            loss.backward()
            opt2.step()
            trainer.log({"stage": "adapt2", "cl_loss": float(loss)})
    stages_done.append("contrastive")

    # stage 3: supervised fine-tune with encoder convolutions frozen
    frozen = encoder_conv_parameters(model)
    snapshot = {k: p.detach().numpy().copy() for k, p in frozen.items()}
    for p in frozen.values():
        p.requires_grad_(False)
    trainer.rebuild_optimizer()
    for _ in range(config.stage3_epochs):
        trainer.train_epochs(samples, 1, modality_dropout_rng=rng)
    for p in frozen.values():
        p.requires_grad_(True)
    trainer.rebuild_optimizer()
    audit = freeze_audit(snapshot, model)
    trainer.log({"stage": "adapt3", "freeze_audit": audit})
    if not audit["passed"]:
        raise ConfigurationError(f"freeze audit failed: {audit['changed'][:5]}")
    stages_done.append("finetune")
    trainer.record_stage("adapt")
    return trainer, audit
