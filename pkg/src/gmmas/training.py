"""Training orchestration: run configuration, the supervised trainer,
checkpointing, JSONL logging, and evaluation over sample lists.

A run is reproducible from (RunConfig, seed): model init, shuffling,
augmentation and dropout all derive from the configured seed, and
checkpoints carry optimizer plus RNG state so training resumes
bit-compatibly on the same platform.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptation import AdaptationConfig, ModalityMask, apply_modality_mask
from .augment import AugmentationPolicy, MixedSample, Sample, training_targets
from .calibration import mc_dropout_predict
from .errors import ConfigurationError, TrainingStepError, ValidationError
from .losses import (
    LOSS_TASKS,
    LossBreakdown,
    TaskUncertainties,
    class_weights_from_counts,
    dice_loss,
    multitask_loss,
    weighted_cross_entropy,
)
from .network import (
    GliomaMultiTaskNet,
    NetworkConfig,
    config_fingerprint,
    presence_tensor,
)
from .postprocess import FilterParams, build_evaluation_report, dice_score, tumor_filter
from .semi_supervised import SSLConfig
from .volumes import (
    DatasetManifest,
    SegmentationMask,
    TASKS,
    load_mask,
    load_volume,
)


@dataclass
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: str = "none"          # none | cosine
    #: spike guard only; tight clipping starves the small classifier gradients
    grad_clip: float = 10.0         # max grad norm; 0 disables
    #: classification logits grow at roughly lr per Adam step, so the heads
    #: need a faster clock than the feature extractor to saturate within a
    #: desk-scale step budget
    head_lr_multiplier: float = 8.0

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer.name must be 'sgd' or 'adam', got '{self.name}'")
        if self.lr <= 0:
            raise ConfigurationError(f"optimizer.lr must be positive, got {self.lr}")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigurationError(f"optimizer.lr_decay must be 'none' or 'cosine'")


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 2
    network: NetworkConfig = field(default_factory=NetworkConfig.toy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    policy: AugmentationPolicy | None = None
    ssl: SSLConfig = field(default_factory=SSLConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    tasks: tuple[str, ...] = LOSS_TASKS
    uncertainty_weighting: bool = True
    literal_class_weights: bool = False
    global_aux_weight: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        unknown = set(self.tasks) - set(LOSS_TASKS)
        if unknown:
            raise ConfigurationError(f"unknown tasks {sorted(unknown)}; valid: {LOSS_TASKS}")

    def to_json(self) -> str:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["policy"] = None if self.policy is None else json.loads(self.policy.to_json())
        d["ssl"]["target_dists"] = {
            k: [float(x) for x in v] for k, v in self.ssl.target_dists.items()
        }
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            if "network" in d:
                d["network"] = NetworkConfig.from_dict(d["network"])
            if "optimizer" in d:
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            if d.get("policy") is not None:
                d["policy"] = AugmentationPolicy.from_json(json.dumps(d["policy"]))
            if "ssl" in d:
                ssl = dict(d["ssl"])
                if ssl.get("window"):
                    ssl["window"] = tuple(ssl["window"])
                if "target_dists" in ssl:
                    ssl["target_dists"] = {
                        k: np.asarray(v) for k, v in ssl["target_dists"].items()
                    }
                d["ssl"] = SSLConfig(**ssl)
            if "adaptation" in d:
                ad = dict(d["adaptation"])
                if "projector_dims" in ad:
                    ad["projector_dims"] = tuple(ad["projector_dims"])
                d["adaptation"] = AdaptationConfig(**ad)
            if "tasks" in d:
                d["tasks"] = tuple(d["tasks"])
            return cls(**d)
        except (TypeError, ValidationError) as exc:
            raise ConfigurationError(f"invalid run config: {exc}") from exc


# ---------------------------------------------------------------------------
# dataset loading


def samples_from_manifest(manifest: DatasetManifest, split: str) -> list[Sample]:
    out = []
    for entry in manifest.split(split):
        volume = load_volume(manifest.resolve(entry.volume_path))
        mask = None
        if entry.mask_path:
            mask = load_mask(manifest.resolve(entry.mask_path))
        out.append(Sample(volume=volume, mask=mask, labels=entry.labels))
    return out


def class_counts(samples: list[Sample]) -> dict[str, np.ndarray]:
    counts = {t: np.zeros(2, dtype=int) for t in TASKS}
    for s in samples:
        for t, v in s.labels.as_dict().items():
            if v is not None:
                counts[t][int(v)] += 1
    return counts


def _downsample_labels(labels: torch.Tensor) -> torch.Tensor:
    return labels[:, ::2, ::2, ::2]


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the model, task uncertainties, optimizer, and the training log."""

    def __init__(self, config: RunConfig, class_weight_counts: dict | None = None):
        self.config = config
        self.seed = config.seed
        torch.manual_seed(config.seed)
        self.model = GliomaMultiTaskNet(config.network)
        self.uncertainties = TaskUncertainties()
        self.optimizer = self._build_optimizer()
        self.rng = np.random.default_rng(config.seed)
        self.teacher = None
        self.stages: list[str] = ["init"]
        self.global_step = 0
        self.sample_counter = 0
        self.epoch_counter = 0
        self.class_weights: dict[str, torch.Tensor] = {}
        if class_weight_counts:
            self.set_class_weights(class_weight_counts)
        self._log_file = None
        if config.out_dir:
            Path(config.out_dir).mkdir(parents=True, exist_ok=True)
            self._log_file = open(Path(config.out_dir) / "train_log.jsonl", "a")

    # -- setup ------------------------------------------------------------

    def _build_optimizer(self):
        oc = self.config.optimizer
        head_ids = {id(p) for p in self.model.classifier.parameters()}
        base = [
            p for p in self.model.parameters()
            if p.requires_grad and id(p) not in head_ids
        ]
        base += list(self.uncertainties.parameters())
        heads = [p for p in self.model.classifier.parameters() if p.requires_grad]
        groups = [
            {"params": base, "lr": oc.lr},
            {"params": heads, "lr": oc.lr * oc.head_lr_multiplier},
        ]
        if oc.name == "adam":
            return torch.optim.Adam(groups, lr=oc.lr, weight_decay=oc.weight_decay)
        return torch.optim.SGD(
            groups, lr=oc.lr, momentum=oc.momentum, weight_decay=oc.weight_decay
        )

    def rebuild_optimizer(self):
        self.optimizer = self._build_optimizer()

    def _apply_lr_schedule(self):
        oc = self.config.optimizer
        if oc.lr_decay != "cosine" or self.config.epochs <= 0:
            return
        frac = min(self.epoch_counter / self.config.epochs, 1.0)
        scale = 0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * frac))
        for group in self.optimizer.param_groups:
            base = group.setdefault("base_lr", group["lr"])
            group["lr"] = base * scale

    def set_class_weights(self, counts: dict) -> None:
        self.class_weights = {}
        for task, c in counts.items():
            c = np.asarray(c)
            if (c > 0).all():
                self.class_weights[task] = class_weights_from_counts(
                    c, literal_frequency=self.config.literal_class_weights
                )

    def fit_class_weights(self, samples: list[Sample]) -> None:
        self.set_class_weights(class_counts(samples))

    def record_stage(self, name: str) -> None:
        self.stages.append(name)

    def log(self, record: dict) -> None:
        if self._log_file is not None:
            self._log_file.write(json.dumps(record) + "\n")
            self._log_file.flush()

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # -- single optimization step ------------------------------------------

    def _batch_tensors(self, batch):
        shapes = {s.volume.shape for s in batch}
        if len(shapes) != 1:
            raise ValidationError(f"batch mixes volume shapes: {sorted(shapes)}")
        x = torch.tensor(
            np.stack([s.volume.voxels for s in batch]), dtype=torch.float32
        )
        presence = presence_tensor([s.volume.modality_presence for s in batch])
        return x, presence

    def step(self, batch, extra_loss: torch.Tensor | None = None,
             extras: dict | None = None) -> LossBreakdown:
        """One supervised step over an augmented batch (plus optional extra loss)."""
        self.model.train()
        self.optimizer.zero_grad()
        x, presence = self._batch_tensors(batch)
        out = self.model(x, presence)

        raw: dict[str, torch.Tensor | None] = {}
        counts: dict[str, int] = {}
        extras = dict(extras or {})

        if "seg" in self.config.tasks:
            with_mask = [i for i, s in enumerate(batch) if s.mask is not None]
            if with_mask:
                labels = torch.tensor(
                    np.stack([batch[i].mask.labels for i in with_mask]), dtype=torch.long
                )
                seg = dice_loss(out["seg_probs"][with_mask].double(), labels)
                if out["global_seg_logits"] is not None and self.config.global_aux_weight > 0:
                    gprobs = torch.softmax(out["global_seg_logits"][with_mask], dim=1)
                    gdice = dice_loss(gprobs.double(), _downsample_labels(labels))
                    extras["dice_global"] = float(gdice.detach())
                    seg = seg + self.config.global_aux_weight * gdice
                raw["seg"] = seg
                counts["seg"] = len(with_mask)
            else:
                raw["seg"] = None

        targets = [training_targets(s) for s in batch]
        for task in TASKS:
            if task not in self.config.tasks:
                continue
            rows = np.full((len(batch), 2), np.nan)
            for i, t in enumerate(targets):
                vec = t.get(task)
                if vec is not None:
                    rows[i] = vec
            n_sup = int((~np.isnan(rows).any(axis=1)).sum())
            counts[task] = n_sup
            raw[task] = weighted_cross_entropy(
                out["class_probs"][task].double(), rows, self.class_weights.get(task)
            )

        if self.config.uncertainty_weighting:
            total, breakdown = multitask_loss(raw, self.uncertainties, counts)
        else:
            total = None
            flat = {}
            for task, L in raw.items():
                if L is None:
                    flat[task] = None
                    continue
                if not torch.isfinite(L):
                    raise TrainingStepError(task)
                total = L if total is None else total + L
                flat[task] = float(L.detach())
            if total is None:
                total = torch.zeros((), dtype=torch.float64)
            breakdown = LossBreakdown(
                raw=flat,
                effective={t: (v or 0.0) for t, v in flat.items()},
                regularizers={t: 0.0 for t in flat},
                total=float(total.detach()),
                supervised_counts=counts,
            )

        if extra_loss is not None:
            total = total + extra_loss.double()
            extras["extra_loss"] = float(extra_loss.detach())
            breakdown.total = float(total.detach())
        breakdown.extras = extras
        if not torch.isfinite(total):
            raise TrainingStepError("total")
        total.backward()
        clip = self.config.optimizer.grad_clip
        if clip > 0:
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, clip)
        self.optimizer.step()
        self._last_class_probs = {
            t: p.detach().numpy() for t, p in out["class_probs"].items()
        }
        self.global_step += 1
        self.log(
            {
                "step": self.global_step,
                "loss": json.loads(breakdown.to_json()),
                "sigmas": self.uncertainties.sigmas(),
            }
        )
        return breakdown

    # -- epoch loops --------------------------------------------------------

    def train_epochs(self, samples: list[Sample], epochs: int,
                     modality_dropout_rng: np.random.Generator | None = None) -> None:
        if not samples:
            return
        if not self.class_weights:
            self.fit_class_weights(samples)
        batch_size = self.config.batch_size
        for _ in range(epochs):
            self._apply_lr_schedule()
            self.epoch_counter += 1
            order = self.rng.permutation(len(samples))
            epoch_correct = {t: 0 for t in TASKS}
            epoch_total = {t: 0 for t in TASKS}
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                batch = []
                for j in idx:
                    s = samples[j]
                    if self.config.policy is not None:
                        donor_j = int(self.rng.integers(0, len(samples)))
                        donor = samples[donor_j]
                        if donor.mask is None or not (donor.mask.labels > 0).any():
                            donor = None
                        s = self.config.policy.apply(s, self.sample_counter, donor=donor)
                    if modality_dropout_rng is not None and modality_dropout_rng.uniform() < 0.5:
                        s = _drop_modalities(s, modality_dropout_rng)
                    self.sample_counter += 1
                    batch.append(s)
                breakdown = self.step(batch)
                self._tally_accuracy(batch, epoch_correct, epoch_total)
            acc = {
                t: (epoch_correct[t] / epoch_total[t]) for t in TASKS if epoch_total[t]
            }
            self.log({"epoch_acc": acc, "sigmas": self.uncertainties.sigmas()})
            if self.config.out_dir:
                self.save_checkpoint(Path(self.config.out_dir) / "checkpoint_last.pt")

    def _tally_accuracy(self, batch, correct, total):
        # reuses the train-mode forward captured by the last step()
        probs = getattr(self, "_last_class_probs", None)
        if probs is None:
            return
        for i, s in enumerate(batch):
            for task, vec in training_targets(s).items():
                if vec is None:
                    continue
                pred = int(np.argmax(probs[task][i]))
                correct[task] += int(pred == int(np.argmax(vec)))
                total[task] += 1

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, samples: list[Sample], apply_filter: bool = False,
                 filter_params: FilterParams = FilterParams(),
                 modality_mask: ModalityMask | None = None,
                 mc_passes: int = 1) -> dict:
        """Per-case evaluation rows + aggregate report (dict with 'report')."""
        self.model.eval()
        rows = []
        for s in samples:
            x = torch.tensor(s.volume.voxels, dtype=torch.float32)[None]
            pres = presence_tensor(s.volume.modality_presence)
            if modality_mask is not None:
                x = apply_modality_mask(x, modality_mask)
                pres = presence_tensor(modality_mask.present)
            if mc_passes > 1:
                mc = mc_dropout_predict(self.model, x, pres, M=mc_passes, seed=self.seed)
                seg_probs = torch.from_numpy(mc.seg_probs_mean)[None]
                class_probs = {t: mc.mean[t] for t in TASKS}
                uncertainty = mc.uncertainty
            else:
                with torch.no_grad():
                    out = self.model(x, pres)
                seg_probs = out["seg_probs"]
                class_probs = {t: out["class_probs"][t][0].numpy() for t in TASKS}
                uncertainty = {t: 0.0 for t in TASKS}
            pred_mask = SegmentationMask(
                labels=seg_probs[0].argmax(dim=0).numpy().astype(np.uint8)
            )
            if apply_filter:
                pred_mask = tumor_filter(pred_mask, filter_params)
            row = {"case_id": s.case_id, "dice": {}, "tasks": {}, "uncertainty": uncertainty}
            if s.mask is not None:
                for region in ("whole", "core", "edema"):
                    row["dice"][region] = dice_score(pred_mask, s.mask, region)
            for task, v in s.labels.as_dict().items():
                if v is not None:
                    row["tasks"][task] = (float(class_probs[task][1]), int(v))
            row["class_probs"] = {t: [float(p) for p in class_probs[t]] for t in TASKS}
            rows.append(row)
        report = build_evaluation_report(rows)
        return {"report": report, "rows": rows}

    # -- checkpointing --------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        payload = {
            "format_version": 1,
            "network_config": self.config.network.to_dict(),
            "fingerprint": config_fingerprint(self.config.network),
            "model": self.model.state_dict(),
            "uncertainties": self.uncertainties.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "teacher": None
            if self.teacher is None
            else {
                "model": self.teacher.model.state_dict(),
                "decay": self.teacher.decay,
                "running_dist": {k: v.tolist() for k, v in self.teacher.running_dist.items()},
            },
            "stages": list(self.stages),
            "global_step": self.global_step,
            "sample_counter": self.sample_counter,
            "rng": {
                "torch": torch.get_rng_state(),
                "numpy": self.rng.bit_generator.state,
            },
            "run_config": self.config.to_json(),
        }
        fd, tmp = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
        os.close(fd)
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def from_checkpoint(cls, path, config: RunConfig | None = None,
                        strict_fingerprint: bool = True) -> "Trainer":
        payload = load_checkpoint(path)
        stored = RunConfig.from_json(payload["run_config"])
        if config is None:
            config = stored
        else:
            expected = config_fingerprint(config.network)
            if strict_fingerprint and expected != payload["fingerprint"]:
                raise ConfigurationError(
                    f"architecture fingerprint mismatch: checkpoint {payload['fingerprint']}, "
                    f"config {expected}"
                )
        trainer = cls(config)
        trainer.model.load_state_dict(payload["model"])
        trainer.uncertainties.load_state_dict(payload["uncertainties"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.stages = list(payload["stages"])
        trainer.global_step = payload["global_step"]
        trainer.sample_counter = payload.get("sample_counter", 0)
        if payload.get("teacher"):
            from .semi_supervised import make_teacher

            teacher = make_teacher(trainer.model, payload["teacher"]["decay"])
            teacher.model.load_state_dict(payload["teacher"]["model"])
            teacher.running_dist = {
                k: np.asarray(v) for k, v in payload["teacher"]["running_dist"].items()
            }
            trainer.teacher = teacher
        torch.set_rng_state(payload["rng"]["torch"])
        trainer.rng.bit_generator.state = payload["rng"]["numpy"]
        return trainer


def load_checkpoint(path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc


def _drop_modalities(sample: Sample, rng: np.random.Generator) -> Sample:
    from .adaptation import sample_modality_dropout

    mask = sample_modality_dropout(rng)
    vox = sample.volume.voxels.copy()
    for m in mask.dropped:
        vox[m] = 0.0
    from .volumes import MultimodalVolume

    volume = MultimodalVolume(
        voxels=vox,
        modality_presence=mask.present,
        spacing=sample.volume.spacing,
        case_id=sample.volume.case_id,
    )
    return Sample(volume=volume, mask=sample.mask, labels=sample.labels)
