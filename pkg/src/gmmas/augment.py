"""Augmentation suite: flips, tumor-protect crops, intensity ops, channel
shuffle, volumetric CutMix with proportional soft labels, and the weak/strong
policies used by consistency training.

All ops are pure functions of (sample, rng); :class:`AugmentationPolicy`
packages an ordered op list with per-op gate probabilities and is JSON
round-trippable so an experiment is reproducible from config alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .volumes import (
    CaseLabels,
    MultimodalVolume,
    SegmentationMask,
    N_MODALITIES,
    TASKS,
)


@dataclass(frozen=True)
class Sample:
    """One training case: volume + (optional) mask + per-task labels."""

    volume: MultimodalVolume
    mask: SegmentationMask | None = None
    labels: CaseLabels = field(default_factory=CaseLabels)

    @property
    def case_id(self) -> str:
        return self.volume.case_id

    def soft_labels(self) -> dict[str, np.ndarray | None]:
        out = {}
        for task, v in self.labels.as_dict().items():
            out[task] = None if v is None else one_hot2(v)
        return out


@dataclass(frozen=True)
class MixProvenance:
    donor_case_id: str
    recipient_case_id: str
    region: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # per-axis (lo, hi) inclusive


@dataclass(frozen=True)
class MixedSample:
    """CutMix output: mixed volume/mask plus per-task soft label 2-vectors."""

    volume: MultimodalVolume
    mask: SegmentationMask
    soft_labels: dict[str, np.ndarray | None]
    provenance: MixProvenance

    def __post_init__(self):
        for task, vec in self.soft_labels.items():
            if vec is None:
                continue
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (2,) or (vec < 0).any() or abs(vec.sum() - 1.0) > 1e-9:
                raise ValidationError(f"soft label for '{task}' is not a 2-simplex point: {vec}")


def one_hot2(value: int) -> np.ndarray:
    vec = np.zeros(2, dtype=np.float64)
    vec[int(value)] = 1.0
    return vec


def training_targets(sample) -> dict[str, np.ndarray | None]:
    """Per-task soft targets for either a Sample or a MixedSample."""
    if isinstance(sample, MixedSample):
        return sample.soft_labels
    return sample.soft_labels()


# ---------------------------------------------------------------------------
# internal working representation


@dataclass
class _Work:
    voxels: np.ndarray
    mask: np.ndarray | None
    presence: tuple
    spacing: tuple
    case_id: str
    labels: CaseLabels | None
    soft: dict | None
    provenance: MixProvenance | None

    @classmethod
    def of(cls, sample) -> "_Work":
        if isinstance(sample, MixedSample):
            labels, soft, prov = None, dict(sample.soft_labels), sample.provenance
        else:
            labels, soft, prov = sample.labels, None, None
        mask = None if sample.mask is None else sample.mask.labels.copy()
        return cls(
            voxels=sample.volume.voxels.copy(),
            mask=mask,
            presence=sample.volume.modality_presence,
            spacing=sample.volume.spacing,
            case_id=sample.volume.case_id,
            labels=labels,
            soft=soft,
            provenance=prov,
        )

    def wrap(self):
        volume = MultimodalVolume(self.voxels, self.presence, self.spacing, self.case_id)
        mask = None if self.mask is None else SegmentationMask(self.mask)
        if self.soft is not None:
            return MixedSample(volume, mask, self.soft, self.provenance)
        return Sample(volume, mask, self.labels)


# ---------------------------------------------------------------------------
# array-level helpers (exposed for direct testing)


def flip_arrays(voxels: np.ndarray, mask: np.ndarray | None, axes):
    """Flip modality-major voxels and mask along the given spatial axes."""
    for ax in axes:
        voxels = np.flip(voxels, axis=ax + 1)
        if mask is not None:
            mask = np.flip(mask, axis=ax)
    return np.ascontiguousarray(voxels), None if mask is None else np.ascontiguousarray(mask)


def crop_arrays(voxels, mask, origin, window):
    sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
    out_v = np.ascontiguousarray(voxels[(slice(None),) + sl])
    out_m = None if mask is None else np.ascontiguousarray(mask[sl])
    return out_v, out_m


def resize_arrays(voxels, mask, target):
    """Trilinear resize for intensities, nearest for labels, to exact target shape."""
    if tuple(voxels.shape[1:]) == tuple(target):
        return voxels, mask
    t = torch.from_numpy(np.ascontiguousarray(voxels))[None]
    out_v = F.interpolate(t, size=tuple(target), mode="trilinear", align_corners=False)[0].numpy()
    out_m = mask
    if mask is not None:
        tm = torch.from_numpy(np.ascontiguousarray(mask.astype(np.float32)))[None, None]
        out_m = (
            F.interpolate(tm, size=tuple(target), mode="nearest")[0, 0]
            .numpy()
            .astype(mask.dtype)
        )
    return np.ascontiguousarray(out_v), out_m


def tumor_bbox(mask: np.ndarray):
    """Per-axis inclusive (lo, hi) bounds of nonzero voxels, or None."""
    nz = np.nonzero(mask)
    if len(nz[0]) == 0:
        return None
    return tuple((int(ix.min()), int(ix.max())) for ix in nz)


# ---------------------------------------------------------------------------
# spec ops


def random_flip(sample, axis_probs, rng: np.random.Generator):
    """Flip voxels and mask together along each axis with its probability."""
    w = _Work.of(sample)
    axes = [ax for ax in range(3) if rng.uniform() < axis_probs[ax]]
    w.voxels, w.mask = flip_arrays(w.voxels, w.mask, axes)
    return w.wrap()


def _center_origin(shape, window):
    return tuple((s - wdim) // 2 for s, wdim in zip(shape, window))


def _validate_window(shape, window):
    window = tuple(int(x) for x in window)
    for s, wdim in zip(shape, window):
        if wdim > s:
            raise ValidationError(f"crop window {window} exceeds volume shape {tuple(shape)}")
        if wdim % 8 != 0 or wdim < 8:
            raise ValidationError(f"crop window dims must be >= 8 and divisible by 8, got {window}")
    return window


def tumor_protect_crop(sample, window, rng: np.random.Generator):
    """Crop to ``window`` keeping the tumor inside whenever it fits.

    If the tumor bounding box fits in the window the residual offset is
    sampled uniformly among positions that contain the whole box; otherwise
    the crop is centered on the tumor centroid and clamped to bounds.  An
    all-zero (or missing) mask falls back to a uniform random crop.
    """
    w = _Work.of(sample)
    shape = w.voxels.shape[1:]
    window = _validate_window(shape, window)

    bbox = None if w.mask is None else tumor_bbox(w.mask)
    if bbox is None:
        origin = tuple(int(rng.integers(0, s - wdim + 1)) for s, wdim in zip(shape, window))
    elif all(hi - lo + 1 <= wdim for (lo, hi), wdim in zip(bbox, window)):
        origin = []
        for (lo, hi), s, wdim in zip(bbox, shape, window):
            o_min = max(0, hi - wdim + 1)
            o_max = min(lo, s - wdim)
            origin.append(int(rng.integers(o_min, o_max + 1)))
        origin = tuple(origin)
    else:
        centroid = [float(ix.mean()) for ix in np.nonzero(w.mask)]
        origin = tuple(
            int(np.clip(round(c - wdim / 2), 0, s - wdim))
            for c, s, wdim in zip(centroid, shape, window)
        )
    w.voxels, w.mask = crop_arrays(w.voxels, w.mask, origin, window)
    return w.wrap()


def center_crop(sample, window):
    w = _Work.of(sample)
    window = _validate_window(w.voxels.shape[1:], window)
    origin = _center_origin(w.voxels.shape[1:], window)
    w.voxels, w.mask = crop_arrays(w.voxels, w.mask, origin, window)
    return w.wrap()


def random_intensity_shift(sample, max_shift: float, rng: np.random.Generator):
    """Add a per-modality uniform shift to nonzero voxels, re-clipped to [0, 1]."""
    if not 0.0 <= max_shift < 1.0:
        raise ValidationError(f"max_shift must lie in [0, 1), got {max_shift}")
    w = _Work.of(sample)
    for m in range(N_MODALITIES):
        u = float(rng.uniform(-max_shift, max_shift))
        if not w.presence[m]:
            continue
        nz = w.voxels[m] != 0
        w.voxels[m][nz] = np.clip(w.voxels[m][nz] + u, 0.0, 1.0)
    return w.wrap()


def channel_shuffle(sample, rng: np.random.Generator, permutation=None):
    """Permute modality planes (and the presence mask identically)."""
    w = _Work.of(sample)
    perm = np.asarray(permutation if permutation is not None else rng.permutation(N_MODALITIES))
    w.voxels = np.ascontiguousarray(w.voxels[perm])
    w.presence = tuple(w.presence[int(p)] for p in perm)
    return w.wrap()


def brightness_contrast_jitter(sample, rng: np.random.Generator,
                               brightness: float = 0.2,
                               contrast=(0.8, 1.25)):
    """Per-modality affine jitter of nonzero voxels around their mean."""
    w = _Work.of(sample)
    for m in range(N_MODALITIES):
        b = float(rng.uniform(-brightness, brightness))
        c = float(rng.uniform(contrast[0], contrast[1]))
        if not w.presence[m]:
            continue
        nz = w.voxels[m] != 0
        if not nz.any():
            continue
        mean = float(w.voxels[m][nz].mean())
        w.voxels[m][nz] = np.clip((w.voxels[m][nz] - mean) * c + mean + b, 0.0, 1.0)
    return w.wrap()


def gaussian_blur(sample, rng: np.random.Generator, sigma_range=(0.1, 1.0)):
    """Blur each present modality with a shared sigma drawn from sigma_range.

    The kernel is truncated at 3 sigma; sigma == 0 is the exact identity.
    """
    w = _Work.of(sample)
    sigma = float(rng.uniform(sigma_range[0], sigma_range[1]))
    if sigma <= 0:
        return w.wrap()
    for m in range(N_MODALITIES):
        if w.presence[m]:
            w.voxels[m] = gaussian_filter(w.voxels[m], sigma=sigma, truncate=3.0)
    return w.wrap()


def tumor_cutmix(recipient, donor, rng: np.random.Generator, margin: int = 2) -> MixedSample:
    """Paste a donor tumor component into the recipient and mix labels.

    The pasted box is the component bounding box dilated by ``margin``,
    placed uniformly in-bounds.  Pasted mask voxels take donor values.  For
    each task with both labels present the soft label is
    ``(1 - lam) * recipient + lam * donor`` where ``lam`` is the fraction of
    tumor voxels in the mixed mask that came from the donor; missing labels
    stay missing.
    """
    from .postprocess import connected_components

    if recipient.volume.shape != donor.volume.shape:
        raise ValidationError(
            f"shape mismatch: recipient {recipient.volume.shape} vs donor {donor.volume.shape}"
        )
    if donor.mask is None or not (donor.mask.labels > 0).any():
        raise ValidationError("CutMix donor must contain at least one tumor voxel")

    w = _Work.of(recipient)
    if w.mask is None:
        w.mask = np.zeros(w.voxels.shape[1:], dtype=np.uint8)
    donor_mask = donor.mask.labels
    comp_labels, sizes = connected_components(donor_mask > 0, connectivity=26)
    comp = int(rng.integers(1, len(sizes) + 1))
    comp_bbox = tumor_bbox(comp_labels == comp)
    shape = w.voxels.shape[1:]
    lo = [max(0, b[0] - margin) for b in comp_bbox]
    hi = [min(s - 1, b[1] + margin) for b, s in zip(comp_bbox, shape)]
    box = [h - low + 1 for low, h in zip(lo, hi)]

    origin = tuple(int(rng.integers(0, s - b + 1)) for s, b in zip(shape, box))
    dst = tuple(slice(o, o + b) for o, b in zip(origin, box))
    src = tuple(slice(low, h + 1) for low, h in zip(lo, hi))

    for m in range(N_MODALITIES):
        if w.presence[m] and donor.volume.modality_presence[m]:
            w.voxels[m][dst] = donor.volume.voxels[m][src]
    w.mask[dst] = donor_mask[src]

    pasted_tumor = int((w.mask[dst] > 0).sum())
    total_tumor = int((w.mask > 0).sum())
    lam = pasted_tumor / total_tumor if total_tumor else 0.0

    rec_targets = training_targets(recipient)
    don_targets = training_targets(donor)
    soft = {}
    for task in TASKS:
        r, d = rec_targets.get(task), don_targets.get(task)
        soft[task] = None if (r is None or d is None) else (1.0 - lam) * r + lam * d

    prov = MixProvenance(
        donor_case_id=donor.case_id,
        recipient_case_id=recipient.case_id,
        region=tuple((int(o), int(o + b - 1)) for o, b in zip(origin, box)),
    )
    volume = MultimodalVolume(w.voxels, w.presence, w.spacing, w.case_id)
    return MixedSample(volume, SegmentationMask(w.mask), soft, prov)


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class AugOp:
    name: str
    prob: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValidationError(f"op probability must lie in [0, 1], got {self.prob}")


@dataclass
class AugmentationPolicy:
    """Ordered, probability-gated op list; deterministic in (seed, sample index)."""

    ops: list[AugOp]
    rng_seed: int = 0

    def rng_for(self, sample_index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((self.rng_seed, sample_index)))

    def apply(self, sample, sample_index: int = 0, donor=None):
        rng = self.rng_for(sample_index)
        for op in self.ops:
            gate = rng.uniform() < op.prob
            sample = _apply_op(op, sample, rng, gate, donor)
        return sample

    def to_json(self) -> str:
        return json.dumps(
            {
                "rng_seed": self.rng_seed,
                "ops": [{"name": o.name, "prob": o.prob, "params": o.params} for o in self.ops],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AugmentationPolicy":
        raw = json.loads(text)
        ops = [AugOp(o["name"], o["prob"], o.get("params", {})) for o in raw["ops"]]
        return cls(ops=ops, rng_seed=raw.get("rng_seed", 0))


def _apply_op(op: AugOp, sample, rng, gate: bool, donor):
    p = op.params
    if op.name == "flip":
        axes = p.get("axis_probs", [0.5, 0.5, 0.5]) if gate else [0.0, 0.0, 0.0]
        return random_flip(sample, axes, rng)
    if op.name == "crop":
        window = p.get("window") or sample.volume.shape
        if gate:
            return tumor_protect_crop(sample, window, rng)
        return center_crop(sample, window)
    if op.name == "resize":
        window = tuple(p.get("window") or sample.volume.shape)
        if gate:
            lo_s, hi_s = p.get("scale_range", (0.9, 1.1))
            f = float(rng.uniform(lo_s, hi_s))
            inner = tuple(
                min(s, max(8, int(round(wdim * f / 8)) * 8))
                for s, wdim in zip(sample.volume.shape, window)
            )
            sample = center_crop(sample, inner)
        w = _Work.of(sample)
        w.voxels, w.mask = resize_arrays(w.voxels, w.mask, window)
        return w.wrap()
    if op.name == "intensity_shift":
        return random_intensity_shift(sample, p.get("max_shift", 0.1), rng) if gate else sample
    if op.name == "channel_shuffle":
        return channel_shuffle(sample, rng) if gate else sample
    if op.name == "brightness_contrast":
        if not gate:
            return sample
        return brightness_contrast_jitter(
            sample, rng, p.get("brightness", 0.2), p.get("contrast", (0.8, 1.25))
        )
    if op.name == "gaussian_blur":
        return gaussian_blur(sample, rng, p.get("sigma_range", (0.1, 1.0))) if gate else sample
    if op.name == "cutmix":
        if not gate or donor is None:
            return sample
        if donor.mask is None or not (donor.mask.labels > 0).any():
            return sample
        return tumor_cutmix(sample, donor, rng, p.get("margin", 2))
    raise ValidationError(f"unknown augmentation op '{op.name}'")


def weak_policy(window=None, seed: int = 0, flip_prob: float = 0.5,
                crop_prob: float = 1.0, scale_prob: float = 0.0) -> AugmentationPolicy:
    """Flip + tumor-protect crop + resize-to-window."""
    return AugmentationPolicy(
        ops=[
            AugOp("flip", flip_prob, {"axis_probs": [0.5, 0.5, 0.5]}),
            AugOp("crop", crop_prob, {"window": None if window is None else list(window)}),
            AugOp("resize", scale_prob, {"window": None if window is None else list(window)}),
        ],
        rng_seed=seed,
    )


def strong_policy(window=None, seed: int = 0, cutmix_prob: float = 0.5,
                  jitter_prob: float = 0.8, blur_prob: float = 0.5,
                  flip_prob: float = 0.5) -> AugmentationPolicy:
    """Weak pipeline plus brightness/contrast jitter, Gaussian blur and CutMix."""
    weak = weak_policy(window, seed=seed, flip_prob=flip_prob)
    ops = [AugOp("cutmix", cutmix_prob, {"margin": 2})] + weak.ops + [
        AugOp("brightness_contrast", jitter_prob, {"brightness": 0.2, "contrast": [0.8, 1.25]}),
        AugOp("gaussian_blur", blur_prob, {"sigma_range": [0.1, 1.0]}),
    ]
    return AugmentationPolicy(ops=ops, rng_seed=seed)


def weak_augment(sample, rng: np.random.Generator, window=None):
    """One-shot weak augmentation with fresh randomness from ``rng``."""
    policy = weak_policy(window, seed=int(rng.integers(0, 2**31)))
    return policy.apply(sample)


def strong_augment(sample, rng: np.random.Generator, window=None, donor=None):
    """One-shot strong augmentation with fresh randomness from ``rng``."""
    policy = strong_policy(window, seed=int(rng.integers(0, 2**31)))
    return policy.apply(sample, donor=donor)
