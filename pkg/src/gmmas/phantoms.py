"""Synthetic phantom generation standing in for clinical scans.

Each phantom is a smooth brain-like background plus 1-3 ellipsoidal tumor
foci with concentric subregions (necrosis core, enhancing shell, edema halo).
Classification labels are deterministic functions of the emitted voxels and
mask declared in a :class:`PhantomRuleSet`, so ground truth is recomputable
by construction.  Modality appearance is differentiated so that each modality
carries distinct (and partly redundant) evidence:

* t1: necrosis dark, mild shell contrast
* t1ce: enhancing shell bright, brightness tracks the per-case shell gain
* t2: core and edema bright, mild shell gain coupling
* flair: edema bright, brightness tracks halo extent
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .volumes import (
    CaseLabels,
    DatasetManifest,
    ManifestEntry,
    MultimodalVolume,
    SegmentationMask,
    MODALITIES,
    LABEL_NECROSIS,
    LABEL_ENHANCING,
    LABEL_EDEMA,
    save_volume,
)


# ---------------------------------------------------------------------------
# class rules


@dataclass(frozen=True)
class RegionIntensityRule:
    """Label 1 iff the mean intensity of ``modality`` over ``region`` exceeds ``threshold``."""

    modality: str
    region: int
    threshold: float
    kind: str = "region_intensity"

    def evaluate(self, voxels: np.ndarray, labels: np.ndarray) -> int:
        m = MODALITIES.index(self.modality)
        sel = labels == self.region
        if not sel.any():
            return 0
        return int(float(voxels[m][sel].mean()) > self.threshold)


@dataclass(frozen=True)
class RegionFractionRule:
    """Label 1 iff ``region`` voxels exceed ``threshold`` as a fraction of all tumor voxels."""

    region: int
    threshold: float
    kind: str = "region_fraction"

    def evaluate(self, voxels: np.ndarray, labels: np.ndarray) -> int:
        tumor = int((labels > 0).sum())
        if tumor == 0:
            return 0
        return int((labels == self.region).sum() / tumor > self.threshold)


@dataclass(frozen=True)
class FocusCountRule:
    """Label 1 iff the tumor has at least ``min_count`` connected foci."""

    min_count: int
    connectivity: int = 26
    kind: str = "focus_count"

    def evaluate(self, voxels: np.ndarray, labels: np.ndarray) -> int:
        from .postprocess import connected_components

        _, sizes = connected_components(labels > 0, connectivity=self.connectivity)
        return int(len(sizes) >= self.min_count)


_RULE_KINDS = {
    "region_intensity": RegionIntensityRule,
    "region_fraction": RegionFractionRule,
    "focus_count": FocusCountRule,
}


@dataclass
class PhantomRuleSet:
    """Per-task labeling rules; tasks missing from the dict emit no label."""

    rules: dict[str, object] = field(default_factory=dict)

    def evaluate(self, voxels: np.ndarray, labels: np.ndarray) -> CaseLabels:
        values = {
            task: rule.evaluate(voxels, labels) for task, rule in self.rules.items()
        }
        return CaseLabels.from_dict(values)

    def to_json(self) -> str:
        out = {}
        for task, rule in self.rules.items():
            d = dict(rule.__dict__)
            out[task] = d
        return json.dumps(out, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PhantomRuleSet":
        raw = json.loads(text)
        rules = {}
        for task, d in raw.items():
            d = dict(d)
            kind = d.pop("kind")
            rules[task] = _RULE_KINDS[kind](**d)
        return cls(rules=rules)

    @classmethod
    def default(cls) -> "PhantomRuleSet":
        """Well-separated rules matched to the generator's bimodal parameters."""
        return cls(
            rules={
                "grade": RegionIntensityRule("t1ce", LABEL_ENHANCING, 0.62),
                "idh": RegionFractionRule(LABEL_NECROSIS, 0.03),
                "1p19q": FocusCountRule(2),
                "mgmt": RegionFractionRule(LABEL_EDEMA, 0.58),
            }
        )

    @classmethod
    def ambiguous(cls) -> "PhantomRuleSet":
        """Same rules, but paired with continuous generator parameters

        (``GeneratorParams.ambiguous``) so borderline cases exist; used for
        calibration experiments.
        """
        return cls.default()


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorParams:
    """Geometry and appearance knobs for phantom synthesis."""

    focus_count_probs: tuple[float, ...] = (0.6, 0.25, 0.15)
    outer_radius_range: tuple[float, float] = (0.16, 0.26)  # fraction of min dim
    core_ratio_range: tuple[float, float] = (0.25, 0.60)    # core radius / shell
    shell_ratio_range: tuple[float, float] = (0.60, 0.85)   # shell radius / outer
    #: shell gain is drawn from one of these two ranges (bimodal -> separable grade)
    shell_gain_ranges: tuple[tuple[float, float], tuple[float, float]] = (
        (0.33, 0.45),
        (0.78, 0.92),
    )
    noise_sigma: float = 0.015
    background_amp: float = 0.02

    @classmethod
    def ambiguous(cls) -> "GeneratorParams":
        # single continuous gain range straddling the grade threshold
        return cls(shell_gain_ranges=((0.45, 0.80), (0.45, 0.80)))


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    gx, gy, gz = np.ogrid[0 : shape[0], 0 : shape[1], 0 : shape[2]]
    acc = (
        ((gx - center[0]) / radii[0]) ** 2
        + ((gy - center[1]) / radii[1]) ** 2
        + ((gz - center[2]) / radii[2]) ** 2
    )
    return acc <= 1.0


def generate_phantom(seed_seq: np.random.SeedSequence, shape, params: GeneratorParams,
                     rules: PhantomRuleSet, case_id: str):
    """Synthesize one phantom; returns (volume, mask, labels)."""
    rng = np.random.default_rng(seed_seq)
    shape = tuple(int(s) for s in shape)
    H, W, D = shape
    min_dim = min(shape)

    center = np.array(shape) / 2.0
    brain_radii = np.array(shape) * 0.44
    brain = _ellipsoid_mask(shape, center, brain_radii)

    labels = np.zeros(shape, dtype=np.uint8)
    n_foci = int(rng.choice(len(params.focus_count_probs), p=params.focus_count_probs)) + 1
    shell_gain = float(rng.uniform(*params.shell_gain_ranges[int(rng.integers(0, 2))]))
    core_ratio = float(rng.uniform(*params.core_ratio_range))
    shell_ratio = float(rng.uniform(*params.shell_ratio_range))

    placed = 0
    guard = 0
    while placed < n_foci and guard < 200:
        guard += 1
        r_out = float(rng.uniform(*params.outer_radius_range)) * min_dim
        if placed > 0:
            r_out *= 0.6  # secondary foci smaller
        margin = r_out + 1.5
        c = np.array([rng.uniform(margin, s - margin) for s in shape])
        if not brain[tuple(np.round(c).astype(int))]:
            continue
        outer = _ellipsoid_mask(shape, c, (r_out,) * 3)
        if placed > 0 and (outer & (labels > 0)).any():
            continue  # keep foci disjoint so the focus count is exact
        shell = _ellipsoid_mask(shape, c, (r_out * shell_ratio,) * 3)
        core = _ellipsoid_mask(shape, c, (r_out * shell_ratio * core_ratio,) * 3)
        labels[outer] = LABEL_EDEMA
        labels[shell & outer] = LABEL_ENHANCING
        labels[core] = LABEL_NECROSIS
        placed += 1

    # smooth brain background per modality
    base = {"t1": 0.50, "t1ce": 0.45, "t2": 0.40, "flair": 0.35}
    vox = np.zeros((4,) + shape, dtype=np.float32)
    halo_frac = float((labels == LABEL_EDEMA).sum() / max((labels > 0).sum(), 1))
    flair_edema = 0.60 + 0.45 * halo_frac          # tracks halo extent
    t2_core = 0.78
    appearance = {
        "t1": {0: base["t1"], LABEL_NECROSIS: 0.15, LABEL_ENHANCING: 0.58, LABEL_EDEMA: 0.44},
        "t1ce": {0: base["t1ce"], LABEL_NECROSIS: 0.18, LABEL_ENHANCING: shell_gain, LABEL_EDEMA: 0.50},
        "t2": {0: base["t2"], LABEL_NECROSIS: t2_core, LABEL_ENHANCING: 0.30 + 0.5 * shell_gain, LABEL_EDEMA: 0.72},
        "flair": {0: base["flair"], LABEL_NECROSIS: 0.48, LABEL_ENHANCING: 0.55, LABEL_EDEMA: flair_edema},
    }
    for m, mod in enumerate(MODALITIES):
        field3d = gaussian_filter(
            rng.normal(0.0, 1.0, size=shape), sigma=min_dim / 8.0
        )
        amp = field3d.std() or 1.0
        field3d = params.background_amp * field3d / amp
        plane = np.zeros(shape, dtype=np.float32)
        plane[brain] = appearance[mod][0]
        for lab in (LABEL_NECROSIS, LABEL_ENHANCING, LABEL_EDEMA):
            plane[labels == lab] = appearance[mod][lab]
        plane[brain] += field3d[brain]
        plane[brain] += rng.normal(0.0, params.noise_sigma, size=int(brain.sum()))
        vox[m] = np.clip(plane, 0.0, 1.0)
        # brain voxels clipped to 0 would masquerade as background; nudge them
        vox[m][brain & (vox[m] == 0)] = 1e-4

    volume = MultimodalVolume(
        voxels=vox, modality_presence=(True,) * 4, case_id=case_id
    )
    mask = SegmentationMask(labels=labels)
    case_labels = rules.evaluate(vox, labels)
    return volume, mask, case_labels


def generate_phantom_dataset(
    seed: int,
    n_cases: int,
    shape,
    class_rules: PhantomRuleSet,
    out_dir,
    unlabeled_fraction: float = 0.0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.2,
    params: GeneratorParams | None = None,
) -> DatasetManifest:
    """Write ``n_cases`` phantoms (raw format) and a manifest under ``out_dir``.

    Deterministic in ``seed``.  ``round(unlabeled_fraction * n_cases)`` cases,
    drawn from the training split, have classification labels withheld and are
    tagged ``unlabeled``; val/test splits always keep their labels.
    """
    if n_cases < 1:
        raise ValidationError("n_cases must be >= 1")
    for s in shape:
        if s % 8 != 0:
            raise ValidationError(f"phantom dims must be divisible by 8, got {tuple(shape)}")
    params = params or GeneratorParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(seed).spawn(n_cases)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD5)))

    n_test = int(round(n_cases * test_fraction))
    n_val = int(round(n_cases * val_fraction))
    n_train = n_cases - n_val - n_test
    split_tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    n_unlabeled = int(round(unlabeled_fraction * n_cases))
    if n_unlabeled > n_train:
        raise ValidationError(
            f"cannot withhold {n_unlabeled} labels from a {n_train}-case training split"
        )
    unlabeled_idx = set(rng.permutation(n_train)[:n_unlabeled].tolist())

    entries = []
    for i in range(n_cases):
        case_id = f"phantom_{i:04d}"
        volume, mask, labels = generate_phantom(
            children[i], shape, params, class_rules, case_id
        )
        save_volume(volume, out_dir / f"{case_id}.f32")
        save_volume(mask, out_dir / f"{case_id}_seg.u8")
        split = split_tags[i]
        if split == "train" and i in unlabeled_idx:
            split = "unlabeled"
            labels = CaseLabels()
        entries.append(
            ManifestEntry(
                case_id=case_id,
                volume_path=f"{case_id}.f32",
                mask_path=f"{case_id}_seg.u8",
                labels=labels,
                split=split,
            )
        )
    manifest = DatasetManifest(entries=entries, base_dir=str(out_dir))
    manifest.save(out_dir / "manifest.json")
    (out_dir / "rules.json").write_text(class_rules.to_json())
    return manifest
