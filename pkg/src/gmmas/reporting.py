"""Per-case analysis reports and prognosis text rendering.

The default renderer is a deterministic template keyed on class calls and
volume-fraction bands, so the pipeline is fully testable offline.  An
optional HTTP text-generation endpoint can replace the narrative body; on
any failure the renderer falls back to the template and keeps exit status
success.  The safety disclaimer is always appended.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volumes import LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROSIS, TASKS

DISCLAIMER = (
    "These results are informational guidelines only; treatment decisions "
    "must be made by the treating clinical team on a patient-specific basis."
)

#: enhancing-compartment share of the tumor above which the aggressive-stage
#: advisory sentence is included
AGGRESSIVE_ENHANCING_FRACTION = 0.5

TASK_TITLES = {
    "grade": ("histological grade", "low-grade", "high-grade"),
    "idh": ("IDH genotype", "wild type", "mutant"),
    "1p19q": ("1p/19q status", "intact", "co-deleted"),
    "mgmt": ("MGMT status", "unmethylated", "methylated"),
}


@dataclass
class AnalysisReport:
    """Structured per-case output of the inference pipeline."""

    case_id: str
    subregion_voxels: dict[str, int]          # necrosis / enhancing / edema
    volume_fractions: dict[str, float]        # same keys, fractions of the volume
    class_probs: dict[str, list[float]]       # task -> [p0, p1]
    uncertainties: dict[str, float] = field(default_factory=dict)
    filter_applied: bool = False
    mc_passes: int = 1
    prognosis_text: str = ""
    disclaimer: str = DISCLAIMER

    def __post_init__(self):
        whole = sum(self.volume_fractions.values())
        if whole > 1.0 + 1e-9:
            raise ValidationError("subregion fractions cannot exceed the volume")
        if not self.disclaimer:
            raise ValidationError("reports must carry the disclaimer")

    @property
    def whole_tumor_fraction(self) -> float:
        return sum(self.volume_fractions.values())

    def to_json(self) -> str:
        return json.dumps(
            {
                "case_id": self.case_id,
                "subregion_voxels": self.subregion_voxels,
                "volume_fractions": self.volume_fractions,
                "whole_tumor_fraction": self.whole_tumor_fraction,
                "class_probs": self.class_probs,
                "uncertainties": self.uncertainties,
                "filter_applied": self.filter_applied,
                "mc_passes": self.mc_passes,
                "prognosis_text": self.prognosis_text,
                "disclaimer": self.disclaimer,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        d = json.loads(text)
        d.pop("whole_tumor_fraction", None)
        return cls(**d)


def report_from_mask(case_id: str, labels: np.ndarray, class_probs: dict,
                     uncertainties: dict | None = None, filter_applied: bool = False,
                     mc_passes: int = 1) -> AnalysisReport:
    """Build a report by counting subregion voxels in the emitted mask."""
    total = int(labels.size)
    counts = {
        "necrosis": int((labels == LABEL_NECROSIS).sum()),
        "enhancing": int((labels == LABEL_ENHANCING).sum()),
        "edema": int((labels == LABEL_EDEMA).sum()),
    }
    fractions = {k: v / total for k, v in counts.items()}
    return AnalysisReport(
        case_id=case_id,
        subregion_voxels=counts,
        volume_fractions=fractions,
        class_probs={t: [float(p) for p in class_probs[t]] for t in TASKS if t in class_probs},
        uncertainties=dict(uncertainties or {}),
        filter_applied=filter_applied,
        mc_passes=mc_passes,
    )


def _fraction_band(value: float) -> str:
    if value < 0.02:
        return "minimal"
    if value < 0.10:
        return "moderate"
    return "extensive"


def render_template(report: AnalysisReport) -> str:
    """Deterministic narrative from the report fields; byte-stable per input."""
    lines = [f"Case {report.case_id} analysis summary", ""]
    whole = report.whole_tumor_fraction
    lines.append(
        f"Segmented tumor occupies {whole:.1%} of the scanned volume "
        f"(necrosis {report.volume_fractions.get('necrosis', 0.0):.1%}, "
        f"enhancing {report.volume_fractions.get('enhancing', 0.0):.1%}, "
        f"edema {report.volume_fractions.get('edema', 0.0):.1%})."
    )
    if report.filter_applied:
        lines.append("Low-density spurious components were removed in post-processing.")

    enhancing_share = (
        report.volume_fractions.get("enhancing", 0.0) / whole if whole > 0 else 0.0
    )
    if enhancing_share > AGGRESSIVE_ENHANCING_FRACTION:
        lines.append(
            "The enhancing compartment dominates the lesion, a pattern associated "
            "with more aggressive, advanced-stage disease; prioritized clinical "
            "review is advisable."
        )
    band = _fraction_band(report.volume_fractions.get("edema", 0.0))
    lines.append(f"Peritumoral edema burden is {band}.")
    lines.append("")

    for task in TASKS:
        if task not in report.class_probs:
            continue
        title, neg, pos = TASK_TITLES[task]
        p = report.class_probs[task]
        call = pos if p[1] >= 0.5 else neg
        conf = max(p)
        line = f"{title}: {call} (confidence {conf:.2f}"
        if report.mc_passes > 1 and task in report.uncertainties:
            line += f", epistemic spread {report.uncertainties[task]:.3f}"
        line += ")."
        lines.append(line)

    lines.append("")
    lines.append(report.disclaimer)
    return "\n".join(lines)


def render_report(report: AnalysisReport, llm_endpoint: str | None = None,
                  timeout: float = 30.0) -> tuple[str, str | None]:
    """Render via the endpoint when given, else the template.

    Returns (text, warning); network failure of any kind falls back to the
    template with a warning message.  The disclaimer is appended regardless
    of which path produced the narrative.
    """
    if not llm_endpoint:
        return render_template(report), None
    try:
        import requests

        fields = json.loads(report.to_json())
        payload = {
            "prompt": (
                "Write a short prognosis assessment from these tumor analysis "
                "fields; be factual and cautious."
            ),
            "fields": fields,
        }
        resp = requests.post(llm_endpoint, json=payload, timeout=timeout)
        resp.raise_for_status()
        text = resp.json()["text"]
        if report.disclaimer not in text:
            text = text.rstrip() + "\n\n" + report.disclaimer
        return text, None
    except Exception as exc:  # any transport/parse failure degrades gracefully
        warning = f"text-generation endpoint failed ({exc}); using template output"
        return render_template(report), warning
