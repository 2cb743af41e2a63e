"""Case-level necrosis-ratio assessment and model comparison.

For each case the viable-tumor and necrotic-tumor pixel counts are summed
across all of its slides; the necrosis ratio is

    R = p_NT / (p_VT + p_NT),    p_NT = necrosis with bone + without bone.

Against reference ratios the corpus error rate is the mean absolute
difference E = (1/N) * sum |R_ref - R_model| over cases that have both a
reference and detected tumor.  Cases where the model finds no tumor at all
are excluded from E and flagged, never silently scored as 0 or 1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES, NECROTIC_CLASSES, TissueClass
from .inference import SegmentationMap

_VT = int(TissueClass.VIABLE_TUMOR)


@dataclass
class CaseReport:
    case_id: str
    p_vt: int
    p_nt: int
    r_dl: float | None
    r_path: float | None = None
    per_slide: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def no_tumor(self) -> bool:
        return self.r_dl is None

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "p_vt": self.p_vt,
            "p_nt": self.p_nt,
            "r_dl": self.r_dl,
            "r_path": self.r_path,
            "no_tumor_detected": self.no_tumor,
            "per_slide": self.per_slide,
        }


def necrosis_ratio(
    case_id: str,
    segmaps: list[SegmentationMap],
    r_path: float | None = None,
) -> CaseReport:
    if not segmaps:
        raise ValueError("a case needs at least one segmented slide")
    p_vt = 0
    p_nt = 0
    per_slide = {}
    for seg in segmaps:
        vt = int(seg.counts[_VT])
        nt = int(sum(seg.counts[c] for c in NECROTIC_CLASSES))
        per_slide[seg.slide_id] = {"p_vt": vt, "p_nt": nt}
        p_vt += vt
        p_nt += nt
    r_dl = p_nt / (p_vt + p_nt) if (p_vt + p_nt) > 0 else None
    return CaseReport(
        case_id=case_id, p_vt=p_vt, p_nt=p_nt, r_dl=r_dl, r_path=r_path,
        per_slide=per_slide,
    )


def error_rate(reports: list[CaseReport]) -> float:
    """Mean |R_ref - R_model| over cases with a reference and detected tumor."""
    diffs = [
        abs(r.r_path - r.r_dl)
        for r in reports
        if r.r_path is not None and r.r_dl is not None
    ]
    if not diffs:
        raise ValueError("no case has both a reference ratio and detected tumor")
    return float(np.mean(diffs))


@dataclass
class ComparisonRow:
    model_id: str
    error: float
    reports: list[CaseReport]
    best: bool = False


def model_comparison(
    models: list[tuple[str, "object"]],
    slides_by_case: dict[str, list],
    refs: dict[str, float],
    batch_size: int = 32,
) -> list[ComparisonRow]:
    """Segment every test case with every model and tabulate error rates.

    ``models`` is [(model_id, DmmnModel)] in lineage order; the returned rows
    keep that order with the argmin flagged.
    """
    from .inference import segment_slide  # deferred: keeps import cycle out

    if len(models) < 2:
        raise ValueError("model comparison needs at least two models")
    rows = []
    for model_id, model in models:
        reports = []
        for case_id in sorted(slides_by_case):
            segs = [
                segment_slide(model, slide, batch_size)
                for slide in slides_by_case[case_id]
            ]
            reports.append(necrosis_ratio(case_id, segs, refs.get(case_id)))
        rows.append(ComparisonRow(model_id=model_id, error=error_rate(reports),
                                  reports=reports))
    best = min(range(len(rows)), key=lambda i: rows[i].error)
    rows[best].best = True
    return rows


def read_reference_csv(path: str | Path) -> dict[str, float]:
    """CSV with header case_id,R_PATH -> {case_id: ratio}."""
    refs = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            refs[row["case_id"]] = float(row["R_PATH"])
    return refs


def write_reference_csv(path: str | Path, refs: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "R_PATH"])
        for cid in sorted(refs):
            writer.writerow([cid, repr(refs[cid])])


def comparison_as_dict(rows: list[ComparisonRow]) -> dict:
    return {
        "models": [
            {
                "model_id": r.model_id,
                "error_rate": r.error,
                "best": r.best,
                "cases": [rep.as_dict() for rep in r.reports],
            }
            for r in rows
        ]
    }


def comparison_markdown(rows: list[ComparisonRow]) -> str:
    lines = [
        "| model | error rate E | best |",
        "|-------|--------------|------|",
    ]
    for r in rows:
        lines.append(f"| {r.model_id} | {r.error:.4f} | {'*' if r.best else ''} |")
    lines.append("")
    flagged = {rep.case_id for r in rows for rep in r.reports if rep.no_tumor}
    if flagged:
        lines.append(f"no tumor detected (excluded from E): {', '.join(sorted(flagged))}")
        lines.append("")
    return "\n".join(lines)


def write_report(
    out_dir: str | Path,
    rows: list[ComparisonRow],
    thumbnails: dict[str, np.ndarray] | None = None,
) -> None:
    """Persist the comparison as JSON + markdown (+ optional PNG overlays)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = comparison_as_dict(rows)
    (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    (out / "report.md").write_text(
        "# Case-level assessment\n\n"
        + comparison_markdown(rows)
        + "\nclasses: "
        + ", ".join(CLASS_NAMES.values())
        + "\n"
    )
    if thumbnails:
        from PIL import Image

        thumb_dir = out / "thumbnails"
        thumb_dir.mkdir(exist_ok=True)
        for name, arr in thumbnails.items():
            Image.fromarray(arr).save(thumb_dir / f"{name}.png")
