"""Segmentation and detection evaluation.

Voxel-level Dice overlap, lesion-level TP/FP/FN tallies under a pluggable
match criterion, fROC curves with an operating-point selector, and the
pseudo-label quality summary used to compare correction strategies.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .label_correction import CorrectionResult
from .lesion_ops import LesionComponent, component_iou, mask_components, threshold_components
from .volume import MASK_KINDS, Volume3D, VolumeKind

__all__ = [
    "MatchCriterion",
    "ANY_OVERLAP",
    "iou_above",
    "DetectionTally",
    "FrocCurve",
    "dsc",
    "match_detections",
    "detection_sweep",
    "froc",
    "threshold_at_sensitivity",
    "pseudo_label_quality",
    "default_thresholds",
    "save_froc_csv",
    "froc_to_json",
    "save_froc_svg",
]


@dataclass(frozen=True)
class MatchCriterion:
    """Detection hit test between two voxel sets.

    min_iou None means any shared voxel counts; otherwise the IoU must be
    STRICTLY greater than min_iou.
    """

    min_iou: float | None = None

    def __post_init__(self) -> None:
        if self.min_iou is not None and not 0.0 <= self.min_iou < 1.0:
            raise ValueError(f"min_iou {self.min_iou} outside [0, 1)")

    def hits(self, a: frozenset, b: frozenset) -> bool:
        if self.min_iou is None:
            return not a.isdisjoint(b)
        if a.isdisjoint(b):
            return False
        return component_iou(a, b) > self.min_iou

    @property
    def name(self) -> str:
        return "any_overlap" if self.min_iou is None else f"iou_above_{self.min_iou:g}"


ANY_OVERLAP = MatchCriterion(min_iou=None)


def iou_above(min_iou: float = 0.1) -> MatchCriterion:
    return MatchCriterion(min_iou=min_iou)


@dataclass(frozen=True)
class DetectionTally:
    """Lesion-level counts, mergeable across cases with +."""

    tp: int
    fn: int
    fp: int
    per_case_fp: tuple[int, ...]

    def __post_init__(self) -> None:
        if min(self.tp, self.fn, self.fp) < 0:
            raise ValueError("tally counts must be non-negative")
        if self.per_case_fp and sum(self.per_case_fp) != self.fp:
            raise ValueError(
                f"fp {self.fp} != sum of per-case counts {sum(self.per_case_fp)}"
            )

    def __add__(self, other: "DetectionTally") -> "DetectionTally":
        return DetectionTally(
            tp=self.tp + other.tp,
            fn=self.fn + other.fn,
            fp=self.fp + other.fp,
            per_case_fp=self.per_case_fp + other.per_case_fp,
        )

    @property
    def n_cases(self) -> int:
        return len(self.per_case_fp)

    @property
    def sensitivity(self) -> float:
        """tp / (tp + fn); defined as 1.0 when there is nothing to find."""
        total = self.tp + self.fn
        return self.tp / total if total else 1.0

    @property
    def fp_per_case(self) -> float:
        return self.fp / self.n_cases if self.n_cases else 0.0


EMPTY_TALLY = DetectionTally(tp=0, fn=0, fp=0, per_case_fp=())


def dsc(a: Volume3D, b: Volume3D) -> float:
    """Dice similarity of two binary masks; both-empty scores 1.0."""
    if a.kind not in MASK_KINDS or b.kind not in MASK_KINDS:
        raise ValueError("dsc expects binary masks")
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    av = a.data > 0
    bv = b.data > 0
    denom = int(av.sum()) + int(bv.sum())
    if denom == 0:
        return 1.0
    inter = int(np.logical_and(av, bv).sum())
    return 2.0 * inter / denom


def match_detections(
    gt: list[LesionComponent],
    pred: list[LesionComponent],
    criterion: MatchCriterion = ANY_OVERLAP,
) -> DetectionTally:
    """Single-case tally: a GT lesion hit by any prediction is a TP; a
    prediction hitting no GT lesion is an FP.

    One prediction may confirm several GT lesions, and a GT lesion needs only
    one hit, so the counts are independent per side (no assignment step).
    """
    tp = sum(1 for g in gt if any(criterion.hits(g.voxels, p.voxels) for p in pred))
    fn = len(gt) - tp
    fp = sum(1 for p in pred if not any(criterion.hits(g.voxels, p.voxels) for g in gt))
    return DetectionTally(tp=tp, fn=fn, fp=fp, per_case_fp=(fp,))


class FrocCurve:
    """fROC sample points; monotonicity is checked at construction.

    points are (threshold, sensitivity, fp_per_case) with thresholds strictly
    increasing; both sensitivity and fp_per_case must be non-increasing along
    the curve.
    """

    def __init__(self, points: list[tuple[float, float, float]]):
        if not points:
            raise ValueError("fROC curve needs at least one point")
        for t, s, f in points:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"threshold {t} outside (0, 1]")
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"sensitivity {s} outside [0, 1]")
            if f < 0.0:
                raise ValueError(f"fp_per_case {f} negative")
        for (t0, s0, f0), (t1, s1, f1) in zip(points, points[1:]):
            if t1 <= t0:
                raise ValueError(f"thresholds not strictly increasing at {t0} -> {t1}")
            if s1 > s0 + 1e-12:
                raise ValueError(f"sensitivity increased {s0} -> {s1} at threshold {t1}")
            if f1 > f0 + 1e-12:
                raise ValueError(f"fp_per_case increased {f0} -> {f1} at threshold {t1}")
        self.points = tuple((float(t), float(s), float(f)) for t, s, f in points)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __eq__(self, other) -> bool:
        return isinstance(other, FrocCurve) and self.points == other.points

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(p[0] for p in self.points)

    @property
    def sensitivities(self) -> tuple[float, ...]:
        return tuple(p[1] for p in self.points)

    @property
    def fp_rates(self) -> tuple[float, ...]:
        return tuple(p[2] for p in self.points)


def detection_sweep(
    cases: list[tuple[Volume3D, Volume3D]],
    thresholds: list[float],
    criterion: MatchCriterion = ANY_OVERLAP,
    connectivity: int = 26,
    min_volume_mm3: float = 0.0,
) -> list[tuple[float, float, float]]:
    """Raw (threshold, sensitivity, fp_per_case) rows, pooled per threshold.

    sensitivity = total TP / total GT lesions, fp_per_case = total FP / cases.
    No monotonicity requirement: under a strict IoU criterion a shrinking
    prediction can flip from TP to FN+FP as the threshold rises, so strict
    sweeps are reported as-is and only overlap-based sweeps are wrapped into
    FrocCurve.
    """
    if not cases:
        raise ValueError("sweep needs at least one case")
    if not thresholds:
        raise ValueError("sweep needs at least one threshold")
    ts = list(thresholds)
    if any(t1 <= t0 for t0, t1 in zip(ts, ts[1:])):
        raise ValueError("thresholds must be strictly increasing")
    gt_comps = [mask_components(gt, connectivity=connectivity) for gt, _ in cases]
    points = []
    for t in ts:
        tally = EMPTY_TALLY
        for (_, prob), gtc in zip(cases, gt_comps):
            pred = threshold_components(
                prob, t, connectivity=connectivity, min_volume_mm3=min_volume_mm3
            )
            tally = tally + match_detections(gtc, pred, criterion)
        points.append((t, tally.sensitivity, tally.fp_per_case))
    return points


def froc(
    cases: list[tuple[Volume3D, Volume3D]],
    thresholds: list[float],
    criterion: MatchCriterion = ANY_OVERLAP,
    connectivity: int = 26,
    min_volume_mm3: float = 0.0,
) -> FrocCurve:
    """Sweep thresholds over (gt mask, probability map) pairs into a curve."""
    return FrocCurve(
        detection_sweep(cases, thresholds, criterion, connectivity, min_volume_mm3)
    )


def threshold_at_sensitivity(curve: FrocCurve, target: float) -> float:
    """Largest threshold still reaching the target sensitivity.

    Step-function convention: no interpolation between sample points.
    """
    best = None
    for t, s, _ in curve.points:
        if s >= target:
            best = t
    if best is None:
        top = max(s for _, s, _ in curve.points)
        raise ValueError(
            f"target sensitivity {target} unreachable; curve peaks at {top:.4f}"
        )
    return best


def pseudo_label_quality(
    cases: list[tuple[list[LesionComponent], CorrectionResult]],
    criterion: MatchCriterion | None = None,
) -> dict:
    """Detection quality of corrected pseudo labels against known GT.

    Sensitivity and FP/case are measured over the retained (non-excluded)
    cases with the strict criterion (IoU > 0.1) unless another criterion is
    passed. sensitivity_all_cases scores the kept components of every case,
    excluded or not, against the full GT; the spread between the two numbers
    is what exclusion buys.
    """
    if not cases:
        raise ValueError("no cases to summarize")
    if criterion is None:
        criterion = iou_above(0.1)
    retained = EMPTY_TALLY
    overall = EMPTY_TALLY
    n_excluded = 0
    for gt_comps, result in cases:
        tally = match_detections(gt_comps, list(result.kept), criterion)
        overall = overall + tally
        if result.excluded:
            n_excluded += 1
        else:
            retained = retained + tally
    if retained.n_cases == 0:
        raise ValueError("every case was excluded; nothing to evaluate")
    return {
        "criterion": criterion.name,
        "n_cases": len(cases),
        "n_retained": retained.n_cases,
        "excluded_fraction": n_excluded / len(cases),
        "sensitivity": retained.sensitivity,
        "fp_per_case": retained.fp_per_case,
        "sensitivity_all_cases": overall.sensitivity,
    }


def default_thresholds(
    maps: list[Volume3D] | None = None,
    max_distinct: int = 32,
) -> list[float]:
    """0.05-step ladder, optionally merged with the distinct values of small maps."""
    ladder = {round(0.05 * k, 2) for k in range(1, 20)}
    if maps is not None:
        distinct: set[float] = set()
        for m in maps:
            vals = np.unique(m.data)
            vals = vals[vals > 0.0]
            distinct.update(float(v) for v in vals)
            if len(distinct) > max_distinct:
                distinct = set()
                break
        ladder |= distinct
    return sorted(t for t in ladder if 0.0 < t <= 1.0)


def save_froc_csv(curve: FrocCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "sensitivity", "fp_per_case"])
        for t, s, fp in curve.points:
            w.writerow([f"{t:.6g}", f"{s:.6g}", f"{fp:.6g}"])


def froc_to_json(curve: FrocCurve) -> dict:
    return {
        "points": [
            {"threshold": t, "sensitivity": s, "fp_per_case": fp}
            for t, s, fp in curve.points
        ]
    }


def save_froc_svg(curves: dict[str, FrocCurve], path, title: str = "fROC") -> None:
    """Write an fROC plot (FP/case vs sensitivity) as a deterministic SVG."""
    import matplotlib

    matplotlib.use("Agg")
    # fixed hash salt: otherwise SVG element ids vary between processes
    matplotlib.rcParams["svg.hashsalt"] = "lesionloc"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, curve in curves.items():
        ax.plot(curve.fp_rates, curve.sensitivities, marker="o", label=label)
    ax.set_xlabel("false positives per case")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if curves:
        ax.legend(loc="lower right")
    # Date metadata suppressed so reruns are byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
