"""Pseudo-label correction from report-derived lesion locations.

Predicted components are matched one-to-one against report lesions; matched
components are kept, unmatched ones removed. A case whose report mentions a
lesion that no prediction covers is excluded from the output set rather than
silently truncated. The count-based variant keeps the top-n components by
peak probability and serves as the comparison arm.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .lesion_ops import LesionComponent, binarize, component_summary
from .report_parser import ReportLesion
from .sector_map import DEFAULT_MIDLINE_FRACTION, SectorGrid, VoxelRegion, region_for
from .volume import Volume3D

__all__ = [
    "CorrectionMethod",
    "CorrectionResult",
    "EXCLUDED",
    "correct_by_location",
    "correct_by_count",
    "no_correction",
    "make_pseudo_label",
    "result_to_json_dict",
]


class CorrectionMethod(Enum):
    LOCATION_BASED = "location"
    COUNT_BASED = "count"
    NONE = "none"


class _ExcludedType:
    """Singleton marker for cases dropped from the pseudo-label set."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "EXCLUDED"

    def __bool__(self) -> bool:
        return False


EXCLUDED = _ExcludedType()


@dataclass(frozen=True)
class CorrectionResult:
    """Outcome of one correction pass over a single case.

    matches pairs a report lesion's own index (the number used in the report
    text) with the ordinal position of the component in the input list, which
    is expected in descending peak-probability order.
    """

    kept: tuple[LesionComponent, ...]
    removed: tuple[LesionComponent, ...]
    matches: tuple[tuple[int, int], ...]
    unmatched_report_lesions: tuple[int, ...]
    excluded: bool
    method: CorrectionMethod

    def __post_init__(self) -> None:
        report_side = [m[0] for m in self.matches]
        comp_side = [m[1] for m in self.matches]
        if len(set(report_side)) != len(report_side):
            raise ValueError("a report lesion appears in more than one match")
        if len(set(comp_side)) != len(comp_side):
            raise ValueError("a component appears in more than one match")
        if self.method is CorrectionMethod.LOCATION_BASED:
            if self.excluded != bool(self.unmatched_report_lesions):
                raise ValueError(
                    "location-based exclusion must mirror unmatched report lesions"
                )


def _lesion_regions(
    lesion: ReportLesion,
    grid: SectorGrid,
    midline_fraction: float,
    within_mask: np.ndarray | None,
) -> list[VoxelRegion]:
    return [
        region_for(d, grid, midline_fraction=midline_fraction, within_mask=within_mask)
        for d in lesion.locations
    ]


def _component_hits(
    comp: LesionComponent,
    regions: list[VoxelRegion],
    match_mode: str,
) -> bool:
    if match_mode == "overlap":
        return any(r.contains_any(comp.voxel_array) for r in regions)
    if match_mode == "centroid":
        # nearest voxel to the real-valued centroid, half-up
        cx, cy, cz = (int(np.floor(c + 0.5)) for c in comp.centroid)
        return any(r.contains(cx, cy, cz) for r in regions)
    raise ValueError(f"match_mode must be 'overlap' or 'centroid', got {match_mode!r}")


def _greedy_assign(hit: list[list[bool]]) -> list[tuple[int, int]]:
    """Components in given (descending-peak) order take the first free lesion."""
    n_lesions = len(hit[0]) if hit else 0
    taken = [False] * n_lesions
    pairs = []
    for ci, row in enumerate(hit):
        for li in range(n_lesions):
            if row[li] and not taken[li]:
                taken[li] = True
                pairs.append((ci, li))
                break
    return pairs


def _exhaustive_assign(hit: list[list[bool]]) -> list[tuple[int, int]]:
    """Maximum-cardinality assignment by backtracking; first-found among maxima.

    Search order mirrors the greedy rule (components in order, lesions in
    order, matching preferred over skipping) so ties resolve identically.
    """
    n_comp = len(hit)
    n_lesions = len(hit[0]) if hit else 0
    best: list[tuple[int, int]] = []

    def recurse(ci: int, taken: list[bool], acc: list[tuple[int, int]]) -> None:
        nonlocal best
        if ci == n_comp:
            if len(acc) > len(best):
                best = list(acc)
            return
        # even matching every remaining component cannot beat best: prune
        if len(acc) + (n_comp - ci) <= len(best):
            return
        for li in range(n_lesions):
            if hit[ci][li] and not taken[li]:
                taken[li] = True
                acc.append((ci, li))
                recurse(ci + 1, taken, acc)
                acc.pop()
                taken[li] = False
        recurse(ci + 1, taken, acc)

    recurse(0, [False] * n_lesions, [])
    return best


def correct_by_location(
    components: list[LesionComponent],
    report_lesions: list[ReportLesion],
    grid: SectorGrid,
    match_mode: str = "overlap",
    assignment: str = "greedy",
    midline_fraction: float = DEFAULT_MIDLINE_FRACTION,
    within_mask: np.ndarray | None = None,
) -> CorrectionResult:
    """Match components to report lesions; keep matched, drop the rest.

    Components must arrive in descending peak-probability order. A component
    is assignable to a report lesion when it overlaps (one voxel suffices)
    the union of the regions of that lesion's location readings; each
    component takes the first still-free assignable lesion in report order.
    The case is excluded whenever a report lesion ends up unmatched. With no
    report lesions at all the result is an empty, non-excluded (negative)
    label. The exhaustive assignment mode maximizes the number of matches by
    backtracking and only engages up to 6x6 instances; beyond that it falls
    back to greedy.
    """
    if assignment not in ("greedy", "exhaustive"):
        raise ValueError(f"assignment must be 'greedy' or 'exhaustive', got {assignment!r}")
    if not report_lesions:
        return CorrectionResult(
            kept=(),
            removed=tuple(components),
            matches=(),
            unmatched_report_lesions=(),
            excluded=False,
            method=CorrectionMethod.LOCATION_BASED,
        )
    region_sets = [
        _lesion_regions(l, grid, midline_fraction, within_mask) for l in report_lesions
    ]
    hit = [
        [_component_hits(comp, regions, match_mode) for regions in region_sets]
        for comp in components
    ]
    if assignment == "exhaustive" and len(components) <= 6 and len(report_lesions) <= 6:
        pairs = _exhaustive_assign(hit)
    else:
        pairs = _greedy_assign(hit)
    matched_comps = {ci for ci, _ in pairs}
    matched_lesions = {li for _, li in pairs}
    kept = tuple(c for i, c in enumerate(components) if i in matched_comps)
    removed = tuple(c for i, c in enumerate(components) if i not in matched_comps)
    unmatched = tuple(
        l.index for i, l in enumerate(report_lesions) if i not in matched_lesions
    )
    matches = tuple(
        sorted((report_lesions[li].index, ci) for ci, li in pairs)
    )
    return CorrectionResult(
        kept=kept,
        removed=removed,
        matches=matches,
        unmatched_report_lesions=unmatched,
        excluded=bool(unmatched),
        method=CorrectionMethod.LOCATION_BASED,
    )


def correct_by_count(
    components: list[LesionComponent],
    n_significant: int,
) -> CorrectionResult:
    """Keep the n highest-peak components; exclude when predictions run short."""
    if n_significant < 0:
        raise ValueError(f"n_significant must be >= 0, got {n_significant}")
    n_keep = min(n_significant, len(components))
    return CorrectionResult(
        kept=tuple(components[:n_keep]),
        removed=tuple(components[n_keep:]),
        matches=(),
        unmatched_report_lesions=(),
        excluded=len(components) < n_significant,
        method=CorrectionMethod.COUNT_BASED,
    )


def no_correction(components: list[LesionComponent]) -> CorrectionResult:
    """Pass-through baseline: everything kept, nothing excluded."""
    return CorrectionResult(
        kept=tuple(components),
        removed=(),
        matches=(),
        unmatched_report_lesions=(),
        excluded=False,
        method=CorrectionMethod.NONE,
    )


def make_pseudo_label(
    result: CorrectionResult,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> Volume3D | _ExcludedType:
    """Binary mask of kept components, or the EXCLUDED marker."""
    if result.excluded:
        return EXCLUDED
    return binarize(list(result.kept), dims, spacing)


def result_to_json_dict(result: CorrectionResult) -> dict:
    """Audit record written next to every emitted pseudo label."""
    return {
        "method": result.method.value,
        "excluded": result.excluded,
        "matches": [
            {"report_lesion": ri, "component": ci} for ri, ci in result.matches
        ],
        "unmatched_report_lesions": list(result.unmatched_report_lesions),
        "n_components": len(result.kept) + len(result.removed),
        "kept": [component_summary(c) for c in result.kept],
        "removed": [component_summary(c) for c in result.removed],
    }
