"""Deterministic synthetic cohorts: phantom glands, planted lesions,
simulated teacher probability maps and matching report text.

Every blob in a teacher map is a Gaussian-blurred sphere, truncated below a
floor value and peak-scaled, and blob supports are kept mutually disjoint
(with a one-voxel gap) during placement. Each blob therefore stays a single
connected component at any analysis threshold, which keeps detection sweeps
over generated cohorts monotone.

All randomness flows from (seed, case_index) through numpy's SeedSequence;
no wall clock, no platform entropy. Draw order within a case is fixed:
lesion count, per-lesion placements, PI-RADS scores, misses, FP count,
per-FP placements, then peak values.

False positives are planted up to the room a case actually has: when neither
rejection sampling nor an exhaustive scan can fit another blob (reported
sectors plus existing blobs can saturate the gland), the remaining FP draws
for that case are dropped and provenance records drawn vs planted counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .report_parser import ParsedReport, parse_report
from .sector_map import Cell, build_sector_grid, locate_component, region_for
from .volume import Volume3D, VolumeKind, atomic_write_bytes, save_volume

__all__ = [
    "SynthParams",
    "SyntheticCase",
    "PlacementError",
    "gen_case",
    "gen_cohort",
    "write_cohort",
    "render_report",
]

FP_PLACEMENTS = ("out_of_sector", "in_gland")


class PlacementError(RuntimeError):
    """Rejection sampling ran out of attempts; the parameters are infeasible."""


@dataclass(frozen=True)
class SynthParams:
    dims: tuple[int, int, int] = (64, 64, 18)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    gland_semi_axes_mm: tuple[float, float, float] = (22.0, 18.0, 20.0)
    gland_center_mm: tuple[float, float, float] | None = None
    lesion_count_weights: dict[int, float] = field(
        default_factory=lambda: {1: 0.4, 2: 0.4, 3: 0.2}
    )
    lesion_radius_mm: tuple[float, float] = (4.0, 8.0)
    pirads_range: tuple[int, int] = (3, 5)
    miss_probability: float = 0.0
    fp_rate: float = 0.0
    fp_placement: str = "out_of_sector"
    fp_radius_mm: tuple[float, float] = (3.0, 5.0)
    blur_mm: float = 1.0
    peak_range: tuple[float, float] = (0.7, 0.95)
    min_blob_value: float = 0.05
    seed: int = 0
    max_attempts: int = 500
    base_at_positive_z: bool = True

    def __post_init__(self) -> None:
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if any(a <= 0 for a in self.gland_semi_axes_mm):
            raise ValueError("gland semi-axes must be positive")
        if not self.lesion_count_weights:
            raise ValueError("lesion_count_weights is empty")
        for k, w in self.lesion_count_weights.items():
            if k < 0 or w < 0:
                raise ValueError(f"bad lesion count weight {k}: {w}")
        if sum(self.lesion_count_weights.values()) <= 0:
            raise ValueError("lesion count weights sum to zero")
        lo, hi = self.lesion_radius_mm
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion radius range {self.lesion_radius_mm}")
        flo, fhi = self.fp_radius_mm
        if not 0 < flo <= fhi:
            raise ValueError(f"bad false-positive radius range {self.fp_radius_mm}")
        plo, phi = self.pirads_range
        if not 1 <= plo <= phi <= 5:
            raise ValueError(f"PI-RADS range {self.pirads_range} outside [1, 5]")
        if not 0.0 <= self.miss_probability <= 1.0:
            raise ValueError(f"miss_probability {self.miss_probability} outside [0, 1]")
        if self.fp_rate < 0:
            raise ValueError(f"fp_rate {self.fp_rate} negative")
        if self.fp_placement not in FP_PLACEMENTS:
            raise ValueError(f"fp_placement must be one of {FP_PLACEMENTS}")
        if self.blur_mm <= 0:
            raise ValueError("blur_mm must be positive")
        klo, khi = self.peak_range
        if not 0.0 < klo <= khi <= 1.0:
            raise ValueError(f"peak_range {self.peak_range} outside (0, 1]")
        if not 0.0 < self.min_blob_value < klo:
            raise ValueError("min_blob_value must sit below the lowest peak")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif f.name == "lesion_count_weights":
                v = {str(k): w for k, w in sorted(v.items())}
            out[f.name] = v
        return out


def params_from_json(d: dict) -> SynthParams:
    known = {f.name for f in fields(SynthParams)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown parameter field(s): {sorted(unknown)}")
    kw = dict(d)
    for name in (
        "dims", "spacing", "gland_semi_axes_mm", "gland_center_mm",
        "lesion_radius_mm", "pirads_range", "peak_range", "fp_radius_mm",
    ):
        if name in kw and kw[name] is not None:
            kw[name] = tuple(kw[name])
    if "lesion_count_weights" in kw:
        kw["lesion_count_weights"] = {
            int(k): float(w) for k, w in kw["lesion_count_weights"].items()
        }
    return SynthParams(**kw)


@dataclass(frozen=True)
class SyntheticCase:
    case_id: str
    prostate_mask: Volume3D
    gt_mask: Volume3D
    teacher_prob: Volume3D
    report_text: str
    provenance: dict


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _coord_grids(dims, spacing):
    """Physical mm coordinate of each voxel, one broadcastable array per axis."""
    return [
        (np.arange(dims[a], dtype=np.float64) * spacing[a]).reshape(
            [-1 if i == a else 1 for i in range(3)]
        )
        for a in range(3)
    ]


def _ellipsoid_mask(dims, spacing, center_mm, semi_axes_mm) -> np.ndarray:
    xs, ys, zs = _coord_grids(dims, spacing)
    q = (
        ((xs - center_mm[0]) / semi_axes_mm[0]) ** 2
        + ((ys - center_mm[1]) / semi_axes_mm[1]) ** 2
        + ((zs - center_mm[2]) / semi_axes_mm[2]) ** 2
    )
    return q <= 1.0


def _sphere_mask(coords, center_mm, radius_mm) -> np.ndarray:
    xs, ys, zs = coords
    d2 = (xs - center_mm[0]) ** 2 + (ys - center_mm[1]) ** 2 + (zs - center_mm[2]) ** 2
    return d2 <= radius_mm * radius_mm


def _blurred_blob(sphere: np.ndarray, spacing, blur_mm: float, floor: float) -> np.ndarray:
    """Peak-normalized blurred sphere, hard-zeroed below ``floor``.

    Zeroing fixes the blob support regardless of the later peak scaling, so
    placement-time disjointness checks see exactly the final footprint.
    """
    sigma = [blur_mm / s for s in spacing]
    blob = ndimage.gaussian_filter(sphere.astype(np.float64), sigma=sigma)
    blob /= blob.max()
    blob[blob < floor] = 0.0
    return blob


_TOUCH = np.ones((3, 3, 3), dtype=bool)


def _touches(support: np.ndarray, occupied: np.ndarray) -> bool:
    """True when ``support`` overlaps or is 26-adjacent to ``occupied``."""
    if not occupied.any():
        return False
    grown = ndimage.binary_dilation(support, structure=_TOUCH)
    return bool((grown & occupied).any())


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

_LAT_PHRASE = {
    ("left",): "left",
    ("right",): "right",
    ("left", "right"): "bilateral",
}
_AP_PHRASE = {
    ("anterior",): "anterior",
    ("posterior",): "posterior",
    ("anterior", "posterior"): "anterior and posterior",
}
_SI_PHRASE = {
    ("base",): "at the base",
    ("mid",): "in the mid gland",
    ("apex",): "at the apex",
    ("base", "mid"): "from the base to the mid gland",
    ("mid", "apex"): "from the mid gland to the apex",
    ("base", "apex"): "at the base and at the apex",
    ("base", "mid", "apex"): "from the base through the mid gland to the apex",
}

_LAT_ORDER = ("left", "right")
_AP_ORDER = ("anterior", "posterior")
_SI_ORDER = ("base", "mid", "apex")


def _axis_key(values: set[str], order: tuple[str, ...]) -> tuple[str, ...]:
    return tuple(v for v in order if v in values)


def render_report(lesion_cells: list[tuple[int, set[Cell]]]) -> str:
    """Render lesion statements whose location terms re-parse to exactly the
    per-axis value sets of the given sector cells.

    ``lesion_cells`` pairs (pirads, cells touched); lesions are numbered in
    list order starting at 1.
    """
    lines = ["Prostate MRI report.", ""]
    if not lesion_cells:
        lines.append("No suspicious focal abnormality identified.")
    for i, (pirads, cells) in enumerate(lesion_cells, start=1):
        lat = _axis_key({c[0].value for c in cells}, _LAT_ORDER)
        ap = _axis_key({c[1].value for c in cells}, _AP_ORDER)
        si = _axis_key({c[2].value for c in cells}, _SI_ORDER)
        lines.append(
            f"Lesion {i}: PI-RADS {pirads} lesion in the "
            f"{_LAT_PHRASE[lat]} {_AP_PHRASE[ap]} gland, {_SI_PHRASE[si]}."
        )
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Case generation
# ---------------------------------------------------------------------------


def _admissible(params, coords, gland, occupied, forbidden_regions, center, radius):
    """Build the sphere + blob for one proposal; None when a constraint fails."""
    sphere = _sphere_mask(coords, center, radius)
    if not sphere.any():
        return None
    if (sphere & ~gland).any():  # sphere must sit fully inside the gland
        return None
    if _touches(sphere, occupied):  # cheap test before the blur
        return None
    blob = _blurred_blob(sphere, params.spacing, params.blur_mm, params.min_blob_value)
    support = blob > 0.0
    if _touches(support, occupied):
        return None
    if forbidden_regions:
        support_voxels = np.argwhere(support)
        if any(r.contains_any(support_voxels) for r in forbidden_regions):
            return None
    return sphere, blob, support, center, radius


def _place_blob(
    rng: np.random.Generator,
    params: SynthParams,
    coords,
    gland: np.ndarray,
    occupied: np.ndarray,
    forbidden_regions,
    radius_range: tuple[float, float],
    proposal_voxels: np.ndarray,
):
    """Rejection-sample one sphere + blurred blob subject to all constraints.

    Centers are proposed as a uniformly chosen voxel from ``proposal_voxels``
    plus sub-voxel jitter. Any feasible center lies inside a voxel that is
    itself in-gland, unoccupied, and outside every forbidden region, so the
    voxel-set proposal covers the full feasible set while concentrating
    attempts where acceptance is possible. Returns None when every attempt
    was rejected; rng draw count per attempt is fixed.
    """
    if len(proposal_voxels) == 0:
        return None
    spacing = np.asarray(params.spacing, dtype=np.float64)
    for _ in range(params.max_attempts):
        radius = rng.uniform(*radius_range)
        voxel = proposal_voxels[int(rng.integers(len(proposal_voxels)))]
        center = tuple((voxel + rng.uniform(-0.5, 0.5, size=3)) * spacing)
        placed = _admissible(params, coords, gland, occupied, forbidden_regions, center, radius)
        if placed is not None:
            return placed
    return None


def _scan_place(params, coords, gland, occupied, forbidden_regions, radius, candidate_voxels):
    """Deterministic fallback when rejection sampling runs dry: try every
    candidate voxel center in lexicographic order at the smallest radius.
    Feasibility is monotone in radius (smaller sphere, smaller support), so a
    miss here means the case genuinely has no room left. Consumes no rng draws.
    """
    spacing = np.asarray(params.spacing, dtype=np.float64)
    for voxel in candidate_voxels:
        center = tuple(voxel * spacing)
        placed = _admissible(params, coords, gland, occupied, forbidden_regions, center, radius)
        if placed is not None:
            return placed
    return None


def gen_case(params: SynthParams, case_index: int) -> SyntheticCase:
    """Generate one case; identical (params, case_index) is byte-identical."""
    if case_index < 0:
        raise ValueError(f"case_index must be >= 0, got {case_index}")
    rng = np.random.default_rng(
        np.random.SeedSequence(params.seed, spawn_key=(case_index,))
    )
    dims, spacing = params.dims, params.spacing
    center_mm = params.gland_center_mm or tuple(
        d * s / 2.0 for d, s in zip(dims, spacing)
    )
    gland = _ellipsoid_mask(dims, spacing, center_mm, params.gland_semi_axes_mm)
    if not gland.any():
        raise PlacementError("gland ellipsoid contains no voxels")
    prostate_mask = Volume3D(
        data=gland.astype(np.uint8), spacing=spacing, kind=VolumeKind.BINARY_MASK
    )
    grid = build_sector_grid(prostate_mask, base_at_positive_z=params.base_at_positive_z)
    coords = _coord_grids(dims, spacing)

    counts = sorted(params.lesion_count_weights)
    weights = np.array([params.lesion_count_weights[c] for c in counts], dtype=np.float64)
    n_lesions = int(rng.choice(counts, p=weights / weights.sum()))

    occupied = np.zeros(dims, dtype=bool)
    lesions = []
    for i in range(n_lesions):
        free = np.argwhere(gland & ~occupied)
        placed = _place_blob(
            rng, params, coords, gland, occupied, None,
            params.lesion_radius_mm, free,
        )
        if placed is None:  # salvage before declaring the params infeasible
            placed = _scan_place(
                params, coords, gland, occupied, None,
                params.lesion_radius_mm[0], free,
            )
        if placed is None:
            raise PlacementError(
                f"no room for lesion {i + 1} of radius >= "
                f"{params.lesion_radius_mm[0]} mm; parameters appear infeasible"
            )
        sphere, blob, support, center, radius = placed
        occupied |= support
        cells = locate_component(np.argwhere(sphere), grid)
        lesions.append(
            {"sphere": sphere, "blob": blob, "center": center,
             "radius": radius, "cells": cells}
        )

    plo, phi = params.pirads_range
    pirads = [int(rng.integers(plo, phi + 1)) for _ in range(n_lesions)]
    missed = [bool(rng.random() < params.miss_probability) for _ in range(n_lesions)]

    report_text = render_report(
        [(pirads[i], lesions[i]["cells"]) for i in range(n_lesions)]
    )
    parsed = parse_report(report_text)
    _check_closure(parsed, lesions, grid)

    n_fp = int(rng.poisson(params.fp_rate))
    forbidden = None
    allowed = gland.copy()  # proposal support for FP centers
    if params.fp_placement == "out_of_sector":
        forbidden = [
            region_for(d, grid) for lesion in parsed.lesions for d in lesion.locations
        ]
        for r in forbidden:
            if r.is_empty:
                continue
            sl = tuple(slice(lo, hi + 1) for lo, hi in zip(r.lo, r.hi))
            if r.mask is None:
                allowed[sl] = False
            else:
                allowed[sl] &= ~r.mask[sl]
    fps = []
    for j in range(n_fp):
        free = np.argwhere(allowed & ~occupied)
        placed = _place_blob(
            rng, params, coords, gland, occupied, forbidden,
            params.fp_radius_mm, free,
        )
        if placed is None:
            placed = _scan_place(
                params, coords, gland, occupied, forbidden,
                params.fp_radius_mm[0], free,
            )
        if placed is None:
            break  # case saturated; drop the remaining FP draws
        sphere, blob, support, center, radius = placed
        occupied |= support
        fps.append({"blob": blob, "center": center, "radius": radius})

    n_planted = len(fps)
    n_rendered = sum(1 for m in missed if not m) + n_planted
    peaks = [float(rng.uniform(*params.peak_range)) for _ in range(n_lesions + n_planted)]

    teacher = np.zeros(dims, dtype=np.float64)
    gt = np.zeros(dims, dtype=np.uint8)
    for i, lesion in enumerate(lesions):
        gt[lesion["sphere"]] = 1
        if not missed[i]:
            np.maximum(teacher, lesion["blob"] * peaks[i], out=teacher)
    for j, fp in enumerate(fps):
        np.maximum(teacher, fp["blob"] * peaks[n_lesions + j], out=teacher)

    case_id = f"case_{case_index:04d}"
    provenance = {
        "case_id": case_id,
        "case_index": case_index,
        "seed": params.seed,
        "n_lesions": n_lesions,
        "n_false_positives": n_planted,
        "n_false_positives_drawn": n_fp,
        "n_rendered_blobs": n_rendered,
        "lesions": [
            {
                "index": i + 1,
                "center_mm": [round(c, 6) for c in lesions[i]["center"]],
                "radius_mm": round(lesions[i]["radius"], 6),
                "pirads": pirads[i],
                "peak": round(peaks[i], 6),
                "missed": missed[i],
                "cells": sorted(
                    [c[0].value, c[1].value, c[2].value] for c in lesions[i]["cells"]
                ),
            }
            for i in range(n_lesions)
        ],
        "false_positives": [
            {
                "center_mm": [round(c, 6) for c in fps[j]["center"]],
                "radius_mm": round(fps[j]["radius"], 6),
                "peak": round(peaks[n_lesions + j], 6),
            }
            for j in range(n_planted)
        ],
    }
    return SyntheticCase(
        case_id=case_id,
        prostate_mask=prostate_mask,
        gt_mask=Volume3D(data=gt, spacing=spacing, kind=VolumeKind.BINARY_MASK),
        teacher_prob=Volume3D(
            data=teacher, spacing=spacing, kind=VolumeKind.PROBABILITY_MAP
        ),
        report_text=report_text,
        provenance=provenance,
    )


def _check_closure(parsed: ParsedReport, lesions, grid) -> None:
    """The rendered report must re-parse to regions covering each lesion."""
    if len(parsed.lesions) != len(lesions):
        raise AssertionError(
            f"rendered report parsed to {len(parsed.lesions)} lesions, "
            f"expected {len(lesions)}"
        )
    for rl, lesion in zip(parsed.lesions, lesions):
        sphere_voxels = np.argwhere(lesion["sphere"])
        covered = np.zeros(len(sphere_voxels), dtype=bool)
        for d in rl.locations:
            region = region_for(d, grid)
            lo = np.asarray(region.lo)
            hi = np.asarray(region.hi)
            covered |= np.all((sphere_voxels >= lo) & (sphere_voxels <= hi), axis=1)
        if not covered.all():
            raise AssertionError(
                f"lesion {rl.index}: report regions do not cover the lesion"
            )


def gen_cohort(params: SynthParams, n_cases: int) -> list[SyntheticCase]:
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    return [gen_case(params, i) for i in range(n_cases)]


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def write_case(case: SyntheticCase, out_dir: str | Path) -> dict:
    """Write one case directory; returns its manifest entry (relative paths)."""
    out_dir = Path(out_dir)
    case_dir = out_dir / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    save_volume(case.prostate_mask, case_dir / "prostate_mask.nii.gz")
    save_volume(case.gt_mask, case_dir / "gt_mask.nii.gz")
    save_volume(case.teacher_prob, case_dir / "teacher_prob.nii.gz")
    atomic_write_bytes(case_dir / "report.txt", case.report_text.encode())
    atomic_write_bytes(
        case_dir / "provenance.json",
        (json.dumps(case.provenance, indent=2, sort_keys=True) + "\n").encode(),
    )
    return {
        "id": case.case_id,
        "prostate_mask": f"{case.case_id}/prostate_mask.nii.gz",
        "probability_maps": [f"{case.case_id}/teacher_prob.nii.gz"],
        "report": f"{case.case_id}/report.txt",
        "gt_mask": f"{case.case_id}/gt_mask.nii.gz",
    }


def write_cohort(
    cases: list[SyntheticCase],
    out_dir: str | Path,
    params: SynthParams | None = None,
) -> Path:
    """Write all case directories plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = [write_case(case, out_dir) for case in cases]
    manifest: dict = {"cases": entries}
    settings: dict = {}
    if params is not None:
        settings["base_at"] = "+z" if params.base_at_positive_z else "-z"
    manifest["settings"] = settings
    manifest_path = out_dir / "manifest.json"
    atomic_write_bytes(
        manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    )
    return manifest_path
