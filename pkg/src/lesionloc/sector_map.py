"""Approximate sector geometry over a prostate segmentation.

The gland bounding box is halved along X and Y and split into thirds along Z,
yielding the 12 cells {Left,Right} x {Anterior,Posterior} x {Base,Mid,Apex}.
Location descriptors resolve to axis-slab regions over the bounding box;
components map back to the set of cells they touch.

Under the repo axis convention (+X = patient-left, +Y = patient-posterior,
+Z = patient-superior): Right = x below the X split, Anterior = y below the
Y split, and Base = the superior Z third when ``base_at_positive_z`` is set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .report_parser import AP, SI, Laterality, LocationDescriptor
from .volume import Volume3D, VolumeKind

__all__ = [
    "BBox",
    "SectorGrid",
    "VoxelRegion",
    "Cell",
    "prostate_bbox",
    "build_sector_grid",
    "region_for",
    "locate_component",
]

Cell = tuple[Laterality, AP, SI]

DEFAULT_MIDLINE_FRACTION = 0.25


@dataclass(frozen=True)
class BBox:
    """Axis-aligned voxel-index box, inclusive on both ends."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self) -> None:
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"bbox min {self.lo} exceeds max {self.hi}")

    def extent(self, axis: int) -> int:
        return self.hi[axis] - self.lo[axis] + 1

    @property
    def voxel_count(self) -> int:
        return self.extent(0) * self.extent(1) * self.extent(2)


@dataclass(frozen=True)
class SectorGrid:
    """2x2x3 partition of a prostate bounding box.

    ``x_split``/``y_split`` are boundary values: a voxel belongs to the lower
    half when its coordinate is strictly below the split. ``z_splits`` are the
    two boundaries of the Z thirds, computed as lo_z + (extent * k) // 3.
    """

    bbox: BBox
    x_split: int
    y_split: int
    z_splits: tuple[int, int]
    base_at_positive_z: bool = True

    def cell_of(self, x: int, y: int, z: int) -> Cell:
        """Classify a voxel; coordinates outside the bbox are clamped."""
        x = min(max(x, self.bbox.lo[0]), self.bbox.hi[0])
        y = min(max(y, self.bbox.lo[1]), self.bbox.hi[1])
        z = min(max(z, self.bbox.lo[2]), self.bbox.hi[2])
        lat = Laterality.RIGHT if x < self.x_split else Laterality.LEFT
        ap = AP.ANTERIOR if y < self.y_split else AP.POSTERIOR
        z1, z2 = self.z_splits
        if z < z1:
            band = 0
        elif z < z2:
            band = 1
        else:
            band = 2
        if self.base_at_positive_z:
            si = (SI.APEX, SI.MID, SI.BASE)[band]
        else:
            si = (SI.BASE, SI.MID, SI.APEX)[band]
        return (lat, ap, si)

    def to_json_dict(self) -> dict:
        return {
            "bbox": {"min": list(self.bbox.lo), "max": list(self.bbox.hi)},
            "x_split": self.x_split,
            "y_split": self.y_split,
            "z_splits": list(self.z_splits),
            "base_at": "+z" if self.base_at_positive_z else "-z",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class VoxelRegion:
    """Axis-aligned voxel box, optionally intersected with a mask.

    ``lo > hi`` on any axis denotes the empty region. The optional mask is a
    boolean array over the full volume grid; when present, membership requires
    the mask to be set as well.
    """

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    mask: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        if any(l > h for l, h in zip(self.lo, self.hi)):
            return True
        if self.mask is not None:
            return not bool(
                self.mask[self.lo[0]:self.hi[0] + 1,
                          self.lo[1]:self.hi[1] + 1,
                          self.lo[2]:self.hi[2] + 1].any()
            )
        return False

    def contains(self, x: int, y: int, z: int) -> bool:
        inside = all(l <= c <= h for l, c, h in zip(self.lo, (x, y, z), self.hi))
        if inside and self.mask is not None:
            return bool(self.mask[x, y, z])
        return inside

    def contains_any(self, voxels: np.ndarray) -> bool:
        """True when at least one row of an (N, 3) voxel array lies inside."""
        if voxels.size == 0:
            return False
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        inside = np.all((voxels >= lo) & (voxels <= hi), axis=1)
        if self.mask is not None and inside.any():
            v = voxels[inside]
            return bool(self.mask[v[:, 0], v[:, 1], v[:, 2]].any())
        return bool(inside.any())

    def voxel_count(self) -> int:
        if any(l > h for l, h in zip(self.lo, self.hi)):
            return 0
        if self.mask is not None:
            return int(
                self.mask[self.lo[0]:self.hi[0] + 1,
                          self.lo[1]:self.hi[1] + 1,
                          self.lo[2]:self.hi[2] + 1].sum()
            )
        return (self.hi[0] - self.lo[0] + 1) * (self.hi[1] - self.lo[1] + 1) * (self.hi[2] - self.lo[2] + 1)

    def voxels(self) -> set[tuple[int, int, int]]:
        out = set()
        for x in range(self.lo[0], self.hi[0] + 1):
            for y in range(self.lo[1], self.hi[1] + 1):
                for z in range(self.lo[2], self.hi[2] + 1):
                    if self.mask is None or self.mask[x, y, z]:
                        out.add((x, y, z))
        return out


def prostate_bbox(mask: Volume3D) -> BBox:
    """Tight bounding box of the nonzero voxels of a binary mask."""
    if mask.kind is not VolumeKind.BINARY_MASK:
        raise ValueError(f"expected a binary mask, got {mask.kind.value}")
    nz = np.nonzero(mask.data)
    if nz[0].size == 0:
        raise ValueError("mask is empty; cannot compute bounding box")
    lo = tuple(int(c.min()) for c in nz)
    hi = tuple(int(c.max()) for c in nz)
    return BBox(lo=lo, hi=hi)


def build_sector_grid(mask: Volume3D, base_at_positive_z: bool = True) -> SectorGrid:
    """Halve the bbox along X and Y and split Z into thirds."""
    bbox = prostate_bbox(mask)
    ez = bbox.extent(2)
    if ez < 3:
        raise ValueError(f"Z extent {ez} < 3; cannot form base/mid/apex thirds")
    x_split = bbox.lo[0] + bbox.extent(0) // 2
    y_split = bbox.lo[1] + bbox.extent(1) // 2
    z_splits = (bbox.lo[2] + ez // 3, bbox.lo[2] + (ez * 2) // 3)
    return SectorGrid(
        bbox=bbox,
        x_split=x_split,
        y_split=y_split,
        z_splits=z_splits,
        base_at_positive_z=base_at_positive_z,
    )


def _midline_band(grid: SectorGrid, fraction: float) -> tuple[int, int]:
    extent = grid.bbox.extent(0)
    width = max(1, int(extent * fraction + 0.5))
    lo = grid.x_split - (width + 1) // 2
    hi = lo + width - 1
    return max(lo, grid.bbox.lo[0]), min(hi, grid.bbox.hi[0])


def region_for(
    descriptor: LocationDescriptor,
    grid: SectorGrid,
    midline_fraction: float = DEFAULT_MIDLINE_FRACTION,
    within_mask: np.ndarray | None = None,
) -> VoxelRegion:
    """Resolve a descriptor to the intersection of its axis slabs.

    Unspecified axes impose no constraint; zone is ignored. Midline selects a
    central X band of width max(1, round(extent * midline_fraction)) around
    the X split. ``within_mask`` additionally intersects with a gland mask.
    """
    x_lo, x_hi = grid.bbox.lo[0], grid.bbox.hi[0]
    y_lo, y_hi = grid.bbox.lo[1], grid.bbox.hi[1]
    z_lo, z_hi = grid.bbox.lo[2], grid.bbox.hi[2]
    if descriptor.laterality is Laterality.RIGHT:
        x_hi = grid.x_split - 1
    elif descriptor.laterality is Laterality.LEFT:
        x_lo = grid.x_split
    elif descriptor.laterality is Laterality.MIDLINE:
        x_lo, x_hi = _midline_band(grid, midline_fraction)
    if descriptor.ap is AP.ANTERIOR:
        y_hi = grid.y_split - 1
    elif descriptor.ap is AP.POSTERIOR:
        y_lo = grid.y_split
    z1, z2 = grid.z_splits
    if descriptor.si is not SI.UNSPECIFIED:
        band_for = {SI.APEX: 0, SI.MID: 1, SI.BASE: 2} if grid.base_at_positive_z \
            else {SI.BASE: 0, SI.MID: 1, SI.APEX: 2}
        band = band_for[descriptor.si]
        if band == 0:
            z_hi = z1 - 1
        elif band == 1:
            z_lo, z_hi = z1, z2 - 1
        else:
            z_lo = z2
    return VoxelRegion(lo=(x_lo, y_lo, z_lo), hi=(x_hi, y_hi, z_hi), mask=within_mask)


def locate_component(component, grid: SectorGrid) -> set[Cell]:
    """Cells touched by a component; out-of-bbox voxels clamp to the nearest cell.

    Accepts a LesionComponent or any iterable of (x, y, z) voxels.
    """
    voxels: Iterable[tuple[int, int, int]] = getattr(component, "voxels", component)
    cells: set[Cell] = set()
    seen_any = False
    for x, y, z in voxels:
        seen_any = True
        cells.add(grid.cell_of(int(x), int(y), int(z)))
    if not seen_any:
        raise ValueError("component has no voxels")
    return cells
