"""Discrete lesion candidates from probability maps.

Ensembling, thresholding and 3D connected components. Components carry a
deterministic ordering (peak probability descending, then voxel count, then
lexicographic minimum voxel) so every downstream matching step is repeatable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .volume import MASK_KINDS, Volume3D, VolumeKind

__all__ = [
    "LesionComponent",
    "ensemble_mean",
    "threshold_components",
    "mask_components",
    "component_iou",
    "binarize",
    "component_summary",
]

Voxel = tuple[int, int, int]

# full 3x3x3 neighborhood = face + edge + corner adjacency
_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
_STRUCT_6 = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class LesionComponent:
    """One connected super-threshold blob.

    voxels is the full (x, y, z) index set; centroid is the real-valued mean
    of the indices, which always lies inside the component bounding box.
    """

    voxels: frozenset[Voxel]
    peak_prob: float
    centroid: tuple[float, float, float]
    volume_mm3: float

    def __post_init__(self) -> None:
        if not self.voxels:
            raise ValueError("component must contain at least one voxel")
        if not 0.0 <= self.peak_prob <= 1.0:
            raise ValueError(f"peak_prob {self.peak_prob} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.voxels)

    @cached_property
    def voxel_array(self) -> np.ndarray:
        """(N, 3) int array of voxel indices, lexicographically sorted."""
        arr = np.array(sorted(self.voxels), dtype=np.intp)
        arr.setflags(write=False)
        return arr

    @cached_property
    def bbox_min(self) -> Voxel:
        return tuple(int(v) for v in self.voxel_array.min(axis=0))

    @cached_property
    def bbox_max(self) -> Voxel:
        return tuple(int(v) for v in self.voxel_array.max(axis=0))

    @property
    def min_voxel(self) -> Voxel:
        """Lexicographically smallest voxel; the deterministic tie-breaker."""
        return tuple(int(v) for v in self.voxel_array[0])


def ensemble_mean(maps: list[Volume3D]) -> Volume3D:
    """Voxelwise arithmetic mean of probability maps on a shared grid."""
    if not maps:
        raise ValueError("need at least one probability map")
    first = maps[0]
    for i, m in enumerate(maps):
        if m.kind is not VolumeKind.PROBABILITY_MAP:
            raise ValueError(f"map {i} is {m.kind.value}, not a probability map")
        if not first.same_geometry(m):
            raise ValueError(
                f"map {i} geometry {m.dims}/{m.spacing} differs from {first.dims}/{first.spacing}"
            )
    if len(maps) == 1:
        return first
    acc = np.zeros(first.dims, dtype=np.float64)
    for m in maps:
        acc += m.data
    acc /= len(maps)
    # guard against summation round-off nudging past the closed interval
    np.clip(acc, 0.0, 1.0, out=acc)
    return Volume3D(data=acc, spacing=first.spacing, kind=VolumeKind.PROBABILITY_MAP)


def _components_from_binary(
    binary: np.ndarray,
    values: np.ndarray,
    spacing: tuple[float, float, float],
    connectivity: int,
    min_volume_mm3: float,
) -> list[LesionComponent]:
    if connectivity == 26:
        structure = _STRUCT_26
    elif connectivity == 6:
        structure = _STRUCT_6
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    if not binary.any():
        return []
    labels, n = ndimage.label(binary, structure=structure)
    coords = np.argwhere(binary)          # lexicographic (x, y, z) order
    labs = labels[binary]
    vals = values[binary]
    order = np.argsort(labs, kind="stable")  # stable: keeps lex order per label
    coords, labs, vals = coords[order], labs[order], vals[order]
    starts = np.searchsorted(labs, np.arange(1, n + 2))
    voxel_vol = spacing[0] * spacing[1] * spacing[2]

    comps = []
    for k in range(n):
        c = coords[starts[k]:starts[k + 1]]
        v = vals[starts[k]:starts[k + 1]]
        volume = len(c) * voxel_vol
        if volume < min_volume_mm3:
            continue
        comps.append(
            LesionComponent(
                voxels=frozenset(map(tuple, c.tolist())),
                peak_prob=float(v.max()),
                centroid=tuple(float(x) for x in c.mean(axis=0)),
                volume_mm3=volume,
            )
        )
    comps.sort(key=lambda comp: (-comp.peak_prob, -len(comp), comp.min_voxel))
    return comps


def threshold_components(
    prob_map: Volume3D,
    threshold: float,
    connectivity: int = 26,
    min_volume_mm3: float = 0.0,
) -> list[LesionComponent]:
    """Connected components of the voxel set {value >= threshold}.

    The comparison is closed so threshold 1.0 still captures saturated voxels.
    Returned list is sorted by peak_prob descending, ties broken by larger
    voxel count, then by lexicographic minimum voxel.
    """
    if prob_map.kind is not VolumeKind.PROBABILITY_MAP:
        raise ValueError(f"expected a probability map, got {prob_map.kind.value}")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    binary = prob_map.data >= threshold
    return _components_from_binary(
        binary, prob_map.data, prob_map.spacing, connectivity, min_volume_mm3
    )


def mask_components(
    mask: Volume3D,
    connectivity: int = 26,
) -> list[LesionComponent]:
    """Connected components of a binary mask; peak_prob is 1.0 throughout."""
    if mask.kind not in MASK_KINDS:
        raise ValueError(f"expected a mask, got {mask.kind.value}")
    binary = mask.data > 0
    values = binary.astype(np.float64)
    return _components_from_binary(binary, values, mask.spacing, connectivity, 0.0)


def component_iou(a: frozenset[Voxel] | set[Voxel], b: frozenset[Voxel] | set[Voxel]) -> float:
    """Intersection over union of two voxel sets."""
    if not a or not b:
        raise ValueError("component_iou requires two non-empty voxel sets")
    inter = len(a & b)
    union = len(a) + len(b) - inter
    return inter / union


def binarize(
    components: list[LesionComponent],
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> Volume3D:
    """Union of component voxel sets as a binary mask volume."""
    data = np.zeros(dims, dtype=np.uint8)
    for comp in components:
        arr = comp.voxel_array
        if arr.min() < 0 or (arr >= np.asarray(dims)).any():
            raise ValueError(
                f"component voxels outside volume dims {dims}: "
                f"bbox {comp.bbox_min}..{comp.bbox_max}"
            )
        data[arr[:, 0], arr[:, 1], arr[:, 2]] = 1
    return Volume3D(data=data, spacing=spacing, kind=VolumeKind.BINARY_MASK)


def component_summary(comp: LesionComponent) -> dict:
    """JSON-friendly digest: size, peak, centroid and bounding box."""
    return {
        "voxel_count": len(comp),
        "peak_prob": comp.peak_prob,
        "centroid": list(comp.centroid),
        "volume_mm3": comp.volume_mm3,
        "bbox": {"min": list(comp.bbox_min), "max": list(comp.bbox_max)},
    }
