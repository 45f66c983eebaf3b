"""3D voxel volumes with spacing metadata.

Defines :class:`Volume3D` plus the operations every other module builds on:
NIFTI-1 subset load/save, resampling, and z-score normalization. Volumes are
immutable after construction and all operations return new volumes.

Axis convention (repo-wide): +X = patient-left, +Y = patient-posterior,
+Z = patient-superior. Arrays are indexed ``data[x, y, z]`` and stored
x-fastest on disk, matching NIFTI's layout.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Volume3D",
    "VolumeKind",
    "Interp",
    "NiftiFormatError",
    "OrientationError",
    "load_volume",
    "save_volume",
    "atomic_write_bytes",
    "resample",
    "zscore_normalize",
]


class VolumeKind(Enum):
    BINARY_MASK = "binary_mask"
    LABEL_MAP = "label_map"
    PROBABILITY_MAP = "probability_map"
    INTENSITY = "intensity"


MASK_KINDS = (VolumeKind.BINARY_MASK, VolumeKind.LABEL_MAP)


class Interp(Enum):
    NEAREST = "nearest"
    TRILINEAR = "trilinear"


class NiftiFormatError(ValueError):
    """Corrupt, truncated, or unsupported NIFTI-1 file."""


class OrientationError(NiftiFormatError):
    """Header encodes a non-axis-aligned (oblique or flipped) orientation."""


def _storage_dtype(kind: VolumeKind) -> np.dtype:
    # Probability/intensity math runs in float64 internally; files stay float32.
    if kind is VolumeKind.BINARY_MASK:
        return np.dtype(np.uint8)
    if kind is VolumeKind.LABEL_MAP:
        return np.dtype(np.int16)
    return np.dtype(np.float64)


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense 3D scalar grid with voxel spacing in millimeters.

    ``data`` has shape ``(nx, ny, nz)``; ``spacing`` is (sx, sy, sz) mm/voxel.
    Construction validates the kind-specific invariants and freezes the array.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: VolumeKind

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got ndim={arr.ndim}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3:
            raise ValueError("spacing must have three components")
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be positive, got {spacing}")
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ValueError("volume contains NaN or Inf")
        if self.kind is VolumeKind.BINARY_MASK:
            bad = (arr != 0) & (arr != 1)
            if bad.any():
                raise ValueError("binary mask contains values outside {0, 1}")
        elif self.kind is VolumeKind.LABEL_MAP:
            if np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.round(arr)):
                raise ValueError("label map contains non-integer values")
            if arr.size and (arr.min() < np.iinfo(np.int16).min or arr.max() > np.iinfo(np.int16).max):
                raise ValueError("label map values exceed int16 range")
        elif self.kind is VolumeKind.PROBABILITY_MAP:
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("probability map contains values outside [0, 1]")
        arr = arr.astype(_storage_dtype(self.kind), copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_geometry(self, other: "Volume3D", tol: float = 1e-6) -> bool:
        return self.dims == other.dims and all(
            abs(a - b) <= tol for a, b in zip(self.spacing, other.spacing)
        )


# ---------------------------------------------------------------------------
# NIFTI-1 subset I/O
#
# Single-file little-endian NIFTI-1 (.nii / .nii.gz), magic "n+1\0", 3D only,
# datatypes uint8 / int16 / float32. Honors dim, datatype, pixdim,
# scl_slope/scl_inter, and vox_offset; qform/sform are validated to be
# axis-aligned with positive scales and otherwise reduced to spacing.
# ---------------------------------------------------------------------------

_HDR_SIZE = 348
_VOX_OFFSET = 352
_DTYPE_CODES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"


def _disk_dtype(kind: VolumeKind) -> np.dtype:
    if kind is VolumeKind.BINARY_MASK:
        return np.dtype(np.uint8)
    if kind is VolumeKind.LABEL_MAP:
        return np.dtype(np.int16)
    return np.dtype(np.float32)


def _build_header(dims: tuple[int, int, int], spacing: tuple[float, float, float],
                  dtype: np.dtype) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODE_FOR_DTYPE[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 252, 0)    # qform_code
    struct.pack_into("<h", hdr, 254, 1)    # sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = _MAGIC_SINGLE
    return bytes(hdr)


def atomic_write_bytes(path: str | Path, raw: bytes) -> None:
    """Write via a sibling temp file + rename, so a crashed run never leaves
    a partial file at ``path`` and parallel writers never interleave."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_volume(vol: Volume3D, path: str | Path) -> None:
    """Write ``vol`` as a single-file NIFTI-1, gzipped when the name ends in .gz.

    uint8 and float32 payloads round-trip bit-exact.
    """
    path = Path(path)
    dtype = _disk_dtype(vol.kind)
    header = _build_header(vol.dims, vol.spacing, dtype)
    payload = np.ascontiguousarray(vol.data.astype(dtype).transpose(2, 1, 0)).tobytes()
    raw = header + b"\x00" * (_VOX_OFFSET - _HDR_SIZE) + payload
    if path.name.endswith(".gz"):
        # mtime=0 keeps repeated runs byte-identical.
        raw = gzip.compress(raw, mtime=0)
    atomic_write_bytes(path, raw)


def _check_orientation(hdr: bytes) -> None:
    sform_code = struct.unpack_from("<h", hdr, 254)[0]
    qform_code = struct.unpack_from("<h", hdr, 252)[0]
    if sform_code > 0:
        sx = struct.unpack_from("<4f", hdr, 280)
        sy = struct.unpack_from("<4f", hdr, 296)
        sz = struct.unpack_from("<4f", hdr, 312)
        off_diag = (sx[1], sx[2], sy[0], sy[2], sz[0], sz[1])
        if any(abs(v) > 1e-6 for v in off_diag) or sx[0] <= 0 or sy[1] <= 0 or sz[2] <= 0:
            raise OrientationError(
                "sform encodes a non-axis-aligned or flipped orientation; "
                "only canonical axis-aligned volumes are supported"
            )
    elif qform_code > 0:
        b, c, d = struct.unpack_from("<3f", hdr, 256)
        qfac = struct.unpack_from("<f", hdr, 76)[0]
        if abs(b) > 1e-6 or abs(c) > 1e-6 or abs(d) > 1e-6 or qfac < 0:
            raise OrientationError(
                "qform encodes a rotated or flipped orientation; "
                "only canonical axis-aligned volumes are supported"
            )


def load_volume(path: str | Path, kind: VolumeKind = VolumeKind.INTENSITY) -> Volume3D:
    """Load a single-file NIFTI-1 volume.

    ``kind`` is the caller-supplied hint for how to interpret the voxels;
    the kind invariants (mask values, probability range) are enforced on load.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < _HDR_SIZE:
        raise NiftiFormatError(f"{path.name}: truncated header ({len(raw)} bytes)")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != _HDR_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == _HDR_SIZE:
            raise NiftiFormatError(f"{path.name}: big-endian NIFTI-1 is not supported")
        raise NiftiFormatError(f"{path.name}: bad sizeof_hdr {sizeof_hdr}, not a NIFTI-1 file")
    magic = raw[344:348]
    if magic == _MAGIC_PAIR:
        raise NiftiFormatError(f"{path.name}: two-file (.hdr/.img) NIFTI is not supported")
    if magic != _MAGIC_SINGLE:
        raise NiftiFormatError(f"{path.name}: bad magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiFormatError(f"{path.name}: expected 3D volume, header says dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx < 1 or ny < 1 or nz < 1:
        raise NiftiFormatError(f"{path.name}: non-positive dimensions {(nx, ny, nz)}")
    dt_code = struct.unpack_from("<h", raw, 70)[0]
    if dt_code not in _DTYPE_CODES:
        raise NiftiFormatError(f"{path.name}: unsupported datatype code {dt_code}")
    dtype = _DTYPE_CODES[dt_code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = (pixdim[1], pixdim[2], pixdim[3])
    if any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiFormatError(f"{path.name}: non-positive pixdim {spacing}")
    _check_orientation(raw)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    if vox_offset < _HDR_SIZE:
        raise NiftiFormatError(f"{path.name}: vox_offset {vox_offset} inside header")
    nbytes = nx * ny * nz * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise NiftiFormatError(
            f"{path.name}: truncated payload ({len(raw) - vox_offset} of {nbytes} bytes)"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=vox_offset)
    data = flat.reshape((nz, ny, nx)).transpose(2, 1, 0)
    slope = struct.unpack_from("<f", raw, 112)[0]
    inter = struct.unpack_from("<f", raw, 116)[0]
    if math.isfinite(slope) and slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data.astype(np.float64) * slope + inter
    return Volume3D(data=data, spacing=spacing, kind=kind)


# ---------------------------------------------------------------------------
# Resampling and normalization
# ---------------------------------------------------------------------------


def _axis_coords(n_src: int, n_dst: int, src_sp: float, dst_sp: float) -> np.ndarray:
    # Voxel-center alignment: output center (i+0.5)*dst maps to source
    # coordinate in voxel units; clamped at the edges.
    return (np.arange(n_dst, dtype=np.float64) + 0.5) * (dst_sp / src_sp) - 0.5


def resample(vol: Volume3D, target_spacing: tuple[float, float, float],
             mode: Interp) -> Volume3D:
    """Resample onto ``target_spacing``; dims = round(old · old_sp / new_sp), min 1.

    Masks and label maps require ``Interp.NEAREST`` (values are preserved
    exactly); probability/intensity volumes may use either mode.
    """
    target = tuple(float(t) for t in target_spacing)
    if any(not math.isfinite(t) or t <= 0 for t in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    if mode is Interp.TRILINEAR and vol.kind in MASK_KINDS:
        raise ValueError("trilinear interpolation is not valid for mask volumes")
    if target == vol.spacing:
        return Volume3D(data=vol.data.copy(), spacing=vol.spacing, kind=vol.kind)
    new_dims = tuple(
        max(1, int(math.floor(n * s / t + 0.5)))
        for n, s, t in zip(vol.dims, vol.spacing, target)
    )
    coords = [
        _axis_coords(vol.dims[a], new_dims[a], vol.spacing[a], target[a])
        for a in range(3)
    ]
    if mode is Interp.NEAREST:
        idx = [
            np.clip(np.floor(c + 0.5).astype(np.intp), 0, vol.dims[a] - 1)
            for a, c in enumerate(coords)
        ]
        out = vol.data[np.ix_(idx[0], idx[1], idx[2])]
        return Volume3D(data=out, spacing=target, kind=vol.kind)
    lo_idx, hi_idx, hi_w = [], [], []
    for a, c in enumerate(coords):
        cc = np.clip(c, 0.0, vol.dims[a] - 1.0)
        i0 = np.floor(cc).astype(np.intp)
        i0 = np.minimum(i0, vol.dims[a] - 1)
        i1 = np.minimum(i0 + 1, vol.dims[a] - 1)
        lo_idx.append(i0)
        hi_idx.append(i1)
        hi_w.append(cc - i0)
    data = vol.data.astype(np.float64)
    out = np.zeros(new_dims, dtype=np.float64)
    for cx in (0, 1):
        wx = (hi_w[0] if cx else 1.0 - hi_w[0])[:, None, None]
        ix = hi_idx[0] if cx else lo_idx[0]
        for cy in (0, 1):
            wy = (hi_w[1] if cy else 1.0 - hi_w[1])[None, :, None]
            iy = hi_idx[1] if cy else lo_idx[1]
            for cz in (0, 1):
                wz = (hi_w[2] if cz else 1.0 - hi_w[2])[None, None, :]
                iz = hi_idx[2] if cz else lo_idx[2]
                out += wx * wy * wz * data[np.ix_(ix, iy, iz)]
    if vol.kind is VolumeKind.PROBABILITY_MAP:
        out = np.clip(out, 0.0, 1.0)
    return Volume3D(data=out, spacing=target, kind=vol.kind)


def zscore_normalize(vol: Volume3D) -> Volume3D:
    """Shift/scale an intensity volume to mean 0, standard deviation 1."""
    if vol.kind is not VolumeKind.INTENSITY:
        raise ValueError(f"z-score normalization requires an intensity volume, got {vol.kind.value}")
    if vol.data.size < 2:
        raise ValueError("z-score normalization needs at least 2 voxels")
    data = vol.data.astype(np.float64)
    std = float(data.std())
    if std == 0.0:
        raise ValueError("z-score normalization undefined for zero-variance volume")
    out = (data - float(data.mean())) / std
    return Volume3D(data=out, spacing=vol.spacing, kind=VolumeKind.INTENSITY)
