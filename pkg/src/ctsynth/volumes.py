"""CT volume container, intensity preprocessing, resampling, slicing and file IO.

Volumes live on a canonical (X, Y, Z) grid in one of two intensity domains:

* ``HU``    raw Hounsfield units. Values may exceed the clinical window before
            clipping; ``clip_and_normalize`` clamps to [-1000, 1000] and maps
            affinely onto [0, 1].
* ``UNIT``  normalized intensities in [0, 1]. This is the domain every model
            in the package consumes and produces.

File formats: a single-file NIfTI-1 codec (written with a diagonal sform
carrying the voxel spacing, float32 payload, optional gzip) and an ``.npz``
fallback that round-trips spacing at full float64 precision. The NIfTI reader
supports the subset this package writes: little-endian, single-file,
unextended headers with canonical axis order. Anything fancier belongs to a
real neuroimaging stack, not here.
"""

from __future__ import annotations

import gzip
import io
import math
import struct
import zipfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError, ValidationError

HU_MIN = -1000.0
HU_MAX = 1000.0

CANONICAL_ORIENTATION = "RAS"


class Domain(str, Enum):
    HU = "HU"
    UNIT = "UNIT"


class Plane(str, Enum):
    """Orthogonal slicing planes. XY stacks along Z, YZ along X, ZX along Y."""

    XY = "XY"
    YZ = "YZ"
    ZX = "ZX"


@dataclass
class CtVolume:
    """A 3D scalar grid with physical voxel spacing and an intensity domain.

    ``data`` is indexed (x, y, z). ``spacing_mm`` gives the physical edge
    length of a voxel along each axis.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    domain: Domain
    orientation: str = CANONICAL_ORIENTATION

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got ndim={self.data.ndim}")
        if any(s < 1 for s in self.data.shape):
            raise ShapeError(f"volume has a degenerate axis: shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3:
            raise ValidationError("spacing_mm must have three components")
        if any(not math.isfinite(s) or s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing_mm must be positive, got {self.spacing_mm}")
        self.domain = Domain(self.domain)
        if self.domain is Domain.UNIT and self.data.size:
            lo = float(self.data.min())
            hi = float(self.data.max())
            if lo < -1e-6 or hi > 1.0 + 1e-6:
                raise DomainError(
                    f"UNIT volume out of [0, 1]: range [{lo:.6g}, {hi:.6g}]"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def clip_and_normalize(v: CtVolume) -> CtVolume:
    """Clamp an HU volume to [-1000, 1000] and map it affinely onto [0, 1]."""
    if v.domain is not Domain.HU:
        raise DomainError(f"clip_and_normalize expects an HU volume, got {v.domain.value}")
    clipped = np.clip(v.data, HU_MIN, HU_MAX)
    unit = (clipped - HU_MIN) / (HU_MAX - HU_MIN)
    return replace(v, data=unit, domain=Domain.UNIT)


def denormalize_to_hu(v: CtVolume) -> CtVolume:
    """Exact affine inverse of :func:`clip_and_normalize` on [0, 1]."""
    if v.domain is not Domain.UNIT:
        raise DomainError(f"denormalize_to_hu expects a UNIT volume, got {v.domain.value}")
    hu = v.data * (HU_MAX - HU_MIN) + HU_MIN
    return replace(v, data=hu, domain=Domain.HU)


def _resample_axis(arr: np.ndarray, axis: int, m: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == m:
        return arr
    if m == 1:
        coords = np.array([(n - 1) / 2.0])
    else:
        coords = np.arange(m) * ((n - 1) / (m - 1))
    lo = np.floor(coords).astype(np.int64)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (coords - lo).astype(arr.dtype, copy=False)
    shape = [1] * arr.ndim
    shape[axis] = m
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # a + (b-a)*w rather than (1-w)*a + w*b: keeps constant inputs bit-exact.
    return a + (b - a) * w


def resample_to_grid(v: CtVolume, target_shape: tuple[int, int, int]) -> CtVolume:
    """Trilinear resampling to ``target_shape``.

    Interpolation is separable (one linear pass per axis) with align-corners
    coordinate mapping. The output records the new spacing,
    ``spacing_out = spacing_in * (shape_in / shape_out)`` per axis, so the
    physical extent the grid covers stays declared.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or any(t < 1 for t in target_shape):
        raise ValidationError(f"target shape must be three dims >= 1, got {target_shape}")
    for ax, n in enumerate(v.shape):
        if n < 1:
            raise ShapeError(f"cannot resample degenerate axis {ax}")
    out = v.data
    for ax in range(3):
        out = _resample_axis(out, ax, target_shape[ax])
    spacing = tuple(
        v.spacing_mm[ax] * (v.shape[ax] / target_shape[ax]) for ax in range(3)
    )
    return CtVolume(out, spacing, v.domain, v.orientation)


def extract_plane_slices(v: CtVolume, plane: Plane) -> np.ndarray:
    """Stack of 2D slices along the axis orthogonal to ``plane``.

    Returns an array of shape (n_slices, h, w):
    XY -> (Z, X, Y), YZ -> (X, Y, Z), ZX -> (Y, Z, X). Views, no copies.
    """
    plane = Plane(plane)
    if plane is Plane.XY:
        return np.moveaxis(v.data, 2, 0)
    if plane is Plane.YZ:
        return v.data
    return np.transpose(v.data, (1, 2, 0))


# ---------------------------------------------------------------------------
# NIfTI-1 single-file codec (minimal subset) and .npz fallback
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_HDR_SIZE = 348
_VOX_OFFSET = 352.0


def _build_nifti_header(v: CtVolume) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    dim = (3,) + v.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # datatype float32, bitpix
    pixdim = (1.0,) + v.spacing_mm + (0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("<b", hdr, 123, 2)  # spatial units: mm
    descrip = f"ctsynth domain={v.domain.value} orient={v.orientation}".encode()
    struct.pack_into("<80s", hdr, 148, descrip[:80])
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform none, sform aligned
    sx, sy, sz = v.spacing_mm
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    return bytes(hdr)


def _write_nifti(v: CtVolume, path: Path) -> None:
    payload = _build_nifti_header(v)
    payload += b"\x00\x00\x00\x00"  # no header extensions
    payload += np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="F")
    if path.name.endswith(".gz"):
        # mtime pinned so identical volumes compress to identical bytes
        payload = gzip.compress(payload, 9, mtime=0)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _read_nifti(path: Path) -> CtVolume:
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise ValidationError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        raise ValidationError(
            f"{path}: unsupported NIfTI header (sizeof_hdr={sizeof_hdr}; "
            "only little-endian NIfTI-1 is handled)"
        )
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValidationError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] not in (3, 4) or (dim[0] == 4 and dim[4] != 1):
        raise ShapeError(f"{path}: expected a 3D volume, got dim={dim}")
    shape = tuple(int(d) for d in dim[1:4])
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ValidationError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    descrip = struct.unpack_from("<80s", raw, 148)[0].rstrip(b"\x00").decode(errors="replace")
    domain = Domain.HU
    orientation = CANONICAL_ORIENTATION
    for tok in descrip.split():
        if tok.startswith("domain="):
            domain = Domain(tok.split("=", 1)[1])
        elif tok.startswith("orient="):
            orientation = tok.split("=", 1)[1]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=int(vox_offset))
    data = data.reshape(shape, order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope or 1.0) + inter
    return CtVolume(data, spacing, domain, orientation)


def write_npz_deterministic(path: str | Path, **arrays) -> Path:
    """np.load-compatible .npz writer with pinned zip timestamps.

    np.savez stamps each archive member with the wall clock, so two writes of
    the same arrays differ at the byte level; this variant exists for the
    reproducibility contract on sampling outputs.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)
    return path


def _write_npz(v: CtVolume, path: Path) -> None:
    write_npz_deterministic(
        path,
        data=v.data,
        spacing_mm=np.asarray(v.spacing_mm, dtype=np.float64),
        domain=np.str_(v.domain.value),
        orientation=np.str_(v.orientation),
    )


def _read_npz(path: Path) -> CtVolume:
    with np.load(path, allow_pickle=False) as blob:
        return CtVolume(
            blob["data"],
            tuple(blob["spacing_mm"].tolist()),
            Domain(str(blob["domain"])),
            str(blob["orientation"]),
        )


def save_volume(v: CtVolume, path: str | Path) -> Path:
    """Write a volume; format chosen by suffix (.nii, .nii.gz, .npz)."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        _write_nifti(v, path)
    elif path.suffix == ".npz":
        _write_npz(v, path)
    else:
        raise ValidationError(f"unsupported volume format: {path.name}")
    return path


def load_volume(path: str | Path) -> CtVolume:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"volume file not found: {path}")
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    if path.suffix == ".npz":
        return _read_npz(path)
    raise ValidationError(f"unsupported volume format: {path.name}")
