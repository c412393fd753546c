"""Volume data model, CTV1 file format, and the preprocessing chain.

Volumes are stored as (nz, ny, nx) arrays, x fastest, with physical spacing
in mm. HU volumes are float32; label volumes are uint8.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

HU_MIN = -1024.0
HU_MAX = 3072.0

CTV_MAGIC = b"CTV1"
DTYPE_F32 = 0
DTYPE_U8 = 1


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray  # (nz, ny, nx) float32, HU
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError("voxels must be 3D (nz, ny, nx)")
        if min(self.sx, self.sy, self.sz) <= 0:
            raise ValueError("spacings must be positive")

    @property
    def nx(self) -> int:
        return self.voxels.shape[2]

    @property
    def ny(self) -> int:
        return self.voxels.shape[1]

    @property
    def nz(self) -> int:
        return self.voxels.shape[0]


@dataclass
class LabelVolume:
    voxels: np.ndarray  # (nz, ny, nx) uint8
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        if self.voxels.ndim != 3:
            raise ValueError("voxels must be 3D (nz, ny, nx)")

    @property
    def nx(self) -> int:
        return self.voxels.shape[2]

    @property
    def ny(self) -> int:
        return self.voxels.shape[1]

    @property
    def nz(self) -> int:
        return self.voxels.shape[0]


@dataclass
class NormVolume:
    """Same geometry as Volume, values in [-1, 1]."""
    voxels: np.ndarray
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)

    @property
    def nx(self) -> int:
        return self.voxels.shape[2]

    @property
    def ny(self) -> int:
        return self.voxels.shape[1]

    @property
    def nz(self) -> int:
        return self.voxels.shape[0]


@dataclass
class SliceStack:
    slices: np.ndarray  # (n_total, ny, nx), normalized values
    start: int          # slice index within the source volume
    sz: float

    @property
    def n_total(self) -> int:
        return self.slices.shape[0]


def clip_normalize(v: Volume) -> NormVolume:
    """Map HU to [-1, 1]: clip to [-1024, 3072], then affine rescale."""
    if not np.isfinite(v.voxels).all():
        idx = np.unravel_index(int(np.argmin(np.isfinite(v.voxels))), v.voxels.shape)
        raise ValueError(f"non-finite voxel at (z,y,x)={tuple(int(i) for i in idx)}")
    clipped = np.clip(v.voxels, HU_MIN, HU_MAX)
    norm = (clipped - HU_MIN) / ((HU_MAX - HU_MIN) / 2.0) - 1.0
    return NormVolume(norm.astype(np.float32), v.sx, v.sy, v.sz)


def denormalize(nv: NormVolume, slack: float = 1e-6) -> Volume:
    """Exact affine inverse of clip_normalize on [-1, 1]."""
    vox = nv.voxels
    if vox.min() < -1.0 - slack or vox.max() > 1.0 + slack:
        raise ValueError(
            f"values outside [-1,1]: range [{vox.min():.6f}, {vox.max():.6f}]")
    hu = (np.clip(vox, -1.0, 1.0) + 1.0) * ((HU_MAX - HU_MIN) / 2.0) + HU_MIN
    return Volume(hu.astype(np.float32), nv.sx, nv.sy, nv.sz)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian truncated at 3 sigma."""
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def downsample_axial(v: Volume, factor: int) -> Volume:
    """Anti-aliased in-plane decimation: Gaussian blur (sigma = 0.5*factor,
    mirrored boundary) then take every factor-th sample in x and y."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return Volume(v.voxels.copy(), v.sx, v.sy, v.sz)
    if v.nx % factor or v.ny % factor:
        raise ValueError(f"factor {factor} does not divide grid {v.nx}x{v.ny}")
    k = gaussian_kernel(0.5 * factor)
    blurred = v.voxels.astype(np.float64)
    blurred = convolve1d(blurred, k, axis=1, mode="mirror")
    blurred = convolve1d(blurred, k, axis=2, mode="mirror")
    out = blurred[:, ::factor, ::factor]
    return Volume(out.astype(np.float32), v.sx * factor, v.sy * factor, v.sz)


def extract_segment(nv: NormVolume, start: int, n_total: int) -> SliceStack:
    """A window of n_total consecutive slices starting at `start`."""
    if start < 0 or n_total < 1 or start + n_total > nv.nz:
        raise ValueError(
            f"window [{start}, {start + n_total}) overflows volume with nz={nv.nz}")
    return SliceStack(nv.voxels[start:start + n_total].copy(), start, nv.sz)


_HEADER = struct.Struct("<4sIIIfffB3x")


def write_volume(v: Volume | LabelVolume, path) -> None:
    dtype = DTYPE_U8 if isinstance(v, LabelVolume) else DTYPE_F32
    header = _HEADER.pack(CTV_MAGIC, v.nx, v.ny, v.nz,
                          v.sx, v.sy, v.sz, dtype)
    payload = v.voxels.astype("<f4" if dtype == DTYPE_F32 else np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path) -> Volume | LabelVolume:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size or blob[:4] != CTV_MAGIC:
        raise VolumeFormatError(f"bad magic in {path!r}")
    magic, nx, ny, nz, sx, sy, sz, dtype = _HEADER.unpack_from(blob, 0)
    count = nx * ny * nz
    itemsize = 4 if dtype == DTYPE_F32 else 1
    if dtype not in (DTYPE_F32, DTYPE_U8):
        raise VolumeFormatError(f"unknown dtype code {dtype}")
    if len(blob) - _HEADER.size < count * itemsize:
        raise VolumeFormatError(f"truncated payload in {path!r}")
    raw = blob[_HEADER.size:_HEADER.size + count * itemsize]
    if dtype == DTYPE_F32:
        vox = np.frombuffer(raw, dtype="<f4").reshape(nz, ny, nx).copy()
        return Volume(vox, sx, sy, sz)
    vox = np.frombuffer(raw, dtype=np.uint8).reshape(nz, ny, nx).copy()
    return LabelVolume(vox, sx, sy, sz)
