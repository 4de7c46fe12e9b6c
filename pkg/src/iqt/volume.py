"""Volumetric data types, intensity statistics and IQTV file I/O.

Arrays are held in memory as numpy arrays indexed ``[x, y, z]``
(``[channel, x, y, z]`` for masks). The on-disk payload is x-fastest,
which is Fortran order of the in-memory array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import (
    BadMagicError,
    ChannelCountError,
    DataError,
    InvalidHeaderError,
    TruncatedPayloadError,
)

MAGIC = b"IQTV"
VERSION = 1
HEADER_SIZE = 64
# magic, version, nx, ny, nz, sx, sy, sz, n_channels, 28 bytes padding
_HEADER = struct.Struct("<4sI3I3fI28x")
assert _HEADER.size == HEADER_SIZE

TISSUES = ("wm", "gm", "other")

Spacing = Tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    # header stores f32; keep in-memory spacing f32-representable so round trips are exact
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise DataError(f"voxel spacing must be three positive reals, got {spacing!r}")
    return sp


def _frozen_f32(data, ndim: int, what: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise DataError(f"{what} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise DataError(f"{what} has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D field with voxel spacing in mm.

    ``data`` is a read-only float32 array of shape ``(nx, ny, nz)``.
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_f32(self.data, 3, "volume data"))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    nx = property(lambda self: self.data.shape[0])
    ny = property(lambda self: self.data.shape[1])
    nz = property(lambda self: self.data.shape[2])
    sx = property(lambda self: self.spacing[0])
    sy = property(lambda self: self.spacing[1])
    sz = property(lambda self: self.spacing[2])

    def with_data(self, data, spacing=None) -> "Volume3D":
        return Volume3D(data, self.spacing if spacing is None else spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class TissueMasks:
    """Probabilistic WM/GM/other masks, shape ``(3, nx, ny, nz)``.

    Channels partition unity per voxel.
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = _frozen_f32(self.data, 4, "mask data")
        if arr.shape[0] != 3:
            raise ChannelCountError(f"masks need 3 channels, got {arr.shape[0]}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("mask values must lie in [0, 1]")
        total = arr.astype(np.float64).sum(axis=0)
        err = float(np.max(np.abs(total - 1.0)))
        if err > 1e-6:
            raise DataError(f"masks do not partition unity (max deviation {err:.3g})")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @classmethod
    def from_channels(cls, wm, gm, other=None, spacing=(1.0, 1.0, 1.0)) -> "TissueMasks":
        wm = np.asarray(wm, dtype=np.float64)
        gm = np.asarray(gm, dtype=np.float64)
        if other is None:
            other = 1.0 - wm - gm
        return cls(np.stack([wm, gm, np.asarray(other, dtype=np.float64)]), spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape[1:])

    wm = property(lambda self: self.data[0])
    gm = property(lambda self: self.data[1])
    other = property(lambda self: self.data[2])

    def channel(self, tissue: str) -> np.ndarray:
        return self.data[TISSUES.index(tissue)]

    def __eq__(self, other):
        if not isinstance(other, TissueMasks):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class VolumeStats:
    min: float
    max: float
    mean: float
    std: float
    foreground_fraction: float


def stats(v: Volume3D, background_epsilon: float = 1e-6) -> VolumeStats:
    """Intensity summary; reductions accumulate in float64."""
    d = v.data.astype(np.float64)
    mean = float(d.mean())
    # clamp guards the ordering invariant against last-ulp rounding of the mean
    lo, hi = float(d.min()), float(d.max())
    mean = min(max(mean, lo), hi)
    return VolumeStats(
        min=lo,
        max=hi,
        mean=mean,
        std=float(d.std()),
        foreground_fraction=float(np.count_nonzero(d > background_epsilon)) / d.size,
    )


def _payload(v: Union[Volume3D, TissueMasks]) -> Tuple[bytes, int]:
    if isinstance(v, TissueMasks):
        chans = [np.asarray(c, dtype="<f4").ravel(order="F") for c in v.data]
        return np.concatenate(chans).tobytes(), 3
    return np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes(), 1


def save_volume(v: Union[Volume3D, TissueMasks], path) -> None:
    """Write ``v`` as an IQTV file."""
    nx, ny, nz = v.shape
    payload, nch = _payload(v)
    header = _HEADER.pack(MAGIC, VERSION, nx, ny, nz, *v.spacing, nch)
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Union[Volume3D, TissueMasks]:
    """Read an IQTV file; 3-channel files come back as TissueMasks."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, nx, ny, nz, sx, sy, sz, nch = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise InvalidHeaderError(f"{path}: unsupported version {version}")
    if min(nx, ny, nz) <= 0:
        raise InvalidHeaderError(f"{path}: non-positive dimensions {(nx, ny, nz)}")
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise InvalidHeaderError(f"{path}: non-positive spacing {(sx, sy, sz)}")
    if nch not in (1, 3):
        raise ChannelCountError(f"{path}: channel count {nch} not in {{1, 3}}")
    count = nx * ny * nz * nch
    expected = HEADER_SIZE + 4 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - HEADER_SIZE} bytes, expected {4 * count}")
    if len(raw) > expected:
        raise InvalidHeaderError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=HEADER_SIZE)
    spacing = (sx, sy, sz)
    if nch == 1:
        return Volume3D(flat.reshape((nx, ny, nz), order="F"), spacing)
    chans = flat.reshape((nch, nx * ny * nz))
    return TissueMasks(np.stack([c.reshape((nx, ny, nz), order="F") for c in chans]), spacing)
