"""Dense 3D grids and the MVOL/MSEG binary format.

Arrays are stored channel-first as ``(channels, nz, ny, nx)`` in C order, so the
flat offset of ``(c, z, y, x)`` is ``((c*nz + z)*ny + y)*nx + x`` with x fastest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MVOL_MAGIC = b"MVOL1"
MSEG_MAGIC = b"MSEG1"
_HEADER = struct.Struct("<5sIIIIfff")


class ValidationError(ValueError):
    pass


class FormatError(ValueError):
    pass


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(eq=False)
class Volume:
    """Float32 volume of shape ``(channels, nz, ny, nx)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be 4D (c, z, y, x), got shape {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise ValidationError("volume contains NaN or infinite values")
        self.data = data
        self.spacing = _check_spacing(self.spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def nz(self) -> int:
        return self.data.shape[1]

    @property
    def ny(self) -> int:
        return self.data.shape[2]

    @property
    def nx(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple:
        """Spatial shape in array order ``(nz, ny, nx)``."""
        return self.data.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(eq=False)
class LabelVolume:
    """Uint8 label map of shape ``(nz, ny, nx)``; 0 is background."""

    data: np.ndarray
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[0] == 1:
            data = data[0]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"label data must be 3D (z, y, x), got shape {data.shape}")
        if data.dtype != np.uint8:
            if np.issubdtype(data.dtype, np.floating) and not np.isfinite(data).all():
                raise ValidationError("label data contains NaN or infinite values")
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ValidationError("labels must lie in [0, 255]")
            data = data.astype(np.uint8)
        self.data = np.ascontiguousarray(data)
        self.spacing = _check_spacing(self.spacing)

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def labels(self) -> list:
        """Sorted non-background labels present."""
        return [int(v) for v in np.unique(self.data) if v != 0]

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def flat_index(c, z, y, x, shape) -> int:
    """Offset of a voxel in the flat channel-major, x-fastest layout."""
    nc, nz, ny, nx = shape
    return ((c * nz + z) * ny + y) * nx + x


def write_mvol(path, vol) -> None:
    path = Path(path)
    if isinstance(vol, Volume):
        # re-run validation in case data was mutated in place
        if not np.isfinite(vol.data).all():
            raise ValidationError(f"{path}: volume contains NaN or infinite values")
        magic, channels = MVOL_MAGIC, vol.channels
        payload = vol.data.astype("<f4", copy=False).tobytes()
    elif isinstance(vol, LabelVolume):
        magic, channels = MSEG_MAGIC, 1
        payload = vol.data.astype(np.uint8, copy=False).tobytes()
    else:
        raise ValidationError(f"cannot write object of type {type(vol).__name__}")
    nz, ny, nx = vol.shape
    header = _HEADER.pack(magic, channels, nx, ny, nz, *vol.spacing)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_mvol(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < 5 or raw[:5] not in (MVOL_MAGIC, MSEG_MAGIC):
        raise FormatError(f"{path}: unknown magic {raw[:5]!r}")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}")
    magic, channels, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    itemsize = 4 if magic == MVOL_MAGIC else 1
    if magic == MSEG_MAGIC and channels != 1:
        raise FormatError(f"{path}: label volume must have 1 channel, header says {channels}")
    expected = _HEADER.size + channels * nx * ny * nz * itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    body = raw[_HEADER.size:]
    try:
        if magic == MVOL_MAGIC:
            data = np.frombuffer(body, dtype="<f4").reshape(channels, nz, ny, nx)
            return Volume(data.astype(np.float32), (sx, sy, sz))
        data = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx)
        return LabelVolume(data.copy(), (sx, sy, sz))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def normalize_intensity(vol: Volume) -> Volume:
    """Min-max rescale a single-channel volume to [0, 1]; constant input maps to zeros."""
    if vol.channels != 1:
        raise ValidationError(f"normalize_intensity expects 1 channel, got {vol.channels}")
    v = vol.data.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        out = np.zeros_like(v)
    else:
        out = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), vol.spacing)
