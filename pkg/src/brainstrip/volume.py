"""3D scalar volumes, grid resampling and intensity whitening.

Voxel data is held as a numpy array of shape ``(nx, ny, nz)``; when flattened
for storage the x index varies fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from brainstrip._grid import linear_weights, nearest_indices

SUPPORTED_DTYPES = (np.dtype(np.uint8), np.dtype(np.int16), np.dtype(np.float32), np.dtype(np.float64))


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume3D:
    """An immutable 3D grid with voxel spacing (mm) and origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        if any(n < 1 for n in data.shape):
            raise VolumeError(f"dims must be positive, got {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.dtype not in SUPPORTED_DTYPES:
            raise VolumeError(f"unsupported element type {data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise VolumeError("spacing and origin need three components")
        if not all(s > 0 for s in spacing):
            raise VolumeError(f"spacing must be strictly positive, got {spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def with_data(self, data: np.ndarray) -> Volume3D:
        """Same grid, new voxel values."""
        return Volume3D(data, self.spacing, self.origin)

    def same_grid(self, other: Volume3D, atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
        )

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))

    def is_probability(self) -> bool:
        return bool(np.all((self.data >= 0) & (self.data <= 1)))

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.dtype == other.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


def as_mask(data: np.ndarray, like: Volume3D) -> Volume3D:
    """Wrap a boolean/0-1 array as a uint8 BinaryMask on ``like``'s grid."""
    return Volume3D(np.asarray(data).astype(np.uint8), like.spacing, like.origin)


def resample_to_grid(vol: Volume3D, target_dims: Sequence[int], method: str = "trilinear") -> Volume3D:
    """Resize ``vol`` to ``target_dims`` using corner-aligned sampling.

    Output voxel ``i`` along an axis samples input coordinate
    ``i * (n_in - 1) / (n_out - 1)``, so the first and last voxels of both
    grids coincide. Use ``method="nearest"`` for masks.
    """
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or any(n < 1 for n in target):
        raise VolumeError(f"target dims must be three positive ints, got {target_dims}")
    if method not in ("trilinear", "nearest"):
        raise VolumeError(f"unknown resampling method {method!r}")
    if method == "trilinear":
        for n_in, n_out in zip(vol.dims, target):
            if n_out == 1 and n_in > 1:
                raise VolumeError("degenerate trilinear mapping to a single voxel; use nearest")

    if method == "nearest":
        ix, iy, iz = (nearest_indices(n_in, n_out) for n_in, n_out in zip(vol.dims, target))
        out = vol.data[np.ix_(ix, iy, iz)].copy()
    else:
        out = np.asarray(vol.data, dtype=np.float64)
        for axis, (n_in, n_out) in enumerate(zip(vol.dims, target)):
            if n_in == n_out:
                continue
            w = linear_weights(n_in, n_out)
            out = np.moveaxis(np.tensordot(w, out, axes=([1], [axis])), 0, axis)
        if vol.dtype == np.float32:
            out = out.astype(np.float32)

    spacing = []
    for s, n_in, n_out in zip(vol.spacing, vol.dims, target):
        if n_in > 1 and n_out > 1:
            spacing.append(s * (n_in - 1) / (n_out - 1))
        else:
            spacing.append(s * n_in / n_out)
    return Volume3D(out, tuple(spacing), vol.origin)


def whiten(vol: Volume3D) -> Volume3D:
    """Zero mean, unit population standard deviation."""
    x = np.asarray(vol.data, dtype=np.float64)
    mu = x.mean()
    sigma = np.sqrt(np.mean((x - mu) ** 2))
    if not sigma > 0 or np.ptp(x) == 0:
        raise VolumeError("cannot whiten a constant volume (zero variance)")
    return vol.with_data((x - mu) / sigma)
