"""Voxel grids with physical geometry.

Arrays are indexed ``data[i, j, k]`` with shape ``(nx, ny, nz)``. The flat
linearization used on disk and in every module is x-fastest, i.e. numpy
Fortran order over that shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

GEOMETRY_ATOL = 1e-4
PROB_SLACK = 1e-9


class GeometryError(ValueError):
    """Two volumes do not share dims/affine."""


class VolumeError(ValueError):
    """A grid violates its construction invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def affine_from_spacing(spacing: Sequence[float]) -> np.ndarray:
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = (float(s) for s in spacing)
    return aff


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar field on a physical lattice.

    ``data`` is stored as float64 (labels are kept as exact integers in float64,
    which is lossless below 2**53). ``spacing`` is derived from ``affine`` when
    not supplied.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeError(f"all dims must be >= 1, got {data.shape}")
        aff = np.asarray(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise VolumeError("affine must be 4x4")
        if not np.all(np.isfinite(aff)) or abs(np.linalg.det(aff[:3, :3])) < 1e-12:
            raise VolumeError("affine must be finite and invertible")
        norms = np.linalg.norm(aff[:3, :3], axis=0)
        if self.spacing is None:
            spacing = tuple(float(v) for v in norms)
        else:
            spacing = tuple(float(v) for v in self.spacing)
            if len(spacing) != 3:
                raise VolumeError("spacing must have three components")
            if not np.allclose(norms, spacing, rtol=1e-6, atol=0.0):
                raise VolumeError(
                    f"affine column norms {norms.tolist()} disagree with spacing {spacing}"
                )
        if min(spacing) <= 0:
            raise VolumeError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "affine", _frozen(aff))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def flat(self) -> np.ndarray:
        """Data in x-fastest linear order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(data, self.affine, self.spacing)

    def has_shear(self, tol: float = 1e-6) -> bool:
        """True when the index axes are not mutually orthogonal in world space."""
        m = self.affine[:3, :3] / np.asarray(self.spacing)
        return not np.allclose(m.T @ m, np.eye(3), atol=tol)


class ProbVolume(VoxelGrid):
    """Probability map; values within ``PROB_SLACK`` of [0, 1] are clamped."""

    def __post_init__(self) -> None:
        super().__post_init__()
        d = self.data
        if np.any(~np.isfinite(d)) or d.min() < -PROB_SLACK or d.max() > 1 + PROB_SLACK:
            raise VolumeError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(np.clip(d, 0.0, 1.0)))


class LabelVolume(VoxelGrid):
    def __post_init__(self) -> None:
        super().__post_init__()
        d = self.data
        if np.any(d < 0) or np.any(d != np.round(d)):
            raise VolumeError("labels must be non-negative integers")


class BinaryMask(VoxelGrid):
    def __post_init__(self) -> None:
        super().__post_init__()
        if not np.all((self.data == 0) | (self.data == 1)):
            raise VolumeError("mask values must be 0 or 1")

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)


def as_prob(grid: VoxelGrid) -> ProbVolume:
    return ProbVolume(grid.data, grid.affine, grid.spacing)


def as_labels(grid: VoxelGrid) -> LabelVolume:
    return LabelVolume(grid.data, grid.affine, grid.spacing)


def as_mask(grid: VoxelGrid, threshold: float | None = None) -> BinaryMask:
    """Interpret ``grid`` as a mask; with ``threshold``, foreground is ``data > threshold``."""
    data = grid.data if threshold is None else (grid.data > threshold).astype(np.float64)
    return BinaryMask(data, grid.affine, grid.spacing)


def index_to_world(grid: VoxelGrid, index: Sequence[float]) -> np.ndarray:
    ijk = np.asarray(index, dtype=np.float64)
    if ijk.shape != (3,):
        raise IndexError("index must have three components")
    if np.any(ijk < 0) or np.any(ijk > np.asarray(grid.dims) - 1):
        raise IndexError(f"index {tuple(index)} outside dims {grid.dims}")
    return grid.affine[:3, :3] @ ijk + grid.affine[:3, 3]


def indices_to_world(affine: np.ndarray, ijk: np.ndarray) -> np.ndarray:
    """Vectorized index -> world map for an ``(n, 3)`` array; no range check."""
    ijk = np.asarray(ijk, dtype=np.float64)
    return ijk @ affine[:3, :3].T + affine[:3, 3]


def assert_same_geometry(a: VoxelGrid, b: VoxelGrid, atol: float = GEOMETRY_ATOL) -> None:
    if a.dims != b.dims:
        raise GeometryError(f"dims differ: {a.dims} vs {b.dims}")
    diff = float(np.max(np.abs(a.affine - b.affine)))
    if diff > atol:
        raise GeometryError(f"affines differ by {diff:.3g} mm (tolerance {atol})")
