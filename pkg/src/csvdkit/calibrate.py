"""Anatomy-aware binarization and lesion extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .anatomy import ALLOWED, DEFAULT_CAP_MM, DistanceField, ZoneConfig, build_zone_map, distance_field
from .volume import (
    BinaryMask,
    LabelVolume,
    ProbVolume,
    VoxelGrid,
    assert_same_geometry,
    indices_to_world,
)

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class CalibrationParams:
    base: float = 0.5
    lam: float = 0.5
    gamma: float = 0.5
    connectivity: int = 26
    min_voxels: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.base < 1:
            raise ValueError(f"base must be in (0, 1), got {self.base}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.base + self.lam > 1 + 1e-12:
            raise ValueError("base + lambda must not exceed 1")
        if self.connectivity not in CONNECTIVITY_RANK:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_voxels < 1:
            raise ValueError("min_voxels must be >= 1")


@dataclass(eq=False)
class Lesion:
    id: int
    voxel_indices: np.ndarray  # (n, 3) int, lexicographically sorted
    centroid_mm: np.ndarray
    voxel_count: int
    volume_mm3: float
    zone_tier: int | None = None
    flat_index: np.ndarray = field(default=None, repr=False)  # x-fastest linear indices

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "voxel_count": self.voxel_count,
            "volume_mm3": self.volume_mm3,
            "centroid_mm": [float(v) for v in self.centroid_mm],
            "zone_tier": self.zone_tier,
        }


def adaptive_threshold(D: DistanceField, zones: VoxelGrid, params: CalibrationParams) -> VoxelGrid:
    assert_same_geometry(D.grid, zones)
    t = params.base + params.lam * np.tanh(params.gamma * D.grid.data)
    t[zones.data == ALLOWED] = params.base
    return zones.with_data(t)


def binarize(p: ProbVolume, T: VoxelGrid) -> BinaryMask:
    assert_same_geometry(p, T)
    return BinaryMask((p.data >= T.data).astype(np.float64), p.affine, p.spacing)


def label_components(fg: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(fg, structure=structure)
    return labels, int(n)


def connected_components(
    mask: BinaryMask, params: CalibrationParams = CalibrationParams(), zones: VoxelGrid | None = None
) -> list[Lesion]:
    """Lesions sorted by size (descending), ties broken by smallest voxel index."""
    fg = mask.data.astype(bool)
    labels, n = label_components(fg, params.connectivity)
    if n == 0:
        return []
    coords = np.argwhere(labels)  # lexicographic (i, j, k) order
    lab = labels[tuple(coords.T)]
    order = np.argsort(lab, kind="stable")
    coords, lab = coords[order], lab[order]
    counts = np.bincount(lab, minlength=n + 1)[1:]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    keep = np.flatnonzero(counts >= params.min_voxels)
    if keep.size == 0:
        return []
    # coords are lexicographic within each label, so the first row is the smallest index
    first = coords[starts[keep]]
    order = np.lexsort((first[:, 2], first[:, 1], first[:, 0], -counts[keep]))
    keep = keep[order]

    dims = mask.dims
    sums = np.stack([np.bincount(lab, weights=coords[:, a], minlength=n + 1)[1:] for a in range(3)], axis=1)
    mean_ijk = sums[keep] / counts[keep, None]
    centroids = indices_to_world(mask.affine, mean_ijk)
    flat = np.ravel_multi_index(tuple(coords.T), dims, order="F")
    tiers = [None] * len(keep)
    if zones is not None:
        probe = np.clip(np.rint(mean_ijk).astype(np.int64), 0, np.asarray(dims) - 1)
        inside = labels[tuple(probe.T)] == keep + 1
        probe[~inside] = coords[starts[keep[~inside]]]
        tiers = zones.data[tuple(probe.T)].astype(int).tolist()
    vv = mask.voxel_volume
    lesions = []
    for new_id, c in enumerate(keep.tolist(), start=1):
        sl = slice(starts[c], starts[c] + counts[c])
        lesions.append(
            Lesion(
                id=new_id,
                voxel_indices=coords[sl],
                centroid_mm=centroids[new_id - 1],
                voxel_count=int(counts[c]),
                volume_mm3=float(counts[c] * vv),
                zone_tier=tiers[new_id - 1],
                flat_index=flat[sl],
            )
        )
    return lesions


def lesions_mask(lesions: list[Lesion], like: VoxelGrid) -> BinaryMask:
    data = np.zeros(like.dims)
    for les in lesions:
        data[tuple(les.voxel_indices.T)] = 1.0
    return BinaryMask(data, like.affine, like.spacing)


def calibrated_detect(
    p: ProbVolume,
    anatomy: LabelVolume,
    cfg: ZoneConfig,
    params: CalibrationParams = CalibrationParams(),
    cap: float = DEFAULT_CAP_MM,
    workers: int = 1,
) -> tuple[BinaryMask, list[Lesion]]:
    assert_same_geometry(p, anatomy)
    zones = build_zone_map(anatomy, cfg)
    D = distance_field(zones, cap, workers=workers)
    T = adaptive_threshold(D, zones, params)
    mask = binarize(p, T)
    lesions = connected_components(mask, params, zones)
    if params.min_voxels > 1:
        mask = lesions_mask(lesions, mask)
    return mask, lesions
