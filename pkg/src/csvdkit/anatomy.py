"""Anatomical reliability tiers and the truncated one-sided distance field."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ._edt import squared_edt
from .volume import LabelVolume, VoxelGrid

log = logging.getLogger(__name__)

ALLOWED, TRANSITION, EXCLUSION = 1, 2, 3
DEFAULT_CAP_MM = 10.0

# FreeSurfer/FastSurfer aseg + DKT label IDs.
_CORTEX_PARCELS = list(range(1000, 1036)) + list(range(2000, 2036))
DEFAULT_ZONES = {
    # cerebral WM, WM hypointensities, corpus callosum, thalamus, caudate,
    # putamen, pallidum, accumbens, ventral DC, brainstem
    1: [2, 41, 77, 78, 79, 251, 252, 253, 254, 255, 10, 49, 11, 50, 12, 51, 13, 52, 26, 58, 28, 60, 16],
    # hippocampus, cerebellar WM
    2: [17, 53, 7, 46],
    # cortex (aseg + DKT parcels), lateral/inferior/3rd/4th ventricles, CSF,
    # choroid plexus, cerebellar cortex
    3: [3, 42, *_CORTEX_PARCELS, 4, 5, 43, 44, 14, 15, 24, 31, 63, 8, 47],
}


class ZoneError(ValueError):
    pass


@dataclass(frozen=True)
class ZoneConfig:
    zone1_labels: frozenset[int]
    zone2_labels: frozenset[int]
    zone3_labels: frozenset[int]
    unlisted_policy: int = EXCLUSION

    def __post_init__(self) -> None:
        for name in ("zone1_labels", "zone2_labels", "zone3_labels"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))
        if self.unlisted_policy not in (ALLOWED, TRANSITION, EXCLUSION):
            raise ZoneError(f"unlisted_policy must be 1, 2 or 3, got {self.unlisted_policy}")
        sets = (self.zone1_labels, self.zone2_labels, self.zone3_labels)
        for a in range(3):
            for b in range(a + 1, 3):
                shared = sets[a] & sets[b]
                if shared:
                    raise ZoneError(f"labels {sorted(shared)} listed in zones {a + 1} and {b + 1}")

    @classmethod
    def default(cls) -> "ZoneConfig":
        return cls(*(frozenset(DEFAULT_ZONES[z]) for z in (1, 2, 3)))

    @classmethod
    def from_dict(cls, d: dict) -> "ZoneConfig":
        """Keys ``zone1``, ``zone2``, ``zone3`` (lists of ints) and optional ``unlisted``."""
        unknown = set(d) - {"zone1", "zone2", "zone3", "unlisted"}
        if unknown:
            raise ZoneError(f"unknown zone config keys: {sorted(unknown)}")
        try:
            return cls(
                frozenset(int(v) for v in d.get("zone1") or []),
                frozenset(int(v) for v in d.get("zone2") or []),
                frozenset(int(v) for v in d.get("zone3") or []),
                int(d.get("unlisted", EXCLUSION)),
            )
        except (TypeError, ValueError) as exc:
            raise ZoneError(f"bad zone config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ZoneConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return {
            "zone1": sorted(self.zone1_labels),
            "zone2": sorted(self.zone2_labels),
            "zone3": sorted(self.zone3_labels),
            "unlisted": self.unlisted_policy,
        }

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, default_flow_style=None, sort_keys=False)


@dataclass(frozen=True, eq=False)
class DistanceField:
    grid: VoxelGrid
    cap: float


def build_zone_map(labels: LabelVolume, cfg: ZoneConfig) -> VoxelGrid:
    lab = labels.data.astype(np.int64)
    listed = [(t, m) for t, m in ((1, cfg.zone1_labels), (2, cfg.zone2_labels), (3, cfg.zone3_labels)) if m]
    lo, hi = (int(lab.min()), int(lab.max())) if lab.size else (0, 0)
    if hi - lo < 1 << 20:
        # dense lookup table over the label range: one gather instead of set tests
        lut = np.full(hi - lo + 1, float(cfg.unlisted_policy))
        for tier, members in listed:
            ids = np.fromiter(members, dtype=np.int64) - lo
            lut[ids[(ids >= 0) & (ids < lut.size)]] = tier
        return labels.with_data(lut[lab - lo])
    tiers = np.full(lab.shape, float(cfg.unlisted_policy))
    for tier, members in listed:
        tiers[np.isin(lab, np.fromiter(members, dtype=np.int64))] = tier
    return labels.with_data(tiers)


def distance_field(zones: VoxelGrid, cap: float = DEFAULT_CAP_MM, workers: int = 1) -> DistanceField:
    """Distance in mm from each voxel center to the nearest Zone-1 voxel center, capped.

    The transform is separable and exact for affines whose index axes are
    orthogonal in world space; with a sheared affine the per-axis spacings
    are used and a warning is logged.
    """
    if not cap > 0:
        raise ZoneError(f"cap must be positive, got {cap}")
    allowed = zones.data == ALLOWED
    if not allowed.any():
        raise ZoneError("no Zone-1 voxel present; distance field undefined")
    if zones.has_shear():
        log.warning("sheared affine: distance field uses per-axis spacing only")
    d2 = squared_edt(allowed, zones.spacing, workers=workers)
    d = np.minimum(np.sqrt(d2), cap)
    d[allowed] = 0.0
    return DistanceField(zones.with_data(d), float(cap))
