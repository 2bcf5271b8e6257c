"""Load/save (C, D, H, W) tensors from NIfTI-1 or a raw shape-prefixed blob.

Blob layout (little-endian): magic ``b"T4D1"``, uint32 ndim (always 4),
``ndim`` uint64 extents, then float64 values in C order (last axis fastest).

A 3D NIfTI volume ``(nx, ny, nz)`` becomes a single-channel tensor of shape
``(1, nz, ny, nx)`` so that the tensor's last axis is the file's fastest axis.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..nifti import load_volume, save_volume
from ..volume import VoxelGrid
from .losses import ShapeError, as_tensor4d

MAGIC = b"T4D1"


def is_nifti(path) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ShapeError(f"{path}: not a tensor blob")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim != 4:
        raise ShapeError(f"{path}: expected 4 dims, header says {ndim}")
    shape = struct.unpack_from("<4Q", raw, 8)
    count = int(np.prod(shape))
    body = raw[8 + 8 * ndim :]
    if len(body) != 8 * count:
        raise ShapeError(f"{path}: payload has {len(body)} bytes, shape {shape} needs {8 * count}")
    return as_tensor4d(np.frombuffer(body, dtype="<f8").reshape(shape))


def write_blob(t: np.ndarray, path) -> None:
    t = as_tensor4d(t)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", 4) + struct.pack("<4Q", *t.shape))
        fh.write(t.astype("<f8").tobytes(order="C"))


def read_tensor(path) -> tuple[np.ndarray, VoxelGrid | None]:
    """Returns the tensor and, for NIfTI input, the source grid (for writing results back)."""
    if is_nifti(path):
        grid = load_volume(path)
        return grid.data.transpose(2, 1, 0)[None].copy(), grid
    return read_blob(path), None


def write_tensor(t: np.ndarray, path, like: VoxelGrid | None = None) -> None:
    t = as_tensor4d(t)
    if is_nifti(path):
        if t.shape[0] != 1:
            raise ShapeError("only single-channel tensors can be written as NIfTI")
        vol = t[0].transpose(2, 1, 0)
        grid = VoxelGrid(vol) if like is None else like.with_data(vol)
        save_volume(grid, path)
    else:
        write_blob(t, path)
