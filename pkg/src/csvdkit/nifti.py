"""Minimal NIfTI-1 single-file (``.nii`` / ``.nii.gz``) reader and writer.

Only 3D images are accepted. Foreign extensions are skipped. Both byte
orders are read; files are always written little-endian.
"""

from __future__ import annotations

import gzip
import logging
import os
from pathlib import Path

import numpy as np

from .volume import VoxelGrid, affine_from_spacing

log = logging.getLogger(__name__)

HEADER_SIZE = 348
MAX_VOXELS = 2**31 - 1
ECODE_COMMENT = 6
AFFINE_TAG = b"csvdkit-affine64:"

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

# NIfTI datatype code -> numpy type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
CODES = {np.dtype(v): k for k, v in DATATYPES.items()}

# xyzt_units spatial code -> factor to millimetres
_UNIT_TO_MM = {0: 1.0, 1: 1000.0, 2: 1.0, 3: 0.001}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 content."""


def header_dtype(byteorder: str = "<") -> np.dtype:
    return np.dtype(HEADER_FIELDS).newbyteorder(byteorder)


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream") from exc
    return raw


def parse_header(raw: bytes) -> tuple[np.void, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    for order in "<>":
        size = np.frombuffer(raw[:4], dtype=order + "i4")[0]
        if size == HEADER_SIZE:
            hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order))[0]
            break
    else:
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"])
    if magic.rstrip(b"\x00") != b"n+1":
        if magic.rstrip(b"\x00") == b"ni1":
            raise NiftiError("header/image pairs (.hdr/.img) are not supported")
        raise NiftiError(f"bad magic {magic!r}")
    return hdr, order


def quaternion_affine(hdr: np.void) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < -1e-6:
        raise NiftiError("invalid qform quaternion")
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pixdim = hdr["pixdim"].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [float(hdr[k]) for k in ("qoffset_x", "qoffset_y", "qoffset_z")]
    return aff


def _usable(aff: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(aff)) and abs(np.linalg.det(aff[:3, :3])) > 1e-12)


def _extension_affine(raw: bytes, offset: int, byteorder: str) -> np.ndarray | None:
    """float64 affine stashed in a comment extension by :func:`save_volume`."""
    pos = HEADER_SIZE
    if len(raw) < pos + 4 or raw[pos] == 0:
        return None
    pos += 4
    while pos + 8 <= offset:
        esize, ecode = np.frombuffer(raw[pos : pos + 8], dtype=byteorder + "i4")
        if esize < 16 or pos + esize > offset:
            return None
        body = raw[pos + 8 : pos + esize]
        if ecode == ECODE_COMMENT and body.startswith(AFFINE_TAG):
            vals = body[len(AFFINE_TAG) :].rstrip(b"\x00").split()
            if len(vals) == 16:
                return np.array([float(v) for v in vals]).reshape(4, 4)
        pos += int(esize)
    return None


def header_affine(hdr: np.void) -> np.ndarray:
    """Index->world map, preferring sform over qform, then pixdim alone."""
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        if _usable(aff):
            return aff
        log.warning("sform present but singular; trying qform")
    if hdr["qform_code"] > 0:
        try:
            aff = quaternion_affine(hdr)
        except NiftiError:
            aff = None
        if aff is not None and _usable(aff):
            return aff
        log.warning("qform present but unusable")
    pix = np.abs(hdr["pixdim"][1:4].astype(np.float64))
    pix[~(pix > 0)] = 1.0
    log.warning("no valid sform/qform; affine built from pixdim %s", pix.tolist())
    return affine_from_spacing(pix)


def load_volume(path: str | os.PathLike) -> VoxelGrid:
    """Read a 3D NIfTI-1 image into a float64 :class:`VoxelGrid`."""
    path = Path(path)
    raw = _read_bytes(path)
    hdr, order = parse_header(raw)

    dim = hdr["dim"].astype(np.int64)
    ndim = int(dim[0])
    if ndim < 1 or ndim > 7:
        raise NiftiError(f"dim[0]={ndim} out of range")
    if ndim < 3 or np.any(dim[4 : ndim + 1] > 1):
        raise NiftiError(f"expected a 3D image, got dim={dim[: ndim + 1].tolist()}")
    shape = tuple(int(n) for n in dim[1:4])
    if min(shape) < 1:
        raise NiftiError(f"all spatial dims must be >= 1, got {shape}")
    nvox = shape[0] * shape[1] * shape[2]
    if nvox > MAX_VOXELS:
        raise NiftiError(f"dimension overflow: {shape}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        offset = HEADER_SIZE + 4
    need = offset + nvox * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"dimension overflow: data needs {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dtype, count=nvox, offset=offset)
    data = flat.astype(np.float64).reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1.0 or inter != 0.0):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)

    aff = header_affine(hdr)
    precise = _extension_affine(raw, offset, order)
    if precise is not None and hdr["sform_code"] > 0 and np.allclose(precise, aff, rtol=1e-5, atol=1e-5):
        aff = precise
    factor = _UNIT_TO_MM.get(int(hdr["xyzt_units"]) & 0x07, 1.0)
    if factor != 1.0:
        aff = aff.copy()
        aff[:3, :] *= factor
    return VoxelGrid(data, aff)


def _storage_dtype(data: np.ndarray) -> np.dtype:
    """Smallest supported type that stores ``data`` losslessly."""
    if np.all(np.isfinite(data)) and np.all(data == np.round(data)):
        lo, hi = data.min(), data.max()
        for t in (np.uint8, np.int16, np.int32):
            info = np.iinfo(t)
            if lo >= info.min and hi <= info.max:
                return np.dtype(t)
    if np.array_equal(data.astype(np.float32).astype(np.float64), data, equal_nan=True):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def _quaternion_fields(aff: np.ndarray, spacing: np.ndarray) -> dict | None:
    rot = aff[:3, :3] / spacing
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot = rot.copy()
        rot[:, 2] *= -1
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
        return None
    # Shepperd-style extraction, keeping a >= 0 as NIfTI requires
    tr = np.trace(rot)
    if tr > -0.99:
        a = 0.5 * np.sqrt(1.0 + tr)
        b = (rot[2, 1] - rot[1, 2]) / (4 * a)
        c = (rot[0, 2] - rot[2, 0]) / (4 * a)
        d = (rot[1, 0] - rot[0, 1]) / (4 * a)
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        q = np.zeros(4)
        q[i + 1] = 0.5 * np.sqrt(max(1.0 + rot[i, i] - rot[j, j] - rot[k, k], 0.0))
        q[j + 1] = (rot[j, i] + rot[i, j]) / (4 * q[i + 1])
        q[k + 1] = (rot[k, i] + rot[i, k]) / (4 * q[i + 1])
        q[0] = (rot[k, j] - rot[j, k]) / (4 * q[i + 1])
        if q[0] < 0:
            q = -q
        a, b, c, d = q
    return {"quatern_b": b, "quatern_c": c, "quatern_d": d, "qfac": qfac}


def build_header(grid: VoxelGrid, dtype: np.dtype) -> np.ndarray:
    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *grid.dims, 1, 1, 1, 1]
    hdr["datatype"] = CODES[np.dtype(dtype)]
    hdr["bitpix"] = np.dtype(dtype).itemsize * 8
    spacing = np.asarray(grid.spacing)
    pixdim = np.ones(8)
    pixdim[1:4] = spacing
    hdr["vox_offset"] = HEADER_SIZE + 4 + len(_affine_extension(grid.affine))
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    aff = grid.affine
    q = _quaternion_fields(aff, spacing)
    if q is not None:
        hdr["qform_code"] = 1
        pixdim[0] = q["qfac"]
        hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = q["quatern_b"], q["quatern_c"], q["quatern_d"]
        hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = aff[:3, 3]
    hdr["pixdim"] = pixdim
    hdr["sform_code"] = 2
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = aff[0], aff[1], aff[2]
    hdr["magic"] = b"n+1\x00"
    return hdr


def _affine_extension(aff: np.ndarray) -> bytes:
    body = AFFINE_TAG + " ".join(repr(float(v)) for v in aff.ravel()).encode()
    esize = 8 + len(body)
    esize += -esize % 16
    body = body.ljust(esize - 8, b"\x00")
    return np.array([esize, ECODE_COMMENT], dtype="<i4").tobytes() + body


def save_volume(grid: VoxelGrid, path: str | os.PathLike, dtype=None) -> None:
    """Write ``grid`` as NIfTI-1; gzip when the name ends in ``.gz``.

    Without ``dtype`` the smallest lossless storage type is chosen. The
    sform is stored in float32, so affines survive to ~1e-6 relative.
    """
    path = Path(path)
    dtype = _storage_dtype(grid.data) if dtype is None else np.dtype(dtype)
    if dtype not in CODES:
        raise NiftiError(f"cannot store datatype {dtype}")
    hdr = build_header(grid, dtype)
    payload = (
        hdr.tobytes()
        + b"\x01\x00\x00\x00"
        + _affine_extension(grid.affine)
        + grid.data.astype(dtype.newbyteorder("<")).tobytes(order="F")
    )
    if path.suffix == ".gz":
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)
