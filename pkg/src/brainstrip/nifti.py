"""Single-file NIfTI-1 reader/writer for 3D volumes.

Only the subset the pipeline needs: ``n+1`` files with a 348-byte header,
no extensions, datatypes uint8/int16/float32/float64 and three spatial
dimensions. Geometry is taken from pixdim and the qform offset (falling back
to the sform translation column).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from brainstrip.volume import Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DTYPE_CODES = {
    2: np.dtype("uint8"),
    4: np.dtype("int16"),
    16: np.dtype("float32"),
    64: np.dtype("float64"),
}
CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
MAX_DIM = 32767


class NiftiError(ValueError):
    """Base error; ``field`` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MalformedHeaderError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class DimsOverflowError(NiftiError):
    pass


def _header_bytes(vol: Volume3D) -> bytes:
    code = CODE_FOR_DTYPE.get(vol.dtype)
    if code is None:
        raise UnsupportedDatatypeError("datatype", f"cannot store element type {vol.dtype}")
    for n in vol.dims:
        if n > MAX_DIM:
            raise DimsOverflowError("dim", f"{n} exceeds the 16-bit limit {MAX_DIM}")
    hdr = bytearray(HEADER_SIZE)
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, vol.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<3f3f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_nifti(vol: Volume3D, path) -> None:
    """Write ``vol`` as a single-file NIfTI-1 volume (atomic replace)."""
    header = _header_bytes(vol)
    payload = np.asarray(vol.data).astype(vol.dtype.newbyteorder("<"), copy=False)
    body = payload.tobytes(order="F")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".nii-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_nifti(path) -> Volume3D:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise MalformedHeaderError("sizeof_hdr", f"file is {len(raw)} bytes, shorter than a header")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        found = struct.unpack_from("<i", raw, 0)[0]
        raise MalformedHeaderError("sizeof_hdr", f"expected {HEADER_SIZE}, found {found}")
    if raw[344:348] != MAGIC:
        raise MalformedHeaderError("magic", f"expected single-file magic n+1, found {raw[344:348]!r}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise MalformedHeaderError("dim", f"expected a 3D volume, found dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise MalformedHeaderError("dim", f"non-positive dimension in {dims}")

    code = struct.unpack_from(end + "h", raw, 70)[0]
    if code not in DTYPE_CODES:
        raise UnsupportedDatatypeError("datatype", f"code {code} is not one of {sorted(DTYPE_CODES)}")
    dtype = DTYPE_CODES[code].newbyteorder(end)

    pixdim = struct.unpack_from(end + "8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if not all(s > 0 for s in spacing):
        raise MalformedHeaderError("pixdim", f"voxel sizes must be positive, found {spacing}")

    vox_offset = int(struct.unpack_from(end + "f", raw, 108)[0])
    if vox_offset < HEADER_SIZE:
        raise MalformedHeaderError("vox_offset", f"{vox_offset} points inside the header")
    slope, inter = struct.unpack_from(end + "ff", raw, 112)

    qform_code, sform_code = struct.unpack_from(end + "hh", raw, 252)
    if qform_code > 0:
        origin = struct.unpack_from(end + "3f", raw, 268)
    elif sform_code > 0:
        origin = tuple(struct.unpack_from(end + "4f", raw, 280 + 16 * k)[3] for k in range(3))
    else:
        origin = (0.0, 0.0, 0.0)

    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise TruncatedDataError(
            "data", f"need {nbytes} bytes after offset {vox_offset}, file has {len(raw) - vox_offset}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = flat.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = data.astype(np.float64) * float(slope) + float(inter)
    return Volume3D(data, spacing, tuple(float(o) for o in origin))
