"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Covers the subset this package needs: 3D/4D arrays, the common integer and
float datatypes, sform/qform affines, and scl_slope/scl_inter scaling.
Writing always emits little-endian single-file NIfTI with an sform affine.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(np.float32): 16, np.dtype(np.int16): 4, np.dtype(np.uint8): 2,
          np.dtype(np.float64): 64, np.dtype(np.int32): 8}

HEADER_SIZE = 348


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime so identical content yields identical bytes
        return gzip.GzipFile(path, mode, mtime=0)
    return open(path, mode)


def read_nifti(path):
    """Load a NIfTI-1 file. Returns (data, affine) with data in (x, y, z[, t])
    index order, scaled by scl_slope/scl_inter when present."""
    with _open(path, "rb") as f:
        hdr = f.read(HEADER_SIZE)
        if len(hdr) < HEADER_SIZE:
            raise ValueError(f"{path}: truncated NIfTI header")
        sizeof_hdr = struct.unpack("<i", hdr[:4])[0]
        bo = "<"
        if sizeof_hdr != HEADER_SIZE:
            sizeof_hdr = struct.unpack(">i", hdr[:4])[0]
            if sizeof_hdr != HEADER_SIZE:
                raise ValueError(f"{path}: not a NIfTI-1 file")
            bo = ">"

        dim = struct.unpack(bo + "8h", hdr[40:56])
        datatype, _bitpix = struct.unpack(bo + "2h", hdr[70:74])
        pixdim = struct.unpack(bo + "8f", hdr[76:108])
        vox_offset = int(struct.unpack(bo + "f", hdr[108:112])[0])
        scl_slope, scl_inter = struct.unpack(bo + "2f", hdr[112:120])
        qform_code, sform_code = struct.unpack(bo + "2h", hdr[252:256])
        quatern = struct.unpack(bo + "3f", hdr[256:268])
        qoffset = struct.unpack(bo + "3f", hdr[268:280])
        srow = np.array(struct.unpack(bo + "12f", hdr[280:328])).reshape(3, 4)
        magic = hdr[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
        if datatype not in _DTYPES:
            raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")

        ndim = dim[0]
        if not 1 <= ndim <= 4:
            raise ValueError(f"{path}: unsupported dimensionality {ndim}")
        shape = tuple(max(1, d) for d in dim[1:1 + ndim])

        f.read(max(0, vox_offset - HEADER_SIZE))
        dt = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
        raw = f.read(int(np.prod(shape)) * dt.itemsize)

    data = np.frombuffer(raw, dtype=dt).reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    elif scl_inter != 0.0 and np.isfinite(scl_inter) and scl_slope == 1.0:
        data = data + scl_inter

    if sform_code > 0:
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    elif qform_code > 0:
        affine = _affine_from_quaternion(quatern, qoffset, pixdim)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])
    return data, affine.astype(np.float64)


def _affine_from_quaternion(quatern, qoffset, pixdim):
    b, c, d = quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = R * zooms
    affine[:3, 3] = qoffset
    return affine


def write_nifti(path, data, affine):
    """Write a 3D or 4D array as single-file NIfTI-1 with an sform affine.
    Float input is stored as float32, integer input as int16."""
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError(f"can only write 3D/4D volumes, got shape {data.shape}")
    if np.issubdtype(data.dtype, np.floating):
        out = data.astype(np.float32)
    else:
        out = data.astype(np.int16)
    code = _CODES[out.dtype]

    dim = [data.ndim, 1, 1, 1, 1, 1, 1, 1]
    for i, s in enumerate(data.shape):
        dim[i + 1] = s
    zooms = np.sqrt((np.asarray(affine, dtype=np.float64)[:3, :3] ** 2).sum(axis=0))
    pixdim = [1.0, float(zooms[0]), float(zooms[1]), float(zooms[2]), 1.0, 1.0, 1.0, 1.0]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, code, out.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)   # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)   # qform_code, sform_code
    aff = np.asarray(affine, dtype=np.float64)
    struct.pack_into("<12f", hdr, 280, *aff[:3, :4].ravel().tolist())
    hdr[344:348] = b"n+1\x00"

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(np.asfortranarray(out).tobytes(order="F"))


def is_nifti_path(path) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")
