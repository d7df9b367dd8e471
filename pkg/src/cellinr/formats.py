"""Volume file I/O: a NIfTI-1 subset and a raw-plus-sidecar format.

Both formats are little-endian and carry u8, u16 or f32 payloads.  On load
the payload is mapped linearly to [0, 1]; the mapping range is taken from
the file when it declares one (NIfTI ``cal_min``/``cal_max``, sidecar
``range`` key), otherwise from the payload's own min/max.  A constant
payload has zero dynamic range and loads as all zeros.

NIfTI support is deliberately narrow: single-file uncompressed ``.nii``,
3D dims, datatypes u8/u16/f32.  ``scl_slope``/``scl_inter`` rescaling is
not applied; a non-identity slope/intercept only produces a warning.

The sidecar is ``<payload path>.meta`` with ``key = value`` lines:

    dims = 64 64 64
    spacing = 1.0 1.0 1.0
    dtype = f32
    range = 0.0 1.0

``dims`` and ``dtype`` are required, ``spacing`` defaults to 1 and
``range`` is optional.  Payloads are x-fastest (Fortran order in the
(x, y, z) indexing used in memory), matching NIfTI's layout.
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from .volume import Volume3D

log = logging.getLogger(__name__)


class VolumeIOError(Exception):
    """Base class for volume file errors."""


class FormatError(VolumeIOError):
    """Header is malformed or not a supported flavor."""


class TruncationError(VolumeIOError):
    """Payload size disagrees with the declared dims."""


class UnsupportedDtypeError(VolumeIOError):
    """Datatype outside the u8/u16/f32 subset."""


_DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
}
_NIFTI_CODES = {2: "u8", 512: "u16", 16: "f32"}
_NIFTI_CODE_OF = {"u8": 2, "u16": 512, "f32": 16}
_BITPIX = {"u8": 8, "u16": 16, "f32": 32}
_FULL_SCALE = {"u8": 255.0, "u16": 65535.0, "f32": 1.0}

_HDR_SIZE = 348


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("nifti", "raw"):
            raise ValueError(f"unknown format {fmt!r}, expected 'nifti' or 'raw'")
        return fmt
    p = str(path)
    if p.endswith(".nii.gz"):
        raise FormatError("compressed NIfTI is not supported, decompress first")
    return "nifti" if p.endswith(".nii") else "raw"


def _normalize(payload, dims, rng):
    """Map payload to [0,1] by the (lo, hi) range; degenerate range -> zeros."""
    data = payload.reshape(dims, order="F")
    if rng is None:
        lo = float(data.min())
        hi = float(data.max())
    else:
        lo, hi = float(rng[0]), float(rng[1])
    if hi <= lo:
        return np.zeros(dims, dtype=np.float32), (lo, lo)
    out = (data.astype(np.float32) - np.float32(lo)) / np.float32(hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return out, (lo, hi)


def load_volume(path, format=None):
    """Read a volume file; returns a normalized ``Volume3D``.

    ``format`` is ``'nifti'``, ``'raw'`` or None to infer from the
    extension (``.nii`` means NIfTI, anything else raw+sidecar).
    """
    fmt = _infer_format(path, format)
    if fmt == "nifti":
        return _load_nifti(path)
    return _load_raw(path)


def save_volume(vol, path, format=None, dtype="f32"):
    """Write a volume; ``dtype`` picks the payload type (u8/u16/f32).

    Integer dtypes store ``rint(v * full_scale)`` and record the range so a
    reload lands within one quantization step.  f32 is bit-exact.
    """
    if dtype not in _DTYPES:
        raise UnsupportedDtypeError(f"dtype {dtype!r} not in {sorted(_DTYPES)}")
    fmt = _infer_format(path, format)
    scale = _FULL_SCALE[dtype]
    if dtype == "f32":
        payload = np.asfortranarray(vol.data).tobytes(order="F")
    else:
        q = np.rint(vol.data.astype(np.float64) * scale)
        payload = q.astype(_DTYPES[dtype]).tobytes(order="F")
    if fmt == "nifti":
        _save_nifti(vol, path, dtype, payload)
    else:
        _save_raw(vol, path, dtype, payload)


# ---------------------------------------------------------------- raw+sidecar


def _sidecar_path(path):
    return str(path) + ".meta"


def _load_raw(path):
    meta = {}
    try:
        with open(_sidecar_path(path), "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise FormatError(f"sidecar line without '=': {line!r}")
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    except OSError as e:
        raise FormatError(f"cannot read sidecar {_sidecar_path(path)}: {e}") from e

    for required in ("dims", "dtype"):
        if required not in meta:
            raise FormatError(f"sidecar missing required key {required!r}")
    try:
        dims = tuple(int(t) for t in meta["dims"].split())
    except ValueError as e:
        raise FormatError(f"bad dims {meta['dims']!r}") from e
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"dims must be three positive ints, got {dims}")
    if meta["dtype"] not in _DTYPES:
        raise UnsupportedDtypeError(f"dtype {meta['dtype']!r} not in {sorted(_DTYPES)}")
    dt = _DTYPES[meta["dtype"]]

    spacing = (1.0, 1.0, 1.0)
    if "spacing" in meta:
        try:
            spacing = tuple(float(t) for t in meta["spacing"].split())
        except ValueError as e:
            raise FormatError(f"bad spacing {meta['spacing']!r}") from e
        if len(spacing) != 3:
            raise FormatError(f"spacing must have three components, got {spacing}")
    rng = None
    if "range" in meta:
        try:
            parts = [float(t) for t in meta["range"].split()]
        except ValueError as e:
            raise FormatError(f"bad range {meta['range']!r}") from e
        if len(parts) != 2:
            raise FormatError(f"range must have two components, got {parts}")
        rng = (parts[0], parts[1])

    with open(path, "rb") as f:
        blob = f.read()
    expected = int(np.prod(dims)) * dt.itemsize
    if len(blob) != expected:
        raise TruncationError(
            f"payload is {len(blob)} bytes but dims {dims} x {meta['dtype']} need {expected}"
        )
    payload = np.frombuffer(blob, dtype=dt)
    data, used = _normalize(payload, dims, rng)
    return Volume3D(data, spacing, used)


def _save_raw(vol, path, dtype, payload):
    with open(path, "wb") as f:
        f.write(payload)
    scale = _FULL_SCALE[dtype]
    lines = [
        "dims = {} {} {}".format(*vol.dims),
        "spacing = {!r} {!r} {!r}".format(*vol.spacing),
        f"dtype = {dtype}",
        f"range = 0.0 {scale!r}",
    ]
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# -------------------------------------------------------------------- NIfTI-1


def _load_nifti(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HDR_SIZE:
        raise FormatError(f"file too short for a NIfTI header ({len(blob)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != _HDR_SIZE:
        if sizeof_hdr == 1543569408:  # 348 byte-swapped
            raise FormatError("big-endian NIfTI is not supported")
        raise FormatError(f"sizeof_hdr = {sizeof_hdr}, not a NIfTI-1 file")
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise FormatError("two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\x00":
        raise FormatError(f"bad magic {magic!r}")

    dim = struct.unpack_from("<8h", blob, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"dim[0] = {ndim} out of range")
    if ndim < 3 or any(d < 1 for d in dim[1 : ndim + 1]):
        raise FormatError(f"need a 3D volume, header dims {dim[: ndim + 1]}")
    if any(d != 1 for d in dim[4 : ndim + 1]):
        raise FormatError(f"4D+ volumes not supported, header dims {dim[: ndim + 1]}")
    dims = (dim[1], dim[2], dim[3])

    (datatype, bitpix) = struct.unpack_from("<2h", blob, 70)
    if datatype not in _NIFTI_CODES:
        raise UnsupportedDtypeError(f"NIfTI datatype code {datatype} not supported")
    token = _NIFTI_CODES[datatype]
    if bitpix != _BITPIX[token]:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {token}")

    pixdim = struct.unpack_from("<8f", blob, 76)
    spacing = []
    for axis, p in enumerate(pixdim[1:4]):
        if p > 0 and np.isfinite(p):
            spacing.append(float(p))
        else:
            log.warning("nonpositive pixdim[%d]=%r, using 1.0", axis + 1, p)
            spacing.append(1.0)

    (vox_offset, scl_slope, scl_inter) = struct.unpack_from("<3f", blob, 108)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        log.warning(
            "ignoring scl_slope=%r scl_inter=%r (rescaling not applied)", scl_slope, scl_inter
        )
    offset = int(vox_offset)
    if offset < _HDR_SIZE:
        raise FormatError(f"vox_offset {vox_offset} overlaps the header")
    (cal_max, cal_min) = struct.unpack_from("<2f", blob, 124)
    rng = (float(cal_min), float(cal_max)) if cal_max > cal_min else None

    dt = _DTYPES[token]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(blob) - offset < expected:
        raise TruncationError(
            f"payload holds {len(blob) - offset} bytes but dims {dims} x {token} need {expected}"
        )
    payload = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=offset)
    data, used = _normalize(payload, dims, rng)
    return Volume3D(data, tuple(spacing), used)


def _save_nifti(vol, path, dtype, payload):
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODE_OF[dtype], _BITPIX[dtype])
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, 352.0, 1.0, 0.0)  # vox_offset, slope, inter
    hdr[123] = 3  # spatial units: micron
    struct.pack_into("<2f", hdr, 124, _FULL_SCALE[dtype], 0.0)  # cal_max, cal_min
    descrip = b"cellinr volume"
    hdr[148 : 148 + len(descrip)] = descrip
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no extensions, pad to vox_offset 352
        f.write(payload)
