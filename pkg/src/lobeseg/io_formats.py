"""Volume, NIfTI-1 and checkpoint file formats.

Native volume layout (all little-endian)::

    offset  size  field
    0       4     magic b"VLBV"
    4       4     version (u32, currently 1)
    8       1     kind (0 = HU volume, 1 = label map)
    9       1     dtype (0 = f32, 1 = u8)
    10      12    dims D, H, W (3 x u32)
    22      12    spacing in mm (3 x f32)
    34      ...   row-major voxel payload

Checkpoint layout::

    b"VLCK" | version u32 | header length u32 | JSON header | raw blobs

The JSON header (sorted keys) lists every blob with name, dtype, shape,
offset and byte length relative to the start of the blob section.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocess import VOCABULARY, LabelMap, Volume

NATIVE_MAGIC = b"VLBV"
NATIVE_VERSION = 1
_NATIVE_HEADER = struct.Struct("<4sIBB3I3f")
KIND_VOLUME, KIND_LABELS = 0, 1
DTYPE_F32, DTYPE_U8 = 0, 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

CHECKPOINT_MAGIC = b"VLCK"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """File content does not match the expected layout."""


class LengthError(FormatError):
    """Payload shorter or longer than the header declares."""


class UnsupportedFeatureError(FormatError):
    """Valid file using a feature this reader does not handle."""


class IncompatibleVersionError(FormatError):
    """File written by an incompatible format version."""


# -- native volumes -------------------------------------------------------------


def encode_volume(obj: Volume | LabelMap) -> bytes:
    if isinstance(obj, LabelMap):
        kind, dtype = KIND_LABELS, DTYPE_U8
    elif isinstance(obj, Volume):
        kind, dtype = KIND_VOLUME, DTYPE_F32
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(obj).__name__}")
    payload = np.ascontiguousarray(obj.voxels, dtype=_DTYPES[dtype]).tobytes()
    header = _NATIVE_HEADER.pack(NATIVE_MAGIC, NATIVE_VERSION, kind, dtype, *obj.dims, *obj.spacing)
    return header + payload


def write_volume(path, obj: Volume | LabelMap) -> None:
    data = encode_volume(obj)
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


def decode_volume(buf: bytes, source: str = "<bytes>") -> Volume | LabelMap:
    if len(buf) < _NATIVE_HEADER.size:
        raise LengthError(f"{source}: header needs {_NATIVE_HEADER.size} bytes, file has {len(buf)}")
    return _decode_native(_NATIVE_HEADER.unpack_from(buf), buf[_NATIVE_HEADER.size:], source)


def _check_native_header(fields, source: str) -> tuple[int, int, tuple[int, int, int], tuple, int]:
    magic, version, kind, dtype, d, h, w, sx, sy, sz = fields
    if magic != NATIVE_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {NATIVE_MAGIC!r}")
    if version != NATIVE_VERSION:
        raise IncompatibleVersionError(f"{source}: unsupported version {version}")
    if kind not in (KIND_VOLUME, KIND_LABELS):
        raise FormatError(f"{source}: unknown kind {kind}")
    if dtype not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {dtype}")
    if (kind, dtype) not in ((KIND_VOLUME, DTYPE_F32), (KIND_LABELS, DTYPE_U8)):
        raise FormatError(f"{source}: kind {kind} cannot use dtype code {dtype}")
    if min(d, h, w) < 1:
        raise FormatError(f"{source}: dims must be positive, got {(d, h, w)}")
    expected = d * h * w * _DTYPES[dtype].itemsize
    return kind, dtype, (d, h, w), (sx, sy, sz), expected


def _decode_native(fields, payload: bytes, source: str):
    kind, dtype, dims, spacing, expected = _check_native_header(fields, source)
    if len(payload) != expected:
        raise LengthError(f"{source}: payload is {len(payload)} bytes, header declares {expected}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
    if kind == KIND_LABELS:
        return LabelMap(arr.copy(), VOCABULARY, spacing)
    return Volume(arr.astype(np.float32), spacing)


def read_volume(path) -> Volume | LabelMap:
    source = str(path)
    with open(path, "rb") as f:
        head = f.read(_NATIVE_HEADER.size)
        if len(head) < _NATIVE_HEADER.size:
            if head[:4] != NATIVE_MAGIC[: len(head)]:
                raise FormatError(f"{source}: bad magic {head[:4]!r}, expected {NATIVE_MAGIC!r}")
            raise LengthError(f"{source}: header needs {_NATIVE_HEADER.size} bytes, file has {len(head)}")
        fields = _NATIVE_HEADER.unpack(head)
        _, _, _, _, expected = _check_native_header(fields, source)
        actual = os.fstat(f.fileno()).st_size - _NATIVE_HEADER.size
        if actual != expected:
            # checked against the file size before any payload allocation
            raise LengthError(f"{source}: payload is {actual} bytes, header declares {expected}")
        payload = f.read(expected)
    return _decode_native(fields, payload, source)


# -- NIfTI-1 ----------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {4: np.dtype("i2"), 16: np.dtype("f4")}


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as f:
        start = f.read(2)
    if start == b"\x1f\x8b":
        with gzip.open(path, "rb") as g:
            return g.read()
    with open(path, "rb") as f:
        return f.read()


def parse_nifti1(buf: bytes, source: str = "<bytes>") -> Volume:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise LengthError(f"{source}: NIfTI-1 header needs 348 bytes, got {len(buf)}")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", buf, 0)[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise FormatError(f"{source}: sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = buf[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{source}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError(f"{source}: two-file (.hdr/.img) NIfTI is not supported")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", buf, 70)
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", buf, 108)
    if dim[0] != 3:
        raise UnsupportedFeatureError(f"{source}: only 3-d images are supported, dim[0] = {dim[0]}")
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedFeatureError(f"{source}: unsupported datatype code {datatype}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise FormatError(f"{source}: non-positive dims {dims}")
    dt = NIFTI_DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else 352
    nbytes = dims[0] * dims[1] * dims[2] * dt.itemsize
    if len(buf) - offset < nbytes:
        raise LengthError(f"{source}: image data is {len(buf) - offset} bytes, header declares {nbytes}")
    raw = np.frombuffer(buf, dtype=dt, count=dims[0] * dims[1] * dims[2], offset=offset)
    # x varies fastest on disk
    data = raw.reshape(dims, order="F").astype(np.float64)
    if scl_slope != 0 and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume(np.ascontiguousarray(data, dtype=np.float32), spacing)


def read_nifti1(path) -> Volume:
    """Read a single-file NIfTI-1 image (``.nii`` or whole-file gzip ``.nii.gz``)."""
    return parse_nifti1(_read_maybe_gzip(path), str(path))


def read_any_volume(path) -> Volume | LabelMap:
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti1(path)
    return read_volume(path)


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Serialized training state.

    ``arrays`` holds model parameters and running statistics by name;
    ``optimizer_arrays`` the optimizer moment buffers. ``meta`` carries the
    JSON-serializable remainder (model config, schedule state, history...).
    """

    model_config: dict
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    lr_state: dict = field(default_factory=dict)
    optimizer_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blobs = []
    index = []
    offset = 0
    for group, arrays in (("param", ckpt.arrays), ("optim", ckpt.optimizer_arrays)):
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f4")
            b = a.tobytes()
            index.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
            blobs.append(b)
            offset += len(b)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config,
        "epoch": ckpt.epoch,
        "lr_state": ckpt.lr_state,
        "meta": ckpt.meta,
        "blobs": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint file (bad magic {buf[:4]!r})")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleVersionError(
            f"{source}: checkpoint format version {version} is incompatible with reader version {CHECKPOINT_VERSION}"
        )
    if 12 + hlen > len(buf):
        raise LengthError(f"{source}: header declares {hlen} bytes, file has {len(buf) - 12}")
    header = json.loads(buf[12:12 + hlen].decode())
    base = 12 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "optim": {}}
    for e in header["blobs"]:
        start, n = base + e["offset"], e["nbytes"]
        expected = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if n != expected or start + n > len(buf):
            raise LengthError(f"{source}: blob {e['name']} truncated or inconsistent")
        if e["name"] in groups[e["group"]]:
            raise FormatError(f"{source}: duplicate blob {e['name']}")
        groups[e["group"]][e["name"]] = np.frombuffer(buf, "<f4", expected // 4, start).reshape(e["shape"]).copy()
    return Checkpoint(
        model_config=header["model_config"],
        arrays=groups["param"],
        epoch=header["epoch"],
        lr_state=header["lr_state"],
        optimizer_arrays=groups["optim"],
        meta=header["meta"],
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
