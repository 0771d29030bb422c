"""Float32 tensors: the binary RDMT/RDMA file formats and image preprocessing.

A tensor is a C-contiguous ``numpy.float32`` array. On disk a single tensor is
stored as an RDMT record::

    b"RDMT" | u32 version (=1) | u32 name_len | name (utf-8) | u32 ndim
    | u32 dim * ndim | f32 data (row-major)

all little endian. An RDMA archive is ``b"RDMA" | u32 version | u32 count``
followed by ``count`` RDMT records.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"RDMT"
ARCHIVE_MAGIC = b"RDMA"
FORMAT_VERSION = 1
MAX_NAME_BYTES = 255

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class TensorFormatError(ValueError):
    """Raised when bytes do not form a valid RDMT record or RDMA archive."""


def as_tensor(values) -> np.ndarray:
    """Return ``values`` as a contiguous float32 array with at least one dimension."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _encode_record(t: np.ndarray, name: str) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0 or 0 in t.shape:
        raise ValueError(f"tensor {name!r} needs a non-empty shape, got {t.shape}")
    raw_name = name.encode("utf-8")
    if len(raw_name) > MAX_NAME_BYTES:
        raise ValueError(f"tensor name is {len(raw_name)} bytes, limit is {MAX_NAME_BYTES}")
    data = np.ascontiguousarray(t, dtype=_F32)
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise ValueError(f"tensor {name!r} has a non-finite value at flat index {bad}")
    header = [TENSOR_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(raw_name)), raw_name,
              _U32.pack(data.ndim)]
    header.extend(_U32.pack(d) for d in data.shape)
    return b"".join(header) + data.tobytes()


def _take(buf: memoryview, offset: int, size: int, what: str) -> tuple[bytes, int]:
    end = offset + size
    if end > len(buf):
        raise TensorFormatError(
            f"truncated {what}: expected {size} bytes at offset {offset}, "
            f"only {max(len(buf) - offset, 0)} available"
        )
    return bytes(buf[offset:end]), end


def _decode_record(buf: memoryview, offset: int = 0) -> tuple[str, np.ndarray, int]:
    magic, offset = _take(buf, offset, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    raw, offset = _take(buf, offset, 4, "version")
    version = _U32.unpack(raw)[0]
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    raw, offset = _take(buf, offset, 4, "name length")
    name_len = _U32.unpack(raw)[0]
    raw_name, offset = _take(buf, offset, name_len, "name")
    try:
        name = raw_name.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TensorFormatError(f"tensor name is not valid utf-8: {exc}") from None
    raw, offset = _take(buf, offset, 4, "ndim")
    ndim = _U32.unpack(raw)[0]
    if ndim == 0:
        raise TensorFormatError(f"tensor {name!r} has an empty shape")
    raw, offset = _take(buf, offset, 4 * ndim, "shape")
    shape = struct.unpack(f"<{ndim}I", raw)
    if 0 in shape:
        raise TensorFormatError(f"tensor {name!r} has a zero-sized dimension: {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = 4 * count
    available = len(buf) - offset
    if available < expected:
        raise TensorFormatError(
            f"truncated payload for tensor {name!r}: expected {expected} bytes, got {available}"
        )
    data = np.frombuffer(buf, dtype=_F32, count=count, offset=offset)
    finite = np.isfinite(data)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise TensorFormatError(f"tensor {name!r} has a non-finite value at flat index {bad}")
    t = data.astype(np.float32).reshape(shape)
    return name, t, offset + expected


def write_tensor(t: np.ndarray, name: str = "") -> bytes:
    """Encode ``t`` as a single RDMT record."""
    return _encode_record(t, name)


def read_tensor(data: bytes) -> tuple[str, np.ndarray]:
    """Decode a single RDMT record, returning ``(name, tensor)``.

    Trailing bytes after the record are rejected.
    """
    buf = memoryview(data)
    name, t, end = _decode_record(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor {name!r}")
    return name, t


def write_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Encode an ordered name -> tensor mapping as an RDMA archive."""
    parts = [ARCHIVE_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(tensors))]
    parts.extend(_encode_record(t, name) for name, t in tensors.items())
    return b"".join(parts)


def read_archive(data: bytes) -> dict[str, np.ndarray]:
    """Decode an RDMA archive into an insertion-ordered dict."""
    buf = memoryview(data)
    magic, offset = _take(buf, 0, 4, "magic")
    if magic != ARCHIVE_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {ARCHIVE_MAGIC!r}")
    raw, offset = _take(buf, offset, 4, "version")
    version = _U32.unpack(raw)[0]
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported archive format version {version}")
    raw, offset = _take(buf, offset, 4, "record count")
    count = _U32.unpack(raw)[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, t, offset = _decode_record(buf, offset)
        if name in out:
            raise TensorFormatError(f"duplicate tensor name {name!r} in archive")
        out[name] = t
    if offset != len(buf):
        raise TensorFormatError(f"{len(buf) - offset} trailing bytes after archive")
    return out


def save_tensor(path: str | Path, t: np.ndarray, name: str = "") -> None:
    Path(path).write_bytes(write_tensor(t, name))


def load_tensor(path: str | Path) -> tuple[str, np.ndarray]:
    return read_tensor(Path(path).read_bytes())


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(write_archive(tensors))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    return read_archive(Path(path).read_bytes())


def _resize_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped to the valid sample range
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``[C, H, W]`` image with half-pixel-centre bilinear interpolation."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected a [C, H, W] image, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return as_tensor(img).copy()
    x = img.astype(np.float64)
    lo, hi, frac = _resize_axis(h, out_h)
    x = x[:, lo, :] * (1.0 - frac)[None, :, None] + x[:, hi, :] * frac[None, :, None]
    lo, hi, frac = _resize_axis(w, out_w)
    x = x[:, :, lo] * (1.0 - frac) + x[:, :, hi] * frac
    return x.astype(np.float32)


def normalize_image(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Per-channel ``(x - mean_c) / std_c`` on a ``[3, H, W]`` (or ``[N, 3, H, W]``) image."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise ValueError("mean and std must each have three components")
    if not (std > 0).all():
        raise ValueError(f"std components must be positive, got {std.tolist()}")
    img = np.asarray(img)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise ValueError(f"expected a [3, H, W] or [N, 3, H, W] image, got shape {img.shape}")
    shape = (3, 1, 1)
    return ((img.astype(np.float64) - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
