"""Little-endian binary formats for flow (.flo), block motion vectors (.mvq) and raw tensors (.rten)."""

from __future__ import annotations

import os
import struct

import numpy as np

from .motion import BLOCK, DENSE, MotionMap

FLO_TAG = b"PIEH"
MVQ_TAG = b"MVQ1"
RTEN_TAG = b"RTEN"


class FormatError(ValueError):
    """A file does not match the expected layout."""


class BadTagError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(payload)


def _check_tag(buf: bytes, tag: bytes, path) -> None:
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: file too short for a header")
    if buf[:4] != tag:
        raise BadTagError(f"{path}: bad tag {buf[:4]!r}, expected {tag!r}")


# --------------------------------------------------------------------- .flo
def encode_flo(m: MotionMap) -> bytes:
    if m.kind != DENSE:
        raise ValueError("write_flo needs a dense motion map")
    return FLO_TAG + struct.pack("<ii", m.width, m.height) + m.values.astype("<f4").tobytes()


def decode_flo(buf: bytes, path="<bytes>") -> MotionMap:
    _check_tag(buf, FLO_TAG, path)
    if len(buf) < 12:
        raise TruncatedFileError(f"{path}: truncated .flo header")
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid size {w}x{h}")
    need = 12 + w * h * 8
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes")
    vals = np.frombuffer(buf, dtype="<f4", count=w * h * 2, offset=12).reshape(h, w, 2)
    if not np.all(np.isfinite(vals)):
        raise FormatError(f"{path}: non-finite flow values")
    return MotionMap(w, h, vals.astype(np.float32), DENSE)


def write_flo(path, m: MotionMap) -> None:
    _write(path, encode_flo(m))


def read_flo(path) -> MotionMap:
    return decode_flo(_read(path), path)


# --------------------------------------------------------------------- .mvq
def encode_mvq(m: MotionMap) -> bytes:
    if m.kind != BLOCK:
        raise ValueError("write_mvq needs a block motion map")
    vals = np.asarray(m.values)
    info = np.iinfo(np.int16)
    if vals.size and (vals.min() < info.min or vals.max() > info.max):
        raise OverflowError("block motion values overflow int16")
    header = MVQ_TAG + struct.pack("<iiif", m.width, m.height, m.block_size, m.quant_step)
    return header + vals.astype("<i2").tobytes()


def decode_mvq(buf: bytes, path="<bytes>") -> MotionMap:
    _check_tag(buf, MVQ_TAG, path)
    if len(buf) < 20:
        raise TruncatedFileError(f"{path}: truncated .mvq header")
    w, h, bs, q = struct.unpack_from("<iiif", buf, 4)
    if w <= 0 or h <= 0 or bs <= 0:
        raise FormatError(f"{path}: invalid header {w}x{h} block {bs}")
    hb, wb = -(-h // bs), -(-w // bs)
    need = 20 + hb * wb * 4
    if len(buf) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    vals = np.frombuffer(buf, dtype="<i2", count=hb * wb * 2, offset=20).reshape(hb, wb, 2)
    return MotionMap(w, h, vals.astype(np.int16), BLOCK, bs, q)


def write_mvq(path, m: MotionMap) -> None:
    _write(path, encode_mvq(m))


def read_mvq(path) -> MotionMap:
    return decode_mvq(_read(path), path)


# -------------------------------------------------------------------- .rten
def encode_rten(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    return (RTEN_TAG + struct.pack("<i", arr.ndim) + struct.pack(f"<{arr.ndim}i", *arr.shape)
            + arr.astype("<f4").tobytes())


def decode_rten(buf: bytes, path="<bytes>") -> np.ndarray:
    _check_tag(buf, RTEN_TAG, path)
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: truncated .rten header")
    (ndim,) = struct.unpack_from("<i", buf, 4)
    if ndim < 0 or len(buf) < 8 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated .rten dims")
    dims = struct.unpack_from(f"<{ndim}i", buf, 8)
    count = int(np.prod(dims)) if ndim else 1
    off = 8 + 4 * ndim
    if len(buf) != off + 4 * count:
        raise TruncatedFileError(f"{path}: expected {off + 4 * count} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_rten(path, arr: np.ndarray) -> None:
    _write(path, encode_rten(arr))


def read_rten(path) -> np.ndarray:
    return decode_rten(_read(path), path)


def file_size(path) -> int:
    return os.path.getsize(path)
