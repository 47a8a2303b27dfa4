"""Grayscale PNG reading and writing.

Images are written as 16-bit grayscale with intensities mapped linearly
from [0, 1] to [0, 65535]. The reader handles 8- and 16-bit grayscale,
non-interlaced files and reports the byte offset of any defect.
"""
from __future__ import annotations

import struct
import warnings
import zlib
from pathlib import Path

import numpy as np

from .errors import NumericError, ParseError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_VALUE = 65535


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def encode_png16(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {values.shape}")
    h, w = values.shape
    rows = np.ascontiguousarray(values.astype(">u2")).view(np.uint8).reshape(h, w * 2)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    header = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def _write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_image(image, path) -> None:
    """Write intensities in [0, 1]; out-of-range values are clamped with a warning."""
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise NumericError("image contains non-finite values")
    if image.min(initial=0.0) < 0.0 or image.max(initial=0.0) > 1.0:
        warnings.warn(f"intensities outside [0, 1] clamped when writing {path}", stacklevel=2)
        image = np.clip(image, 0.0, 1.0)
    _write_bytes(path, encode_png16(np.rint(image * MAX_VALUE).astype(np.uint16)))


def write_label_image(labels, path) -> None:
    """Write integer labels (0..65535) verbatim as 16-bit samples."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > MAX_VALUE:
        raise ValueError("labels must lie in [0, 65535]")
    _write_bytes(path, encode_png16(labels.astype(np.uint16)))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, row_bytes: int, bpp: int, offset: int) -> np.ndarray:
    expected = h * (row_bytes + 1)
    if len(raw) != expected:
        raise ParseError(f"decompressed image data has {len(raw)} bytes, expected {expected}", offset)
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, row_bytes + 1)
    out = np.zeros((h, row_bytes), dtype=np.uint8)
    prev = np.zeros(row_bytes, dtype=np.uint8)
    for y in range(h):
        ftype, line = int(data[y, 0]), data[y, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            lanes = line.reshape(-1, bpp).astype(np.int64)
            cur = (np.cumsum(lanes, axis=0) % 256).astype(np.uint8).reshape(-1)
        elif ftype == 2:
            cur = line + prev  # uint8 wraps modulo 256
        elif ftype in (3, 4):
            cur = np.zeros(row_bytes, dtype=np.int64)
            up = prev.astype(np.int64)
            for i in range(row_bytes):
                left = cur[i - bpp] if i >= bpp else 0
                ul = up[i - bpp] if i >= bpp else 0
                pred = (left + up[i]) // 2 if ftype == 3 else _paeth(left, up[i], ul)
                cur[i] = (int(line[i]) + pred) % 256
            cur = cur.astype(np.uint8)
        else:
            raise ParseError(f"unknown filter type {ftype} in row {y}", offset)
        out[y] = cur
        prev = cur
    return out


def read_png_samples(path) -> np.ndarray:
    """Raw samples of a grayscale PNG as uint16 (16-bit) or uint8 (8-bit) array."""
    buf = Path(path).read_bytes()
    if buf[:8] != PNG_SIGNATURE:
        raise ParseError("not a PNG file (bad signature)", 0)
    pos, header, idat, idat_offset = 8, None, [], None
    while True:
        if pos + 8 > len(buf):
            raise ParseError("truncated chunk header", pos)
        length, kind = struct.unpack(">I4s", buf[pos:pos + 8])
        end = pos + 8 + length
        if end + 4 > len(buf):
            raise ParseError(f"truncated {kind!r} chunk", pos)
        data = buf[pos + 8:end]
        (crc,) = struct.unpack(">I", buf[end:end + 4])
        if crc != zlib.crc32(kind + data) & 0xFFFFFFFF:
            raise ParseError(f"CRC mismatch in {kind!r} chunk", pos)
        if header is None and kind != b"IHDR":
            raise ParseError("first chunk is not IHDR", pos)
        if kind == b"IHDR":
            if length != 13:
                raise ParseError("IHDR has wrong length", pos)
            header = struct.unpack(">IIBBBBB", data)
            w, h, depth, color, comp, filt, interlace = header
            if color != 0 or depth not in (8, 16):
                raise ParseError(f"unsupported color type {color} / bit depth {depth}", pos + 16)
            if comp != 0 or filt != 0 or interlace != 0:
                raise ParseError("unsupported compression, filter or interlace method", pos + 18)
        elif kind == b"IDAT":
            idat_offset = pos if idat_offset is None else idat_offset
            idat.append(data)
        elif kind == b"IEND":
            break
        pos = end + 4
    if not idat:
        raise ParseError("no IDAT chunk", pos)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ParseError(f"corrupt compressed data: {exc}", idat_offset) from None
    w, h, depth = header[0], header[1], header[2]
    bpp = depth // 8
    rows = _unfilter(raw, h, w * bpp, bpp, idat_offset)
    if depth == 16:
        return rows.reshape(h, w, 2).view(">u2").reshape(h, w).astype(np.uint16)
    return rows


def read_image(path) -> np.ndarray:
    """Intensities in [0, 1] as float64."""
    samples = read_png_samples(path)
    scale = MAX_VALUE if samples.dtype == np.uint16 else 255
    return samples.astype(np.float64) / scale


def read_label_image(path) -> np.ndarray:
    return read_png_samples(path).astype(np.int64)
