"""Minimal deterministic PNG codec for 8-bit RGB rasters.

Encoding always emits the same byte layout: non-interlaced, color type 2,
filter 0 on every scanline, a single IDAT chunk compressed at zlib level 6.
No ancillary chunks (no timestamps, no gamma), so identical pixels yield
identical files. The decoder handles any 8-bit RGB PNG with standard
filters, which is enough to read back our own output and most third-party
encoders' RGB files.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PngError(ValueError):
    """Raised for malformed or unsupported PNG data."""


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_rgb(pixels: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as PNG bytes."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise PngError(f"expected (H, W, 3) uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[0], pixels.shape[1]
    scanlines = np.zeros((h, 1 + w * 3), dtype=np.uint8)
    scanlines[:, 1:] = pixels.reshape(h, w * 3)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    idat = zlib.compress(scanlines.tobytes(), 6)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa = abs(p - a)
    pb = abs(p - b)
    pc = abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def decode_rgb(data: bytes) -> np.ndarray:
    """Decode PNG bytes into an (H, W, 3) uint8 array."""
    if data[:8] != PNG_SIGNATURE:
        raise PngError("not a PNG: bad signature")
    pos = 8
    width = height = None
    idat = bytearray()
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise PngError("truncated chunk")
        pos += 12 + length
        if tag == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or color != 2 or comp != 0 or filt != 0 or interlace != 0:
                raise PngError(f"unsupported PNG (depth={depth} color={color} interlace={interlace})")
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if width is None or not idat:
        raise PngError("missing IHDR or IDAT")
    raw = zlib.decompress(bytes(idat))
    stride = width * 3
    if len(raw) != height * (stride + 1):
        raise PngError("decompressed size mismatch")
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for row in range(height):
        offset = row * (stride + 1)
        ftype = raw[offset]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1).copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(3, stride):
                line[i] = (line[i] + line[i - 3]) & 0xFF
        elif ftype == 2:  # Up
            line = (line.astype(np.int16) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            for i in range(stride):
                left = int(line[i - 3]) if i >= 3 else 0
                line[i] = (line[i] + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = int(line[i - 3]) if i >= 3 else 0
                up_left = int(prev[i - 3]) if i >= 3 else 0
                line[i] = (line[i] + _paeth(left, int(prev[i]), up_left)) & 0xFF
        else:
            raise PngError(f"unknown filter type {ftype}")
        out[row] = line
        prev = out[row]
    return out.reshape(height, width, 3)
