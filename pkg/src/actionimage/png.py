"""Minimal lossless PNG codec for 8-bit RGB images (no alpha, no interlace)."""
import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PNGError(ValueError):
    pass


def _chunk(kind: bytes, data: bytes) -> bytes:
    return (
        struct.pack(">I", len(data))
        + kind
        + data
        + struct.pack(">I", zlib.crc32(data, zlib.crc32(kind)) & 0xFFFFFFFF)
    )


def encode(pixels: np.ndarray) -> bytes:
    """Encode an ``(H, W, 3)`` uint8 array. Output is deterministic."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise PNGError(f"expected (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    if h == 0 or w == 0:
        raise PNGError("empty image")
    # filter type 0 on every scanline
    raw = np.zeros((h, 1 + 3 * w), dtype=np.uint8)
    raw[:, 1:] = pixels.reshape(h, 3 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9))
        + _chunk(b"IEND", b"")
    )


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    if len(data) != h * (stride + 1):
        raise PNGError(f"image data has {len(data)} bytes, expected {h * (stride + 1)}")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(h):
        ftype = data[y * (stride + 1)]
        line = np.frombuffer(data, np.uint8, stride, y * (stride + 1) + 1).astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + prev[i]) >> 1
                else:
                    pred = _paeth(left, prev[i], prev[i - bpp] if i >= bpp else 0)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise PNGError(f"unknown filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


def decode(blob: bytes) -> np.ndarray:
    """Decode 8-bit truecolor PNG data into an ``(H, W, 3)`` uint8 array."""
    if not blob.startswith(SIGNATURE):
        raise PNGError("not a PNG file")
    pos = len(SIGNATURE)
    header = None
    idat = []
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise PNGError("truncated chunk header")
        length, kind = struct.unpack(">I4s", blob[pos:pos + 8])
        data = blob[pos + 8:pos + 8 + length]
        crc_bytes = blob[pos + 8 + length:pos + 12 + length]
        if len(data) != length or len(crc_bytes) != 4:
            raise PNGError(f"truncated {kind!r} chunk")
        if struct.unpack(">I", crc_bytes)[0] != zlib.crc32(data, zlib.crc32(kind)) & 0xFFFFFFFF:
            raise PNGError(f"CRC mismatch in {kind!r} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"IEND":
            break
    if header is None:
        raise PNGError("missing IHDR")
    w, h, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype != 2 or interlace != 0:
        raise PNGError(
            f"only 8-bit non-interlaced RGB is supported (depth={depth}, color type={ctype})"
        )
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise PNGError(f"corrupt image data: {e}") from e
    return _unfilter(raw, h, 3 * w, 3).reshape(h, w, 3)
