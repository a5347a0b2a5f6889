"""Minimal PNG and binary PGM/PPM codecs (8- and 16-bit, no interlacing)."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageDecodeError(ValueError):
    pass


class UnsupportedFormatError(ImageDecodeError):
    pass


# ---------------------------------------------------------------------------
# PNG


def _chunks(buf: bytes):
    pos = len(PNG_SIGNATURE)
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise ImageDecodeError("truncated PNG chunk header")
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        end = pos + 12 + length
        if end > len(buf):
            raise ImageDecodeError(f"truncated PNG chunk {ctype!r}")
        data = buf[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", buf[pos + 8 + length:end])
        if zlib.crc32(ctype + data) & 0xFFFFFFFF != crc:
            raise ImageDecodeError(f"CRC mismatch in PNG chunk {ctype!r}")
        yield ctype, data
        pos = end


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, height: int, stride: int, bpp: int) -> np.ndarray:
    need = height * (stride + 1)
    if len(raw) < need:
        raise ImageDecodeError(f"PNG pixel data truncated ({len(raw)} < {need} bytes)")
    rows = np.frombuffer(raw[:need], dtype=np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            if stride % bpp == 0:
                cur = np.cumsum(cur.reshape(-1, bpp), axis=0).reshape(-1) & 0xFF
            else:
                for i in range(bpp, stride):
                    cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                upleft = prev[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + _paeth(int(left), int(prev[i]), int(upleft))) & 0xFF
        else:
            raise ImageDecodeError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur.astype(np.int32)
    return out


_PNG_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def decode_png(buf: bytes) -> tuple[np.ndarray, int]:
    """Return ``(pixels (h, w, c), maxval)``; palette images are expanded to RGB."""
    if not buf.startswith(PNG_SIGNATURE):
        raise UnsupportedFormatError("not a PNG file")
    header = None
    palette = None
    idat = []
    seen_end = False
    for ctype, data in _chunks(buf):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"PLTE":
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif ctype == b"IDAT":
            idat.append(data)
        elif ctype == b"IEND":
            seen_end = True
            break
    if header is None or not idat or not seen_end:
        raise ImageDecodeError("PNG is missing IHDR, IDAT or IEND")
    width, height, depth, ctype, _comp, _filt, interlace = header
    if width == 0 or height == 0:
        raise ImageDecodeError("PNG has a zero dimension")
    if interlace:
        raise UnsupportedFormatError("interlaced PNG is not supported")
    if ctype not in _PNG_CHANNELS:
        raise UnsupportedFormatError(f"PNG color type {ctype}")
    channels = _PNG_CHANNELS[ctype]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageDecodeError(f"corrupt PNG stream: {exc}") from None
    bits = depth * channels
    stride = (width * bits + 7) // 8
    bpp = max(1, bits // 8)
    rows = _unfilter(raw, height, stride, bpp)
    if depth == 16:
        px = rows.view(">u2").astype(np.uint16).reshape(height, width, channels)
        maxval = 65535
    elif depth == 8:
        px = rows.reshape(height, width, channels)
        maxval = 255
    elif depth in (1, 2, 4) and channels == 1:
        bitsarr = np.unpackbits(rows, axis=1).reshape(height, -1, depth)
        weights = 1 << np.arange(depth - 1, -1, -1)
        px = (bitsarr * weights).sum(axis=2)[:, :width, None].astype(np.uint8)
        maxval = (1 << depth) - 1
    else:
        raise UnsupportedFormatError(f"PNG bit depth {depth} with color type {ctype}")
    if ctype == 3:
        if palette is None:
            raise ImageDecodeError("palette PNG without PLTE chunk")
        px = palette[px[..., 0]]
        maxval = 255
    return px, maxval


def _png_chunk(ctype: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + ctype + data + struct.pack(">I", zlib.crc32(ctype + data) & 0xFFFFFFFF)


def encode_png(px: np.ndarray) -> bytes:
    """Encode ``(h, w)`` or ``(h, w, 3)`` uint8/uint16 pixels (filter 0 on every row)."""
    px = np.asarray(px)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    if c not in (1, 3):
        raise ValueError(f"encode_png supports 1 or 3 channels, got {c}")
    if px.dtype == np.uint16:
        depth, body = 16, px.astype(">u2").tobytes()
    elif px.dtype == np.uint8:
        depth, body = 8, px.tobytes()
    else:
        raise ValueError(f"encode_png needs uint8 or uint16 pixels, got {px.dtype}")
    stride = len(body) // h
    raw = b"".join(b"\x00" + body[y * stride:(y + 1) * stride] for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, depth, 0 if c == 1 else 2, 0, 0, 0)
    return (PNG_SIGNATURE + _png_chunk(b"IHDR", ihdr) + _png_chunk(b"IDAT", zlib.compress(raw, 6))
            + _png_chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# PGM / PPM (binary P5 / P6)


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported PNM magic {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated or malformed PNM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if width == 0 or height == 0:
        raise ImageDecodeError("PNM has a zero dimension")
    if not 0 < maxval < 65536:
        raise ImageDecodeError(f"PNM maxval {maxval} out of range")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * channels * dtype.itemsize
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageDecodeError(f"PNM raster truncated ({len(payload)} < {need} bytes)")
    px = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    return px.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_pnm(px: np.ndarray) -> bytes:
    px = np.asarray(px)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    magic = b"P5" if px.ndim == 2 else b"P6"
    h, w = px.shape[:2]
    maxval = 65535 if px.dtype == np.uint16 else 255
    body = px.astype(">u2").tobytes() if maxval > 255 else px.astype(np.uint8).tobytes()
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + body


# ---------------------------------------------------------------------------
# file-level helpers


def read_pixels(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    buf = path.read_bytes()
    if buf.startswith(PNG_SIGNATURE):
        return decode_png(buf)
    if buf[:2] in (b"P5", b"P6"):
        return decode_pnm(buf)
    raise UnsupportedFormatError(f"{path}: not a PNG or binary PGM/PPM file")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pixels(path: str | os.PathLike, px: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        data = encode_png(px)
    elif suffix in (".pgm", ".ppm", ".pnm"):
        data = encode_pnm(px)
    else:
        raise UnsupportedFormatError(f"cannot write {suffix!r}; use .png, .pgm or .ppm")
    atomic_write(path, data)
