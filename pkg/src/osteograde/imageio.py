"""Portable image I/O and small raster helpers.

Grayscale inputs and synthetic phantoms travel as binary PGM (8- or
16-bit); rendered outputs (overlays, confusion grids) are written as PNG
through a minimal encoder so identical inputs produce identical bytes.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataError


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file into a uint8 or uint16 array."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":  # comment to end of line
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        return blob[start:pos]

    magic = token()
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (expected P5, got {magic!r})")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise DataError(f"{path}: malformed PGM header") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid PGM dimensions {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return arr.astype(np.uint16) if maxval > 255 else arr.copy()


def write_pgm(path, arr: np.ndarray) -> None:
    """Write a uint8 or uint16 array as binary PGM (16-bit is big-endian)."""
    if arr.ndim != 2:
        raise DataError(f"PGM output must be 2-d, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise DataError(f"PGM output must be uint8 or uint16, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode())
        f.write(payload)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png(path, arr: np.ndarray) -> None:
    """Write uint8 grayscale (H, W) or RGB (H, W, 3) as PNG, byte-stable."""
    if arr.dtype != np.uint8:
        raise DataError(f"PNG output must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        color_type = 0
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
    else:
        raise DataError(f"PNG output must be (H, W) or (H, W, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError("PNG output must be non-empty")
    h, w = arr.shape[:2]
    raw = b"".join(b"\x00" + arr[i].tobytes() for i in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(_png_chunk(b"IHDR", header))
        f.write(_png_chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(_png_chunk(b"IEND", b""))


def _resize_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
    return i0, i1, frac


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-d array to out_h x out_w, edge-clamped bilinear."""
    if arr.ndim != 2:
        raise DataError(f"bilinear_resize expects 2-d input, got shape {arr.shape}")
    if out_h < 1 or out_w < 1:
        raise DataError("bilinear_resize: target size must be positive")
    a = arr.astype(np.float64)
    y0, y1, fy = _resize_axis(arr.shape[0], out_h)
    x0, x1, fx = _resize_axis(arr.shape[1], out_w)
    wy = fy[:, None]
    wx = fx[None, :]
    return (
        (1 - wy) * (1 - wx) * a[y0[:, None], x0[None, :]]
        + (1 - wy) * wx * a[y0[:, None], x1[None, :]]
        + wy * (1 - wx) * a[y1[:, None], x0[None, :]]
        + wy * wx * a[y1[:, None], x1[None, :]]
    )


def _build_heat_lut() -> np.ndarray:
    anchors = [
        (0.00, (0, 0, 255)),
        (0.25, (0, 255, 255)),
        (0.50, (0, 255, 0)),
        (0.75, (255, 255, 0)),
        (1.00, (255, 0, 0)),
    ]
    pos = np.array([a[0] for a in anchors])
    cols = np.array([a[1] for a in anchors], dtype=np.float64)
    xs = np.linspace(0.0, 1.0, 256)
    lut = np.stack([np.interp(xs, pos, cols[:, c]) for c in range(3)], axis=1)
    return np.round(lut).astype(np.uint8)


HEAT_LUT = _build_heat_lut()
HEAT_COLORMAP_ID = "bluered"


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities through the fixed blue-to-red table."""
    idx = np.clip(np.round(np.clip(values, 0.0, 1.0) * 255), 0, 255).astype(np.intp)
    return HEAT_LUT[idx]


# 5x7 bitmaps for the ten digits, one string row per scanline.
_DIGIT_ROWS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

DIGIT_H, DIGIT_W = 7, 5

_DIGIT_MASKS = {
    ch: np.array([[c == "1" for c in row] for row in rows], dtype=bool)
    for ch, rows in _DIGIT_ROWS.items()
}


def draw_digits(canvas: np.ndarray, text: str, top: int, left: int, color, scale: int = 1) -> None:
    """Stamp a digit string onto an RGB canvas; glyphs outside are clipped."""
    x = left
    col = np.asarray(color, dtype=np.uint8)
    for ch in text:
        if ch not in _DIGIT_MASKS:
            raise DataError(f"draw_digits supports digits only, got {ch!r}")
        mask = np.kron(_DIGIT_MASKS[ch], np.ones((scale, scale), dtype=bool))
        h, w = mask.shape
        y1 = min(top + h, canvas.shape[0])
        x1 = min(x + w, canvas.shape[1])
        if top < y1 and x < x1:
            region = canvas[top:y1, x:x1]
            region[mask[: y1 - top, : x1 - x]] = col
        x += w + scale  # one glyph-space gap
