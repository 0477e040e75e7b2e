"""PPM/PNG image I/O and the CBF1 raw field dump."""

from __future__ import annotations

import logging
import re
import struct
from pathlib import Path

import numpy as np
import png

from .errors import DimensionError, ImageFormatError
from .fields import ColorImage

log = logging.getLogger(__name__)

CBF_MAGIC = b"CBF1"
_PNM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def _read_ppm(raw: bytes):
    if len(raw) < 2 or raw[:2] not in (b"P3", b"P6"):
        raise ImageFormatError("not a P3/P6 PPM file")
    pos = 2
    header = []
    for _ in range(3):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError("truncated PPM header")
        try:
            header.append(int(m.group(1)))
        except ValueError:
            raise ImageFormatError(f"malformed PPM header token {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = header
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"PPM maxval {maxval} out of range")
    count = width * height * 3
    if raw[:2] == b"P6":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = raw[pos:pos + count * dtype.itemsize]
        if len(body) != count * dtype.itemsize:
            raise ImageFormatError("truncated PPM raster")
        arr = np.frombuffer(body, dtype=dtype).astype(float)
    else:
        tokens = raw[pos:].split()
        if len(tokens) < count:
            raise ImageFormatError("truncated PPM raster")
        try:
            arr = np.array([int(t) for t in tokens[:count]], dtype=float)
        except ValueError:
            raise ImageFormatError("non-integer sample in P3 raster") from None
    if arr.max(initial=0) > maxval:
        raise ImageFormatError("PPM sample exceeds maxval")
    return arr.reshape(height, width, 3) / maxval


def _read_png(path: Path):
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        arr = np.vstack([np.asarray(r, dtype=float) for r in rows])
    except png.Error as exc:
        raise ImageFormatError(f"bad PNG: {exc}") from None
    planes = info["planes"]
    arr = arr.reshape(height, width, planes)
    if info.get("greyscale"):
        arr = np.repeat(arr[..., :1], 3, axis=2)
    else:
        arr = arr[..., :3]
    return arr / float(2 ** info["bitdepth"] - 1)


def load_image(path) -> ColorImage:
    """Read a P3/P6 PPM or PNG (8 or 16 bit) with channels scaled to [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        data = _read_png(path)
    elif raw[:1] == b"P":
        data = _read_ppm(raw)
    else:
        raise ImageFormatError(f"{path}: unsupported image format")
    if data.shape[0] < 2 or data.shape[1] < 2:
        raise DimensionError(f"{path}: degenerate image {data.shape[:2]}")
    return ColorImage(data)


def _quantize(img: ColorImage, bits):
    data = img.data
    if data.max(initial=0.0) > 1.0:
        n = int((data > 1.0).sum())
        log.warning("save_image: %d channel values above 1 clamped", n)
    top = 2 ** bits - 1
    return np.rint(np.clip(data, 0.0, 1.0) * top).astype(np.uint16 if bits == 16 else np.uint8)


def save_image(img: ColorImage, path, bits=8):
    """Write PPM (binary P6) or PNG depending on the suffix; values above 1 are clamped."""
    path = Path(path)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    q = _quantize(img, bits)
    H, W = img.shape
    suffix = path.suffix.lower()
    if suffix == ".png":
        with open(path, "wb") as fh:
            png.Writer(W, H, greyscale=False, bitdepth=bits).write(fh, q.reshape(H, W * 3))
    elif suffix in (".ppm", ".pnm"):
        header = f"P6\n{W} {H}\n{2 ** bits - 1}\n".encode()
        body = q.astype(">u2").tobytes() if bits == 16 else q.tobytes()
        with open(path, "wb") as fh:
            fh.write(header + body)
    else:
        raise ImageFormatError(f"{path}: unsupported output suffix {suffix!r}")


def write_field(path, arr):
    """CBF1 dump: magic, H, W, channels (u32 LE), then float64 LE row-major."""
    a = np.asarray(arr, dtype="<f8")
    if a.ndim == 2:
        channels = 1
    elif a.ndim >= 3:
        channels = int(np.prod(a.shape[2:]))
    else:
        raise DimensionError("field dump needs at least 2 dimensions")
    header = CBF_MAGIC + struct.pack("<III", a.shape[0], a.shape[1], channels)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(a).tobytes())


def read_field(path):
    """Inverse of :func:`write_field`; returns ``(H, W)`` or ``(H, W, C)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CBF_MAGIC:
        raise ImageFormatError(f"{path}: not a CBF1 field dump")
    H, W, C = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 8 * H * W * C:
        raise ImageFormatError(f"{path}: expected {H * W * C} samples, found {len(body) // 8}")
    a = np.frombuffer(body, dtype="<f8").astype(float)
    return a.reshape(H, W) if C == 1 else a.reshape(H, W, C)
