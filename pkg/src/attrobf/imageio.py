"""8-bit RGB image files: binary PPM (P6) and PNG.

Images are exchanged as float CHW arrays in [0, 1]; on disk they are
quantized with ``round(255 * v)``.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .exceptions import DatasetError


def to_uint8(chw):
    """Quantize a CHW float image in [0, 1] to HWC uint8."""
    a = np.asarray(chw, dtype=np.float64)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(hwc):
    return (np.asarray(hwc, dtype=np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def write_ppm(path, chw):
    hwc = to_uint8(chw)
    h, w, _ = hwc.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(hwc.tobytes())


def _ppm_tokens(data):
    # header fields are whitespace separated; '#' starts a comment to end of line
    tokens, i = [], 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), off = _ppm_tokens(data)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if len(data) < off + w * h * 3:
        raise ValueError(f"{path}: truncated raster")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return from_uint8(raster.reshape(h, w, 3))


def write_png(path, chw):
    Image.fromarray(to_uint8(chw), mode="RGB").save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_image(path, chw):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        write_png(path, chw)
    elif ext == ".ppm":
        write_ppm(path, chw)
    else:
        raise ValueError(f"unsupported image extension {ext!r}")


def read_image(path):
    """Decode a PNG or PPM file to a float32 CHW array in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".ppm":
            return read_ppm(path)
        if ext == ".png":
            return read_png(path)
    except (OSError, ValueError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise DatasetError(f"cannot decode {path}: {e}") from None
    raise DatasetError(f"unsupported image extension {ext!r} for {path}")
