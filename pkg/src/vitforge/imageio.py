"""Image decoding and encoding.

PPM/PGM (both binary and ASCII variants) are handled natively so the test
suite has no decoder dependency; PNG and JPEG are delegated to Pillow for
real datasets. All decoders return uint8 arrays of shape H x W x C with C
in {1, 3}.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["DecodeError", "read_image", "write_image", "IMAGE_EXTENSIONS"]

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png", ".jpg", ".jpeg")


class DecodeError(ValueError):
    """An image file could not be decoded; the message names the file."""


def _read_netpbm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, fields, offset = _netpbm_header(raw)
        width, height, maxval = fields
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        channels = 3 if magic in (b"P3", b"P6") else 1
        count = width * height * channels
        if magic in (b"P6", b"P5"):
            body = raw[offset:offset + count]
            if len(body) < count:
                raise ValueError("truncated pixel data")
            flat = np.frombuffer(body, dtype=np.uint8, count=count)
        else:  # ASCII variants
            values = raw[offset:].split()
            if len(values) < count:
                raise ValueError("truncated pixel data")
            flat = np.array([int(v) for v in values[:count]], dtype=np.int64)
            if flat.min() < 0 or flat.max() > 255:
                raise ValueError("sample out of range")
            flat = flat.astype(np.uint8)
        return flat.reshape(height, width, channels)
    except (ValueError, IndexError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None


def _netpbm_header(raw: bytes):
    """Parse magic + three header integers, honoring '#' comments."""
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"bad magic {magic!r}")
    fields = []
    i = 2
    while len(fields) < 3:
        if i >= len(raw):
            raise ValueError("truncated header")
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        elif ch.isdigit():
            j = i
            while j < len(raw) and raw[j:j + 1].isdigit():
                j += 1
            fields.append(int(raw[i:j]))
            i = j
        else:
            raise ValueError(f"unexpected header byte {ch!r}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ValueError(f"bad dimensions {width}x{height}")
    # binary formats: exactly one whitespace byte separates header and data
    return magic, (width, height, maxval), i + 1


def _read_pillow(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode not in ("RGB", "L"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def read_image(path: str) -> np.ndarray:
    """Decode an image file into a uint8 H x W x C array."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".ppm", ".pgm"):
        return _read_netpbm(path)
    if ext in (".png", ".jpg", ".jpeg"):
        return _read_pillow(path)
    raise DecodeError(f"cannot decode {path}: unknown extension {ext!r}")


def write_image(path: str, pixels: np.ndarray) -> None:
    """Encode a uint8 (or [0,1] float) H x W x C array by file extension."""
    arr = np.asarray(pixels)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected H x W x C with C in {{1,3}}, got {arr.shape}")
    ext = os.path.splitext(path)[1].lower()
    h, w, c = arr.shape
    if ext == ".ppm":
        if c == 1:
            arr = np.repeat(arr, 3, axis=2)
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(arr.tobytes())
    elif ext == ".pgm":
        if c != 1:
            raise ValueError("PGM holds a single channel")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(arr.tobytes())
    elif ext in (".png", ".jpg", ".jpeg"):
        from PIL import Image

        Image.fromarray(arr[:, :, 0] if c == 1 else arr).save(path)
    else:
        raise ValueError(f"unknown image extension {ext!r}")
