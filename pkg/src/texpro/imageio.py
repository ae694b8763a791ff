"""PNG read/write for float images in [0, 1] (8- and 16-bit, linear, no sRGB tag)."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import png


def _to_rows(img: np.ndarray, bits: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] not in (1, 3):
            raise ValueError(f"expected (C, H, W) with C in (1, 3), got {a.shape}")
        greyscale = a.shape[0] == 1
        a = a[0] if greyscale else np.transpose(a, (1, 2, 0))
    elif a.ndim == 2:
        greyscale = True
    else:
        raise ValueError(f"cannot write image of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    top = (1 << bits) - 1
    q = np.round(np.clip(a, 0.0, 1.0) * top).astype(np.uint16 if bits == 16 else np.uint8)
    h = q.shape[0]
    return q.reshape(h, -1), greyscale


def encode_png(img, bits: int = 8) -> bytes:
    if bits not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    rows, grey = _to_rows(img, bits)
    width = rows.shape[1] if grey else rows.shape[1] // 3
    writer = png.Writer(width, rows.shape[0], greyscale=grey, bitdepth=bits, compression=9)
    buf = io.BytesIO()
    writer.write(buf, rows.tolist())
    return buf.getvalue()


def write_png(path, img, bits: int = 8) -> None:
    Path(path).write_bytes(encode_png(img, bits))


def write_mask(path, bits) -> None:
    write_png(path, np.asarray(bits, dtype=np.float64), 8)


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]: (H, W) for grey, (3, H, W) for colour (alpha dropped)."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
    except (OSError, png.Error) as exc:
        raise ValueError(f"cannot read PNG {path}: {exc}") from None
    planes = info["planes"]
    a = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, planes)
    a /= (1 << info["bitdepth"]) - 1
    if planes in (1, 2):
        return a[..., 0]
    return np.transpose(a[..., :3], (2, 0, 1)).copy()


def read_mask(path) -> np.ndarray:
    a = read_png(path)
    if a.ndim == 3:
        a = a.max(axis=0)
    return a > 0
