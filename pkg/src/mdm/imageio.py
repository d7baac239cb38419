"""Netpbm (P5/P6) images, the fixed heatmap colormap, and bilinear resizing.

Images are float arrays of shape C×H×W with values in [0, 1]; C is 1 for
PGM and 3 for PPM.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensorcore import interp_matrix


class ImageFormatError(ValueError):
    pass


def _tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, i, n = [], 0, len(blob)
    while len(out) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace() and blob[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated netpbm header")
        out.append(blob[start:i])
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def load_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}; expected P5 or P6")
    try:
        (w, h, maxval), offset = _tokens(blob[2:], 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: bad dimensions {w}×{h}")
    if maxval not in (255, 65535):
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    raster = blob[2 + offset:2 + offset + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    pix = np.frombuffer(raster, dtype=dtype).reshape(h, w, channels)
    return np.clip(pix.transpose(2, 0, 1).astype(np.float64) / maxval, 0.0, 1.0)


def to_integers(image, maxval: int = 255) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(x, 0.0, 1.0) * maxval).astype(np.int64)


def save_ppm(path, image, maxval: int = 255) -> None:
    """Write a 1-channel image as P5 or a 3-channel image as P6."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot write image of shape {x.shape}")
    if maxval not in (255, 65535):
        raise ImageFormatError(f"unsupported maxval {maxval}")
    c, h, w = x.shape
    dtype = ">u2" if maxval == 65535 else "u1"
    raster = to_integers(x, maxval).transpose(1, 2, 0).astype(dtype).tobytes()
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + raster)


# 0 -> blue, 0.25 -> cyan, 0.5 -> green, 0.75 -> yellow, 1 -> red
COLORMAP_ANCHORS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_COLORS = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])


def colormap(values) -> np.ndarray:
    """Map H×W values in [0, 1] to a 3×H×W RGB image."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, COLORMAP_ANCHORS, COLORMAP_COLORS[:, k]) for k in range(3)])


def render_heatmap(heat, image, alpha: float = 0.5, beta: float = 0.3) -> np.ndarray:
    """Blend the colour-mapped heatmap over the image: ``clip(alpha*X + beta*colour)``."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] == 1:
        x = np.repeat(x, 3, axis=0)
    heat = np.asarray(heat, dtype=np.float64)
    if x.shape[1:] != heat.shape:
        raise ImageFormatError(f"heatmap {heat.shape} does not match image {x.shape}")
    return np.clip(alpha * x + beta * colormap(heat), 0.0, 1.0)


def resize_bilinear(image, size: tuple[int, int]) -> np.ndarray:
    """Resize C×H×W to C×size by half-pixel bilinear interpolation (no antialiasing)."""
    x = np.asarray(image, dtype=np.float64)
    h, w = size
    rm, cm = interp_matrix(x.shape[1], h), interp_matrix(x.shape[2], w)
    return np.stack([rm @ ch @ cm.T for ch in x])
