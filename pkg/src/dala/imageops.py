"""Image primitives shared by the data pipeline and the CAM engine.

Resampling conventions, fixed so golden files stay stable:

* Bilinear interpolation uses half-pixel centers: output pixel x samples
  source coordinate (x + 0.5) * (in/out) - 0.5, and coordinates outside
  the image clamp to the border (edge replication).  Resizing to the
  input size is therefore an exact identity.
* Rotation maps each output pixel through the inverse rotation about the
  image center ((W-1)/2, (H-1)/2), then bilinear-samples with the same
  edge-replicating rule.  Positive angles rotate counterclockwise.
* Float-to-byte conversion rounds half up: byte = floor(value*255 + 0.5).

PNG encoding/decoding is delegated to Pillow; all writes are atomic
(temp file + rename in the destination directory).
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "bilinear_resize",
    "rotate_bilinear",
    "load_png",
    "save_png",
    "to_uint8",
    "heat_colormap",
    "overlay_heatmap",
    "atomic_write_bytes",
]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never observe
    a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sample_axis(out_size: int, in_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates for one axis: low index, high
    index, and the fractional weight of the high index."""
    coords = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    hi = np.clip(lo + 1, 0, in_size - 1)
    lo = np.clip(lo, 0, in_size - 1)
    return lo, hi, frac


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of a (..., H, W) float array."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[-2], img.shape[-1]
    y0, y1, fy = _sample_axis(out_h, h)
    x0, x1, fx = _sample_axis(out_w, w)
    top = img[..., y0, :]
    bot = img[..., y1, :]
    rows = top + fy[:, None] * (bot - top)
    left = rows[..., :, x0]
    right = rows[..., :, x1]
    return left + fx * (right - left)


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a (..., H, W) float array about its center with bilinear
    sampling and edge replication."""
    h, w = img.shape[-2], img.shape[-1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_x = cos * xs + sin * ys + cx
    src_y = -sin * xs + cos * ys + cy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    tl = img[..., y0c, x0c]
    tr = img[..., y0c, x1c]
    bl = img[..., y1c, x0c]
    br = img[..., y1c, x1c]
    top = tl + fx * (tr - tl)
    bot = bl + fx * (br - bl)
    return top + fy * (bot - top)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_png(path) -> np.ndarray:
    """Decode a PNG to uint8: (H,W) for grayscale, (H,W,3) otherwise."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, array: np.ndarray) -> None:
    """Encode a uint8 (H,W) or (H,W,3) array as PNG, atomically."""
    if array.dtype != np.uint8:
        raise ValueError(f"save_png expects uint8, got {array.dtype}")
    mode = "L" if array.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] to RGB bytes with a fixed piecewise-linear ramp
    (blue -> cyan -> green -> yellow -> red)."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return to_uint8(np.stack([r, g, b], axis=-1))


def overlay_heatmap(base_rgb: np.ndarray, values: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped heatmap over a base image at fixed alpha."""
    if base_rgb.shape[:2] != values.shape:
        raise ValueError(
            f"base {base_rgb.shape[:2]} and heatmap {values.shape} sizes differ"
        )
    color = heat_colormap(values).astype(np.float64)
    blended = (1.0 - alpha) * base_rgb.astype(np.float64) + alpha * color
    return np.floor(blended + 0.5).astype(np.uint8)
