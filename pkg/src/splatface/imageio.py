"""PNG and raw-float image helpers."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_png(path, image: np.ndarray):
    """Float image in [0,1] (H,W,3) or (H,W) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG -> float32 in [0,1]; RGB images give (H,W,3)."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr.astype(np.float32) / 255.0


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask, dtype=bool) * np.uint8(255))).save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def write_raw_f32(path, image: np.ndarray):
    """Raw little-endian f32 planar dump (exact values, used by tests)."""
    arr = np.asarray(image, dtype="<f4")
    planar = np.moveaxis(arr, -1, 0) if arr.ndim == 3 else arr
    with open(path, "wb") as f:
        f.write(np.uint32(planar.ndim).tobytes())
        f.write(np.asarray(planar.shape, dtype="<u4").tobytes())
        f.write(planar.tobytes())


def read_raw_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        ndim = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        shape = tuple(int(s) for s in np.frombuffer(f.read(4 * ndim), dtype="<u4"))
        data = np.frombuffer(f.read(), dtype="<f4").reshape(shape)
    if data.ndim == 3:
        data = np.moveaxis(data, 0, -1)
    return data.astype(np.float32)
