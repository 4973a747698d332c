"""PNG and PFM image I/O.

Images live in memory as float64 arrays in [0, 1]; 8-bit PNG conversion
rounds. Depth maps use the PFM format (grayscale 'Pf', 32-bit floats,
scale -1.0 meaning little-endian, rows stored bottom-to-top).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def write_png(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=float)
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(float) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing mask file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr > 0


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an image at continuous (u, v) pixel positions, clamped to borders.

    image is (H, W) or (H, W, C); uv is (N, 2) with u along columns.
    """
    image = np.asarray(image, dtype=float)
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    h, w = image.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(int), w - 2) if w > 1 else np.zeros(len(u), dtype=int)
    v0 = np.minimum(np.floor(v).astype(int), h - 2) if h > 1 else np.zeros(len(v), dtype=int)
    fu = (u - u0) if w > 1 else np.zeros_like(u)
    fv = (v - v0) if h > 1 else np.zeros_like(v)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    if image.ndim == 2:
        img = image[..., None]
    else:
        img = image
    out = (
        img[v0, u0] * ((1 - fu) * (1 - fv))[:, None]
        + img[v0, u1] * (fu * (1 - fv))[:, None]
        + img[v1, u0] * ((1 - fu) * fv)[:, None]
        + img[v1, u1] * (fu * fv)[:, None]
    )
    return out[:, 0] if image.ndim == 2 else out


def write_pfm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("PFM writer expects a 2-D depth map")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(depth[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing depth file: {path}")
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise DataError(f"{path}: not a grayscale PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise DataError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=endian).reshape(h, w)
    return data[::-1].astype(float)
