"""Dense trilinear grids holding the learned signed distance and radiance.

Sampling outside the bounding box clamps to the box and, for the signed
distance field, adds the Euclidean distance to the box so the field keeps
growing like a distance function; callers receive an `outside` flag.

Grid checkpoints are little-endian binary: magic, kind, resolution, bbox,
then row-major (C-order) float64 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"SSGRID01"

# offsets of the 8 cell corners in (x, y, z) index order
_CORNERS = np.array(
    [[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64
)


@dataclass
class InterpData:
    """Everything needed to differentiate a trilinear sample.

    idx: (N, 8) flat node indices; w: (N, 8) trilinear weights;
    gw: (N, 8, 3) spatial gradients of each weight; outside: (N,) bool;
    ext: (N, 3) gradient contribution of the outside-distance term.
    """

    idx: np.ndarray
    w: np.ndarray
    gw: np.ndarray
    outside: np.ndarray
    ext: np.ndarray
    dist: np.ndarray


class GridField:
    def __init__(self, resolution, bbox_min, bbox_max, values: np.ndarray):
        self.resolution = tuple(int(r) for r in resolution)
        self.bbox_min = np.asarray(bbox_min, dtype=float).copy()
        self.bbox_max = np.asarray(bbox_max, dtype=float).copy()
        if any(r < 2 for r in self.resolution):
            raise DataError("grid resolution must be >= 2 per axis")
        if np.any(self.bbox_max <= self.bbox_min):
            raise DataError("grid bbox is degenerate")
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape[: 3] != self.resolution:
            raise DataError(f"grid values shape {self.values.shape} does not match resolution {self.resolution}")
        self.spacing = (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1.0)

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a]) for a in range(3)
        )

    def interp(self, x: np.ndarray) -> InterpData:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        clamped = np.clip(x, self.bbox_min, self.bbox_max)
        delta = x - clamped
        dist = np.linalg.norm(delta, axis=1)
        outside = dist > 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            ext = np.where(outside[:, None], delta / np.where(dist > 0, dist, 1.0)[:, None], 0.0)

        u = (clamped - self.bbox_min) / self.spacing
        i0 = np.minimum(np.floor(u).astype(np.int64), np.array(self.resolution) - 2)
        i0 = np.maximum(i0, 0)
        f = u - i0

        corners = i0[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
        nx, ny, nz = self.resolution
        idx = (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]

        one_minus = 1.0 - f
        # per-axis weight factors for corner offset 0/1
        wa = np.stack([one_minus, f], axis=2)  # (N, 3, 2)
        w = (
            wa[:, 0, _CORNERS[:, 0]]
            * wa[:, 1, _CORNERS[:, 1]]
            * wa[:, 2, _CORNERS[:, 2]]
        )  # (N, 8)

        # d(weight)/dx: sign along the differentiated axis, product of others
        sign = np.where(_CORNERS == 1, 1.0, -1.0)  # (8, 3)
        gw = np.empty((x.shape[0], 8, 3))
        for a in range(3):
            others = [b for b in range(3) if b != a]
            prod = (
                wa[:, others[0], _CORNERS[:, others[0]]]
                * wa[:, others[1], _CORNERS[:, others[1]]]
            )
            gw[:, :, a] = sign[None, :, a] * prod / self.spacing[a]
        # outside the box the clamped axes have zero interpolation gradient
        at_bound = (x < self.bbox_min) | (x > self.bbox_max)
        gw[at_bound[:, None, :].repeat(8, axis=1)] = 0.0
        return InterpData(idx=idx, w=w, gw=gw, outside=outside, ext=ext, dist=dist)


class SdfGrid(GridField):
    """Scalar signed-distance values, one per grid node."""

    def sample(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear SDF values at (N, 3) points, plus an outside flag."""
        it = self.interp(x)
        vals = (self.values.reshape(-1)[it.idx] * it.w).sum(axis=1) + it.dist
        return vals, it.outside

    def sample_one(self, x) -> float:
        return float(self.sample(np.asarray(x, dtype=float)[None, :])[0][0])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Analytic spatial gradient of the (clamp-extended) interpolant."""
        it = self.interp(x)
        flat = self.values.reshape(-1)
        g = np.einsum("nk,nka->na", flat[it.idx], it.gw)
        return g + it.ext

    def gradient_one(self, x) -> np.ndarray:
        return self.gradient(np.asarray(x, dtype=float)[None, :])[0]

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.resolution, self.bbox_min, self.bbox_max, self.values.copy())


class ColorGrid(GridField):
    """RGB values in [0, 1], one triple per grid node."""

    def __init__(self, resolution, bbox_min, bbox_max, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 4 or values.shape[3] != 3:
            raise DataError("color grid values must have shape (nx, ny, nz, 3)")
        super().__init__(resolution, bbox_min, bbox_max, values)

    def sample(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        it = self.interp(x)
        flat = self.values.reshape(-1, 3)
        vals = np.einsum("nk,nkc->nc", it.w, flat[it.idx])
        return vals, it.outside

    def copy(self) -> "ColorGrid":
        return ColorGrid(self.resolution, self.bbox_min, self.bbox_max, self.values.copy())


# -- checkpoints -----------------------------------------------------------


def save_grid(path, grid: GridField) -> None:
    kind = b"c" if isinstance(grid, ColorGrid) else b"s"
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(kind)
        f.write(struct.pack("<3I", *grid.resolution))
        f.write(struct.pack("<6d", *grid.bbox_min, *grid.bbox_max))
        f.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_grid(path) -> GridField:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing grid checkpoint: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: not a grid checkpoint")
        kind = f.read(1)
        res = struct.unpack("<3I", f.read(12))
        lo = struct.unpack("<3d", f.read(24))
        hi = struct.unpack("<3d", f.read(24))
        count = res[0] * res[1] * res[2] * (3 if kind == b"c" else 1)
        payload = np.frombuffer(f.read(count * 8), dtype="<f8")
        if payload.size != count:
            raise DataError(f"{path}: truncated grid payload")
    if kind == b"c":
        return ColorGrid(res, lo, hi, payload.reshape(res + (3,)).copy())
    return SdfGrid(res, lo, hi, payload.reshape(res).copy())
