"""Gaussian kernel scene representation and its PLY checkpoint format.

GaussianSet stores attributes as packed arrays (positions, quaternions,
scales, opacities, colors); kernel order is stable and is how the
deformation stage refers to individual kernels. Checkpoints are binary
little-endian PLY with float32 per-vertex properties
x y z qw qx qy qz sx sy sz opacity r g b.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quaternion as quat
from .errors import DataError

_PLY_PROPS = ["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b"]


@dataclass
class GaussianKernel:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) unit quaternion, canonical sign
    scale: np.ndarray  # (3,) positive
    opacity: float
    color: np.ndarray  # (3,) in [0, 1]


@dataclass
class GaussianSet:
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        norms = np.linalg.norm(self.rotations, axis=1)
        if n and np.abs(norms - 1.0).max() > 1e-9:
            raise DataError("gaussian rotations must be unit quaternions (within 1e-9)")
        if n and np.any(self.scales <= 0):
            raise DataError("gaussian scales must be positive")
        if n and (self.opacities.min() < 0 or self.opacities.max() > 1):
            raise DataError("gaussian opacities must lie in [0, 1]")

    @classmethod
    def from_raw(cls, positions, rotations, scales, opacities, colors) -> "GaussianSet":
        """Build a valid set from unconstrained optimizer output."""
        rotations = quat.canonical(quat.normalize(rotations))
        scales = np.maximum(np.asarray(scales, dtype=float), 1e-12)
        opacities = np.clip(np.asarray(opacities, dtype=float), 0.0, 1.0)
        colors = np.clip(np.asarray(colors, dtype=float), 0.0, 1.0)
        return cls(positions, rotations, scales, opacities, colors)

    def __len__(self) -> int:
        return len(self.positions)

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            position=self.positions[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(),
            self.rotations.copy(),
            self.scales.copy(),
            self.opacities.copy(),
            self.colors.copy(),
        )

    def permuted(self, order: np.ndarray) -> "GaussianSet":
        return GaussianSet(
            self.positions[order],
            self.rotations[order],
            self.scales[order],
            self.opacities[order],
            self.colors[order],
        )


def save_ply(path, gs: GaussianSet, comments: list[str] | None = None) -> None:
    n = len(gs)
    header = ["ply", "format binary_little_endian 1.0"]
    for c in comments or []:
        header.append(f"comment {c}")
    header.append(f"element vertex {n}")
    header.extend(f"property float {p}" for p in _PLY_PROPS)
    header.append("end_header")
    data = np.concatenate(
        [gs.positions, gs.rotations, gs.scales, gs.opacities[:, None], gs.colors], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_ply(path) -> tuple[GaussianSet, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing scene checkpoint: {path}")
    with open(path, "rb") as f:
        lines = []
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: truncated PLY header")
            lines.append(line.decode("ascii", errors="replace").strip())
            if lines[-1] == "end_header":
                break
        payload = f.read()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise DataError(f"{path}: not a binary little-endian PLY")
    comments = [l[len("comment ") :] for l in lines if l.startswith("comment ")]
    count = None
    props = []
    for l in lines:
        if l.startswith("element vertex"):
            count = int(l.split()[-1])
        elif l.startswith("property"):
            props.append(l.split()[-1])
    if count is None or props != _PLY_PROPS:
        raise DataError(f"{path}: unexpected PLY layout (need {' '.join(_PLY_PROPS)})")
    data = np.frombuffer(payload, dtype="<f4", count=count * len(_PLY_PROPS))
    if data.size != count * len(_PLY_PROPS):
        raise DataError(f"{path}: truncated PLY payload")
    data = data.reshape(count, len(_PLY_PROPS)).astype(float)
    gs = GaussianSet.from_raw(
        positions=data[:, 0:3],
        rotations=data[:, 3:7],
        scales=data[:, 7:10],
        opacities=data[:, 10],
        colors=data[:, 11:14],
    )
    return gs, comments
