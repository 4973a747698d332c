"""Per-frame scene data and the on-disk dataset directory layout.

A dataset directory contains, for frames i = 0..T-1:

    frame_%04d.png   8-bit RGB image
    depth_%04d.pfm   32-bit float depth (camera-space z, scene units)
    mask_%04d.png    8-bit mask, 0 = pixel excluded from every loss
    cameras.json     {"frames": [{"index", "intrinsics", "pose", "near", "far"}]}

Synthetic datasets may add ground_truth.json and gt_tracks.jsonl; loaders
ignore unknown files, so real-data adapters only need the four above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import DataError
from .imageio import read_mask_png, read_pfm, read_png, write_mask_png, write_pfm, write_png


@dataclass
class FrameData:
    image: np.ndarray  # (H, W, 3) floats in [0, 1]
    depth: np.ndarray  # (H, W) camera-space z, > 0 where mask is true
    mask: np.ndarray  # (H, W) bool, true = participates in losses
    camera: Camera
    index: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.depth.shape
        if self.image.shape != (h, w, 3):
            raise DataError(f"frame {self.index}: image shape {self.image.shape} does not match depth {self.depth.shape}")
        if self.mask.shape != (h, w):
            raise DataError(f"frame {self.index}: mask shape {self.mask.shape} does not match depth")
        if np.any(self.depth[self.mask] <= 0):
            raise DataError(f"frame {self.index}: non-positive depth at mask-true pixels")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def _frame_paths(root: Path, index: int) -> tuple[Path, Path, Path]:
    return (
        root / f"frame_{index:04d}.png",
        root / f"depth_{index:04d}.pfm",
        root / f"mask_{index:04d}.png",
    )


def save_dataset(root, frames: list[FrameData]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cams = []
    for f in frames:
        img_p, dep_p, msk_p = _frame_paths(root, f.index)
        write_png(img_p, f.image)
        write_pfm(dep_p, f.depth)
        write_mask_png(msk_p, f.mask)
        cams.append(
            {
                "index": f.index,
                "intrinsics": f.camera.intrinsics.tolist(),
                "pose": f.camera.pose.tolist(),
                "near": f.camera.near,
                "far": f.camera.far,
            }
        )
    with open(root / "cameras.json", "w") as fh:
        json.dump({"frames": cams}, fh, indent=1)


def load_dataset(root) -> list[FrameData]:
    root = Path(root)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DataError(f"missing camera file: {cam_path}")
    with open(cam_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{cam_path}: invalid JSON ({e})") from None
    entries = meta.get("frames")
    if not entries:
        raise DataError(f"{cam_path}: no frames listed")
    frames = []
    for entry in sorted(entries, key=lambda e: e["index"]):
        idx = int(entry["index"])
        camera = Camera(
            intrinsics=np.array(entry["intrinsics"], dtype=float),
            pose=np.array(entry["pose"], dtype=float),
            near=float(entry["near"]),
            far=float(entry["far"]),
        )
        img_p, dep_p, msk_p = _frame_paths(root, idx)
        frames.append(
            FrameData(
                image=read_png(img_p),
                depth=read_pfm(dep_p),
                mask=read_mask_png(msk_p),
                camera=camera,
                index=idx,
            )
        )
    return frames
