"""Pinhole camera: intrinsics + world-to-camera pose, projection and rays.

Pixel coordinates are continuous (u, v) with u along image columns and v
along rows; arrays are indexed [v, u]. Depth always means camera-space z,
matching the depth maps in a dataset. Ray directions are unit vectors, so
the ray parameter t relates to depth via z = t * dir_z with dir_z the
camera-space z component of the direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BehindCameraError, DataError

_ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray  # (3, 3) upper-triangular, fx/fy > 0
    pose: np.ndarray  # (4, 4) rigid world-to-camera transform
    near: float
    far: float

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float)
        T = np.array(self.pose, dtype=float)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise DataError("camera matrices must be 3x3 intrinsics and 4x4 pose")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=100 * _ORTHO_TOL):
            raise DataError("camera pose rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise DataError("camera pose rotation block has determinant -1")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise DataError("camera pose last row must be (0, 0, 0, 1)")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise DataError("camera focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise DataError("camera requires 0 < near < far")
        K.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "pose", T)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def compose(self) -> np.ndarray:
        """Full 4x4 projection matrix (intrinsics times pose)."""
        P = np.eye(4)
        P[:3, :3] = self.intrinsics @ self.rotation
        P[:3, 3] = self.intrinsics @ self.translation
        return P

    @classmethod
    def from_projection(cls, P: np.ndarray, near: float, far: float) -> "Camera":
        """Recover intrinsics and pose from a composed 4x4 projection.

        Uses an RQ decomposition of the upper-left 3x3 block, with signs
        fixed so the intrinsic diagonal is positive and det(rotation) = +1.
        """
        P = np.asarray(P, dtype=float)
        A = P[:3, :3].copy()
        b = P[:3, 3].copy()
        if np.linalg.det(A) < 0:  # homogeneous scale ambiguity
            A, b = -A, -b
        K, R = scipy.linalg.rq(A)
        signs = np.sign(np.diag(K))
        signs[signs == 0] = 1.0
        D = np.diag(signs)
        K = K @ D
        R = D @ R
        K = K / K[2, 2]
        t = np.linalg.solve(K, b)
        pose = np.eye(4)
        pose[:3, :3] = R
        pose[:3, 3] = t
        return cls(intrinsics=K, pose=pose, near=near, far=far)

    # -- projection ------------------------------------------------------

    def project(self, point: np.ndarray) -> tuple[np.ndarray, float]:
        """Project a world point; returns (pixel, depth). Raises behind camera."""
        point = np.asarray(point, dtype=float)
        pc = self.rotation @ point + self.translation
        if pc[2] <= 0.0:
            raise BehindCameraError(f"point has camera-space z = {pc[2]:.6g}")
        h = self.intrinsics @ pc
        return h[:2] / h[2], float(pc[2])

    def project_batch(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized projection: (pixels, depths, in_front mask).

        Rows with depth <= 0 hold NaN pixels instead of raising.
        """
        points = np.asarray(points, dtype=float)
        pc = points @ self.rotation.T + self.translation
        z = pc[:, 2]
        ok = z > 0.0
        h = pc @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = h[:, :2] / h[:, 2:3]
        pix[~ok] = np.nan
        return pix, z, ok

    # -- rays --------------------------------------------------------------

    def ray(self, pixel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray through a pixel: (origin, unit direction)."""
        origin, dirs, _ = self.ray_batch(np.asarray(pixel, dtype=float)[None, :])
        return origin, dirs[0]

    def ray_batch(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rays for (N, 2) pixels: (origin, unit dirs (N, 3), dir_z (N,)).

        dir_z is the camera-space z component of each unit direction; a
        ray point origin + t * dir has depth t * dir_z.
        """
        pixels = np.asarray(pixels, dtype=float)
        ones = np.ones((pixels.shape[0], 1))
        dc = np.linalg.solve(self.intrinsics, np.concatenate([pixels, ones], axis=1).T).T
        norms = np.linalg.norm(dc, axis=1, keepdims=True)
        dc = dc / norms
        dirs = dc @ self.rotation  # R^T applied row-wise
        return self.center, dirs, dc[:, 2]

    def backproject(self, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Lift (N, 2) pixels at camera-space depths (N,) to world points."""
        origin, dirs, dir_z = self.ray_batch(np.asarray(pixels, dtype=float))
        t = np.asarray(depths, dtype=float) / dir_z
        return origin + t[:, None] * dirs


# camera-space frame for a scene bbox: helper used by grids and synth
def frustum_corners(camera: Camera, width: int, height: int, depth_min: float, depth_max: float) -> np.ndarray:
    """World positions of the 8 frustum corner points at two depths."""
    px = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]]
    )
    origin, dirs, dir_z = camera.ray_batch(px)
    pts = []
    for d in (depth_min, depth_max):
        t = d / dir_z
        pts.append(origin + t[:, None] * dirs)
    return np.concatenate(pts, axis=0)
