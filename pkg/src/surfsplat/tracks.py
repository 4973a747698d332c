"""Sparse keypoint tracks: detection, matching, chaining, 3D lifting.

Detection is Shi-Tomasi (smallest structure-tensor eigenvalue) with
non-maximum suppression and quadratic sub-pixel refinement; descriptors
are gain/bias-normalized 11x11 intensity patches. Matching is mutual
nearest neighbors with a two-sided ratio test and a pixel-displacement
gate. Tracks chain matches across consecutive frames (small gaps
allowed) and lift observations to 3D through each frame's depth map.

The on-disk format is JSON lines, one observation per record:
{"track": int, "frame": int, "x": px, "y": px, "X","Y","Z": scene units}.
The same format ingests externally computed tracks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import FrameData
from .errors import DataError
from .gaussians import GaussianSet
from .imageio import bilinear_sample

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    max_keypoints: int = 200
    quality: float = 0.02  # response threshold as a fraction of the best
    nms_px: int = 4
    smoothing_sigma: float = 1.5
    patch_radius: int = 5  # 11x11 descriptor patches
    ratio: float = 0.8
    max_disp: float = 20.0
    max_gap: int = 2
    min_len: int = 3


@dataclass
class Keypoint:
    position: np.ndarray  # (2,) sub-pixel (u, v)
    response: float
    descriptor: np.ndarray  # unit-norm


@dataclass
class Observation:
    pixel: np.ndarray  # (2,)
    point3d: np.ndarray  # (3,)


@dataclass
class SparseTrackSet:
    tracks: list[dict[int, Observation]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tracks)

    def observed_at(self, frame: int) -> list[int]:
        return [i for i, t in enumerate(self.tracks) if frame in t]

    def keypoints_at(self, frame: int, ids=None) -> np.ndarray:
        ids = self.observed_at(frame) if ids is None else ids
        return np.array([self.tracks[i][frame].point3d for i in ids]).reshape(-1, 3)


@dataclass
class RegionAssignment:
    nearest: np.ndarray  # (N,) keypoint (track) index
    in_region: np.ndarray  # (N,) bool
    rho: float
    keypoint_ids: np.ndarray  # track indices backing the keypoint set


def _grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image.mean(axis=2) if image.ndim == 3 else image


def detect_keypoints(image: np.ndarray, mask: np.ndarray, config: TrackerConfig) -> list[Keypoint]:
    gray = _grayscale(image)
    h, w = gray.shape
    ix = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    sig = config.smoothing_sigma
    sxx = ndimage.gaussian_filter(ix * ix, sig, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sig, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sig, mode="nearest")
    # smallest eigenvalue of the structure tensor
    half_tr = 0.5 * (sxx + syy)
    response = half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))

    valid = np.asarray(mask, dtype=bool).copy()
    margin = config.patch_radius + 1
    valid[:margin] = valid[-margin:] = False
    valid[:, :margin] = valid[:, -margin:] = False
    if not valid.any():
        return []
    resp = np.where(valid, response, -np.inf)
    best = resp.max()
    if not np.isfinite(best) or best <= 0:
        return []

    size = 2 * config.nms_px + 1
    peaks = (resp == ndimage.maximum_filter(resp, size=size)) & (resp >= config.quality * best) & valid
    vs, us = np.nonzero(peaks)
    order = np.argsort(resp[vs, us])[::-1][: config.max_keypoints]
    vs, us = vs[order], us[order]

    r = config.patch_radius
    keypoints = []
    for v, u in zip(vs, us):
        du = _parabola_offset(response[v, u - 1], response[v, u], response[v, u + 1])
        dv = _parabola_offset(response[v - 1, u], response[v, u], response[v + 1, u])
        patch = gray[v - r : v + r + 1, u - r : u + r + 1].ravel()
        centered = patch - patch.mean()
        norm = np.linalg.norm(centered)
        if norm < 1e-12:
            continue
        keypoints.append(
            Keypoint(
                position=np.array([u + du, v + dv]),
                response=float(response[v, u]),
                descriptor=centered / norm,
            )
        )
    return keypoints


def _parabola_offset(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if denom >= 0:  # not a local maximum of the 1-D fit
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def match_keypoints(a: list[Keypoint], b: list[Keypoint], config: TrackerConfig) -> list[tuple[int, int]]:
    """Mutual nearest neighbors passing the ratio test in both directions."""
    if not a or not b:
        return []
    da = np.stack([k.descriptor for k in a])
    db = np.stack([k.descriptor for k in b])
    d2 = np.maximum(2.0 - 2.0 * (da @ db.T), 0.0)  # squared distances (unit descriptors)
    best_ab = d2.argmin(axis=1)
    best_ba = d2.argmin(axis=0)
    pa = np.stack([k.position for k in a])
    pb = np.stack([k.position for k in b])
    ratio2 = config.ratio**2
    pairs = []
    for i, j in enumerate(best_ab):
        if best_ba[j] != i:
            continue
        if not _ratio_ok(d2[i], j, ratio2) or not _ratio_ok(d2[:, j], i, ratio2):
            continue
        if np.linalg.norm(pa[i] - pb[j]) >= config.max_disp:
            continue
        pairs.append((i, int(j)))
    return pairs


def _ratio_ok(row: np.ndarray, best: int, ratio2: float) -> bool:
    if row.size < 2:
        return True
    second = np.partition(np.delete(row, best), 0)[0]
    if second <= 0:
        return False
    return row[best] < ratio2 * second


def _lift_depth(frame: FrameData, pixel: np.ndarray) -> float:
    """Depth at a sub-pixel position; falls back to the nearest valid sample."""
    u, v = pixel
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    h, w = frame.depth.shape
    u0 = min(max(u0, 0), w - 2) if w > 1 else 0
    v0 = min(max(v0, 0), h - 2) if h > 1 else 0
    block_ok = frame.mask[v0 : v0 + 2, u0 : u0 + 2].all()
    if block_ok:
        return float(bilinear_sample(frame.depth, pixel[None, :])[0])
    ui, vi = int(round(u)), int(round(v))
    return float(frame.depth[min(max(vi, 0), h - 1), min(max(ui, 0), w - 1)])


def build_tracks(
    frames: list[FrameData],
    config: TrackerConfig,
    keypoints_per_frame: list[list[Keypoint]] | None = None,
) -> SparseTrackSet:
    """Chain pairwise matches across the sequence and lift to 3D."""
    if len(frames) < 2:
        raise DataError("track building needs at least two frames")
    if keypoints_per_frame is None:
        keypoints_per_frame = [detect_keypoints(f.image, f.mask, config) for f in frames]

    owner: list[dict[int, int]] = [dict() for _ in frames]  # frame -> {kp index: track id}
    obs: list[dict[int, int]] = []  # per track: frame -> kp index

    for k in range(len(keypoints_per_frame[0])):
        owner[0][k] = len(obs)
        obs.append({0: k})
    for j in range(1, len(frames)):
        claimed: set[int] = set()
        for gap in range(1, config.max_gap + 1):
            prev = j - gap
            if prev < 0:
                break
            prev_ids = [k for k, t in owner[prev].items() if max(obs[t]) == prev]
            if not prev_ids:
                continue
            cur_ids = [k for k in range(len(keypoints_per_frame[j])) if k not in claimed]
            if not cur_ids:
                break
            pairs = match_keypoints(
                [keypoints_per_frame[prev][k] for k in prev_ids],
                [keypoints_per_frame[j][k] for k in cur_ids],
                config,
            )
            for pi, ci in pairs:
                track = owner[prev][prev_ids[pi]]
                kp = cur_ids[ci]
                owner[j][kp] = track
                obs[track][j] = kp
                claimed.add(kp)
        for k in range(len(keypoints_per_frame[j])):
            if k not in claimed and k not in owner[j]:
                owner[j][k] = len(obs)
                obs.append({j: k})

    tracks = []
    for record in obs:
        if len(record) < config.min_len:
            continue
        t: dict[int, Observation] = {}
        for frame_idx, kp_idx in sorted(record.items()):
            frame = frames[frame_idx]
            pixel = keypoints_per_frame[frame_idx][kp_idx].position
            depth = _lift_depth(frame, pixel)
            point = frame.camera.backproject(pixel[None, :], np.array([depth]))[0]
            t[frame_idx] = Observation(pixel=pixel.copy(), point3d=point)
        tracks.append(t)
    if not tracks:
        raise DataError(
            "no keypoint tracks survived chaining; the deformation stage needs at "
            "least one anchor (callers may fall back to global-only regularization)"
        )
    return SparseTrackSet(tracks=tracks)


def assign_regions(gaussians, track_set: SparseTrackSet, rho: float) -> RegionAssignment:
    """Nearest frame-0 keypoint per kernel; in-region iff within rho."""
    positions = gaussians.positions if isinstance(gaussians, GaussianSet) else np.atleast_2d(gaussians)
    ids = track_set.observed_at(0)
    if not ids:
        raise DataError("region assignment needs at least one track observed at frame 0")
    anchors = track_set.keypoints_at(0, ids)
    d = np.linalg.norm(positions[:, None, :] - anchors[None, :, :], axis=2)
    nearest_local = d.argmin(axis=1)  # ties resolve to the lowest index
    dist = d[np.arange(len(positions)), nearest_local]
    ids_arr = np.asarray(ids, dtype=np.int64)
    return RegionAssignment(
        nearest=ids_arr[nearest_local],
        in_region=dist <= rho,
        rho=float(rho),
        keypoint_ids=ids_arr,
    )


# -- on-disk format ----------------------------------------------------------


def save_tracks(path, track_set: SparseTrackSet) -> None:
    with open(path, "w") as fh:
        for tid, track in enumerate(track_set.tracks):
            for frame_idx in sorted(track):
                o = track[frame_idx]
                rec = {
                    "track": tid,
                    "frame": frame_idx,
                    "x": float(o.pixel[0]),
                    "y": float(o.pixel[1]),
                    "X": float(o.point3d[0]),
                    "Y": float(o.point3d[1]),
                    "Z": float(o.point3d[2]),
                }
                fh.write(json.dumps(rec) + "\n")


def load_tracks(path, num_frames: int | None = None) -> SparseTrackSet:
    by_id: dict[int, dict[int, Observation]] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tid = int(rec["track"])
                frame = int(rec["frame"])
                pixel = np.array([float(rec["x"]), float(rec["y"])])
                point = np.array([float(rec["X"]), float(rec["Y"]), float(rec["Z"])])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{line_no}: malformed track record ({e})") from None
            if frame < 0 or (num_frames is not None and frame >= num_frames):
                raise DataError(f"{path}:{line_no}: frame index {frame} out of range")
            track = by_id.setdefault(tid, {})
            if frame in track:
                raise DataError(f"{path}:{line_no}: duplicate observation of frame {frame} in track {tid}")
            track[frame] = Observation(pixel=pixel, point3d=point)
    return SparseTrackSet(tracks=[by_id[k] for k in sorted(by_id)])
