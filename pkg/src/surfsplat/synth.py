"""Synthetic deforming-surface sequences with exact ground truth.

The scene is a textured heightfield z(x, y, t) = z0 + A sin(wx x + p t)
sin(wy y) observed by a static pinhole camera. The albedo is multi-octave
value noise with dark vessel curves drawn in material coordinates, so
texture features are attached to the surface and move with it. A
rectangular tool occluder sweeps across the image starting outside it, so
frame 0 is fully visible. Depth images are exact ray casts (bisection on
the ray parameter) before optional noise; keypoint trajectories sampled
at vessel intersections are exact material points.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .camera import Camera
from .dataset import FrameData, save_dataset
from .errors import ConfigError
from .imageio import bilinear_sample
from .tracks import Observation, SparseTrackSet, save_tracks

TOOL_COLOR = np.array([0.38, 0.40, 0.46])
VESSEL_COLOR = np.array([0.36, 0.09, 0.11])


@dataclass
class SynthConfig:
    width: int = 128
    height: int = 128
    frames: int = 10
    z0: float = 1.0
    amplitude: float = 0.05
    omega_x: float = 3.0
    omega_y: float = 2.0
    phase_rate: float = 0.35  # radians per frame
    focal: float | None = None  # defaults to 0.75 * width
    near: float = 0.5
    far: float = 1.5
    noise_depth: float = 0.005
    noise_color: float = 0.005
    tool: bool = True
    tool_width: float = 0.22  # fractions of image size
    tool_height: float = 0.30
    tool_v: float = 0.55
    tool_u0: float = -0.25  # center path endpoints, fractions of width
    tool_u1: float = 0.95
    texture_octaves: int = 4
    texture_base_res: int = 6
    vessels_per_axis: int = 3
    vessel_amp: float = 0.05
    vessel_freq: float = 4.0
    vessel_sigma: float = 0.012
    vessel_darkness: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("synthetic sequences need at least 2 frames")
        if self.focal is None:
            self.focal = 0.75 * self.width
        if not (0 < self.near < self.z0 - abs(self.amplitude)) or not (
            self.z0 + abs(self.amplitude) < self.far
        ):
            raise ConfigError("surface leaves the camera frustum: need near < z0 +- A < far")

    def camera(self) -> Camera:
        K = np.array(
            [[self.focal, 0.0, self.width / 2.0], [0.0, self.focal, self.height / 2.0], [0.0, 0.0, 1.0]]
        )
        return Camera(intrinsics=K, pose=np.eye(4), near=self.near, far=self.far)

    @property
    def depth_range(self) -> float:
        return self.far - self.near


PRESETS = {
    "plane": dict(amplitude=0.0),
    "bend": dict(amplitude=0.05, omega_x=3.0, omega_y=2.0, phase_rate=0.35),
    "pulse": dict(amplitude=0.03, omega_x=5.0, omega_y=4.0, phase_rate=1.0),
}


def preset_config(name: str, **overrides) -> SynthConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (choose from {sorted(PRESETS)})")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return SynthConfig(**kw)


# -- texture -------------------------------------------------------------------


class _Texture:
    """Procedural albedo in material coordinates, deterministic per seed."""

    def __init__(self, config: SynthConfig):
        rng = np.random.default_rng([config.seed, 0])
        self.domain = 1.0  # material coordinates live in [-domain, domain]^2
        self.grids = []
        for o in range(config.texture_octaves):
            res = config.texture_base_res * 2**o + 1
            self.grids.append((res, rng.uniform(-1.0, 1.0, size=(res, res)), 0.55**o))
        nv = config.vessels_per_axis
        span = 2.0 * self.domain
        centers = (np.arange(1, nv + 1) / (nv + 1) - 0.5) * span
        self.h_curves = [(c + rng.uniform(-0.05, 0.05), rng.uniform(0, 2 * np.pi)) for c in centers]
        self.v_curves = [(c + rng.uniform(-0.05, 0.05), rng.uniform(0, 2 * np.pi)) for c in centers]
        self.config = config

    def noise(self, xy: np.ndarray) -> np.ndarray:
        uv01 = (xy + self.domain) / (2.0 * self.domain)
        total = np.zeros(len(xy))
        for res, grid, amp in self.grids:
            pix = np.clip(uv01 * (res - 1), 0, res - 1)
            total += amp * bilinear_sample(grid, pix[:, ::-1])  # grid indexed [v, u]
        return total

    def vessel_intensity(self, xy: np.ndarray) -> np.ndarray:
        c = self.config
        x, y = xy[:, 0], xy[:, 1]
        m = np.zeros(len(xy))
        for cc, th in self.h_curves:
            d = y - (cc + c.vessel_amp * np.sin(c.vessel_freq * x + th))
            m += np.exp(-((d / c.vessel_sigma) ** 2))
        for cc, th in self.v_curves:
            d = x - (cc + c.vessel_amp * np.sin(c.vessel_freq * y + th))
            m += np.exp(-((d / c.vessel_sigma) ** 2))
        return np.minimum(m, 1.0)

    def albedo(self, xy: np.ndarray) -> np.ndarray:
        base = np.array([0.74, 0.47, 0.43])
        n = self.noise(xy)
        tissue = np.clip(base[None, :] * (0.75 + 0.45 * n[:, None]), 0.0, 1.0)
        v = (self.config.vessel_darkness * self.vessel_intensity(xy))[:, None]
        return (1.0 - v) * tissue + v * VESSEL_COLOR[None, :]

    def vessel_intersections(self) -> np.ndarray:
        """Material points where a horizontal and a vertical vessel cross."""
        c = self.config
        pts = []
        for ch, th in self.h_curves:
            for cv, tv in self.v_curves:
                x, y = cv, ch
                for _ in range(60):
                    x = cv + c.vessel_amp * np.sin(c.vessel_freq * y + tv)
                    y = ch + c.vessel_amp * np.sin(c.vessel_freq * x + th)
                pts.append((x, y))
        return np.array(pts)


# -- geometry ------------------------------------------------------------------


def surface_z(config: SynthConfig, xy: np.ndarray, frame: int) -> np.ndarray:
    xy = np.atleast_2d(xy)
    phase = config.phase_rate * frame
    return config.z0 + config.amplitude * np.sin(config.omega_x * xy[:, 0] + phase) * np.sin(
        config.omega_y * xy[:, 1]
    )


def raycast(config: SynthConfig, camera: Camera, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-pixel depth (camera z) and material coordinates of the hit."""
    h, w = config.height, config.width
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1)
    origin, dirs, dir_z = camera.ray_batch(pixels)
    lo = np.full(len(pixels), config.near) / dir_z
    hi = np.full(len(pixels), config.far) / dir_z
    for _ in range(80):  # bisection on the ray parameter
        mid = 0.5 * (lo + hi)
        p = origin + mid[:, None] * dirs
        f = p[:, 2] - surface_z(config, p[:, :2], frame)
        above = f < 0.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    t = 0.5 * (lo + hi)
    p = origin + t[:, None] * dirs
    depth = (t * dir_z).reshape(h, w)
    return depth, p[:, :2].reshape(h, w, 2)


def _tool_rect(config: SynthConfig, frame: int) -> tuple[float, float, float, float] | None:
    if not config.tool:
        return None
    T = config.frames
    alpha = frame / (T - 1) if T > 1 else 0.0
    uc = (config.tool_u0 + (config.tool_u1 - config.tool_u0) * alpha) * config.width
    vc = config.tool_v * config.height
    hw = 0.5 * config.tool_width * config.width
    hh = 0.5 * config.tool_height * config.height
    return (uc - hw, uc + hw, vc - hh, vc + hh)


@dataclass
class GroundTruth:
    """Analytic scene description, enough to recompute any ground truth."""

    config: SynthConfig

    def surface_point(self, xy: np.ndarray, frame: int) -> np.ndarray:
        xy = np.atleast_2d(xy)
        z = surface_z(self.config, xy, frame)
        return np.concatenate([xy, z[:, None]], axis=1)

    def depth(self, frame: int) -> np.ndarray:
        return raycast(self.config, self.config.camera(), frame)[0]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"synth_config": asdict(self.config)}, fh, indent=1)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            data = json.load(fh)
        return cls(config=SynthConfig(**data["synth_config"]))


def ground_truth_tracks(config: SynthConfig, count: int | None = None) -> SparseTrackSet:
    """Exact trajectories of vessel-intersection material points.

    Observations occluded by the tool (or outside the image) are dropped.
    """
    camera = config.camera()
    texture = _Texture(config)
    pts = texture.vessel_intersections()
    if count is not None:
        pts = pts[:count]
    tracks = []
    for xy in pts:
        track = {}
        for t in range(config.frames):
            p3 = np.array([xy[0], xy[1], float(surface_z(config, xy[None, :], t)[0])])
            pix, depth, ok = camera.project_batch(p3[None, :])
            if not ok[0]:
                continue
            u, v = pix[0]
            if not (0 <= u <= config.width - 1 and 0 <= v <= config.height - 1):
                continue
            rect = _tool_rect(config, t)
            if rect and rect[0] <= u <= rect[1] and rect[2] <= v <= rect[3]:
                continue
            track[t] = Observation(pixel=pix[0], point3d=p3)
        if track:
            tracks.append(track)
    return SparseTrackSet(tracks=tracks)


def generate_sequence(config: SynthConfig, out_dir=None) -> tuple[list[FrameData], GroundTruth]:
    """Render the full sequence; optionally write the dataset directory."""
    camera = config.camera()
    texture = _Texture(config)
    h, w = config.height, config.width
    frames = []
    for t in range(config.frames):
        rng = np.random.default_rng([config.seed, 1, t])
        depth, mat = raycast(config, camera, t)
        image = texture.albedo(mat.reshape(-1, 2)).reshape(h, w, 3)
        mask = np.ones((h, w), dtype=bool)
        rect = _tool_rect(config, t)
        if rect:
            us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            inside = (us >= rect[0]) & (us <= rect[1]) & (vs >= rect[2]) & (vs <= rect[3])
            mask &= ~inside
            stripes = 0.5 + 0.08 * np.sin(0.9 * (us + 2 * vs))
            image = np.where(inside[:, :, None], TOOL_COLOR[None, None, :] * stripes[:, :, None], image)
            depth = np.where(inside, 0.0, depth)
        if config.noise_color > 0:
            image = np.clip(image + rng.normal(0.0, config.noise_color, size=image.shape), 0.0, 1.0)
        if config.noise_depth > 0:
            noisy = depth + rng.normal(0.0, config.noise_depth, size=depth.shape)
            depth = np.where(mask, np.maximum(noisy, 1e-6), depth)
        frames.append(FrameData(image=image, depth=depth, mask=mask, camera=camera, index=t))

    gt = GroundTruth(config=config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_dataset(out_dir, frames)
        gt.save(out_dir / "ground_truth.json")
        save_tracks(out_dir / "gt_tracks.jsonl", ground_truth_tracks(config))
    return frames, gt
