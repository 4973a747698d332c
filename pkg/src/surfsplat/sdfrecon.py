"""Stage 1: fit the signed-distance and color grids to frame 0.

The grid bounding box is fitted to the back-projected mask-true depth
samples (padded, with a minimum thickness per axis). The SDF initializes
from a one-frame truncated-SDF fusion of the depth map; optimization then
minimizes the Huber color/depth rendering losses plus the Eikonal
regularizer over random ray batches, by adaptive-moment descent on the
grid values and the logistic sharpness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import FrameData
from .errors import DataError, DivergenceError
from .optim import AdamState, adam_step
from .sdfgrid import ColorGrid, SdfGrid
from .sdfrender import (
    RenderSettings,
    color_depth_losses,
    eikonal_loss_and_grad,
    mesh_total_loss,
    render_backward,
    render_rays,
)

log = logging.getLogger(__name__)


@dataclass
class SdfReconConfig:
    grid_res: int = 96
    iters: int = 2000
    batch_rays: int = 1024
    samples_per_ray: int = 48
    lr_grid: float = 1e-2
    lr_inv_std: float = 1e-2  # on log(inv_std)
    alpha1: float = 0.1
    alpha2: float = 0.01
    huber_delta_color: float = 0.1
    huber_delta_depth_frac: float = 0.05  # of the masked depth range
    inv_std_init: float = 0.0  # 0 = auto: 2 / voxel (logistic width of half a voxel)
    trunc_voxels: float = 0.0  # 0 = no truncation: keep the depth-difference field linear
    bbox_pad: float = 0.05
    min_axis_frac: float = 0.3  # minimum bbox extent per axis vs the largest
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    log_every: int = 500


def fit_bbox(frame: FrameData, pad: float = 0.05, min_axis_frac: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around the back-projected mask-true depth samples."""
    vs, us = np.nonzero(frame.mask)
    if vs.size == 0:
        raise DataError(f"frame {frame.index} has no mask-true pixels")
    pixels = np.stack([us.astype(float), vs.astype(float)], axis=1)
    pts = frame.camera.backproject(pixels, frame.depth[vs, us])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    target = np.maximum(ext, min_axis_frac * ext.max())
    center = 0.5 * (lo + hi)
    half = 0.5 * target * (1.0 + 2.0 * pad)
    return center - half, center + half


def tsdf_init(frame: FrameData, resolution, bbox_min, bbox_max, trunc: float) -> np.ndarray:
    """One-frame truncated SDF fusion of the depth map onto grid nodes.

    Nodes projecting outside the image or onto invalid (masked or
    non-positive) depth use the nearest valid pixel's depth instead, so
    the zero set extends smoothly past the observed region rather than
    walling off at the seen/unseen boundary.
    """
    from scipy import ndimage

    nx, ny, nz = resolution
    axes = [np.linspace(bbox_min[a], bbox_max[a], (nx, ny, nz)[a]) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    pix, z, in_front = frame.camera.project_batch(nodes)
    h, w = frame.depth.shape

    valid_px = frame.mask & (frame.depth > 0)
    if not valid_px.any():
        raise DataError(f"frame {frame.index} has no valid depth for TSDF initialization")
    _, (fi, fj) = ndimage.distance_transform_edt(~valid_px, return_indices=True)
    depth_filled = frame.depth[fi, fj]

    rounded = np.rint(np.nan_to_num(pix, nan=0.0)).astype(int)
    ui = np.clip(rounded[:, 0], 0, w - 1)
    vi = np.clip(rounded[:, 1], 0, h - 1)
    values = np.full(len(nodes), trunc if np.isfinite(trunc) else 1.0)
    ok = in_front
    values[ok] = np.clip(depth_filled[vi[ok], ui[ok]] - z[ok], -trunc, trunc)
    return values.reshape(nx, ny, nz)


def optimize_sdf(frame0: FrameData, config: SdfReconConfig) -> tuple[SdfGrid, ColorGrid, dict]:
    cam = frame0.camera
    res = (config.grid_res,) * 3
    lo, hi = fit_bbox(frame0, config.bbox_pad, config.min_axis_frac)
    voxel = float(np.mean((hi - lo) / (config.grid_res - 1)))
    trunc = config.trunc_voxels * voxel if config.trunc_voxels > 0 else np.inf
    sdf = SdfGrid(res, lo, hi, tsdf_init(frame0, res, lo, hi, trunc))
    color = ColorGrid(res, lo, hi, np.full(res + (3,), 0.5))

    depth_vals = frame0.depth[frame0.mask]
    depth_range = float(depth_vals.max() - depth_vals.min())
    delta_depth = max(config.huber_delta_depth_frac * depth_range, 1e-3 * (cam.far - cam.near))

    vs, us = np.nonzero(frame0.mask)
    pixels_all = np.stack([us.astype(float), vs.astype(float)], axis=1)
    gt_color_all = frame0.image[vs, us]
    gt_depth_all = frame0.depth[vs, us]

    inv_std0 = config.inv_std_init if config.inv_std_init > 0 else 2.0 / voxel
    log_s = np.array([np.log(inv_std0)])
    st_sdf = AdamState.fresh("sdf", sdf.values.size, config.lr_grid)
    st_col = AdamState.fresh("color", color.values.size, config.lr_grid)
    st_s = AdamState.fresh("inv_std", 1, config.lr_inv_std)

    rng = np.random.default_rng(config.seed)
    n = config.samples_per_ray
    history = {"color": [], "depth": [], "eikonal": []}

    for it in range(config.iters):
        sel = rng.choice(len(pixels_all), size=min(config.batch_rays, len(pixels_all)), replace=False)
        origin, dirs, dir_z = cam.ray_batch(pixels_all[sel])
        jitter = rng.uniform(size=(len(sel), n))
        settings = RenderSettings(
            samples_per_ray=n,
            rays_per_batch=len(sel),
            inv_std=float(np.exp(log_s[0])),
            huber_delta=config.huber_delta_color,
            background=np.asarray(config.background, dtype=float),
        )
        result = render_rays(sdf, color, origin, dirs, cam.near, cam.far, settings, jitter)
        z_pred = result.depth * dir_z
        l_color, l_depth, gC, gz = color_depth_losses(
            result.color, gt_color_all[sel], z_pred, gt_depth_all[sel],
            config.huber_delta_color, delta_depth,
        )
        cache = result.cache
        if cache.ts.shape[0] > 0:
            pts = cache.origins[cache.hit][:, None, :] + cache.ts[:, :, None] * cache.dirs[cache.hit][:, None, :]
            inside = ~cache.sdf_interp.outside.reshape(cache.ts.shape[0], n + 1)[:, :n]
            eik_pts = pts[inside]
        else:
            eik_pts = np.zeros((0, 3))
        if len(eik_pts):
            l_eik, g_eik = eikonal_loss_and_grad(sdf, eik_pts)
        else:
            l_eik, g_eik = 0.0, np.zeros(sdf.values.size)
        loss = mesh_total_loss(l_color, l_depth, l_eik, config.alpha1, config.alpha2)
        if not np.isfinite(loss):
            raise DivergenceError("sdf-recon", it)
        history["color"].append(l_color)
        history["depth"].append(l_depth)
        history["eikonal"].append(l_eik)

        g_sdf, g_col, g_s = render_backward(sdf, color, cache, gC, config.alpha1 * gz * dir_z)
        g_sdf += config.alpha2 * g_eik
        g_log_s = np.array([g_s * np.exp(log_s[0])])

        new_sdf, st_sdf = adam_step(sdf.values.ravel(), g_sdf, st_sdf)
        new_col, st_col = adam_step(color.values.ravel(), g_col, st_col)
        log_s, st_s = adam_step(log_s, g_log_s, st_s)
        sdf.values = new_sdf.reshape(res)
        color.values = np.clip(new_col.reshape(res + (3,)), 0.0, 1.0)

        if config.log_every and (it + 1) % config.log_every == 0:
            log.info(
                "sdf-recon iter %d: color %.6f depth %.6f eikonal %.6f",
                it + 1, l_color, l_depth, l_eik,
            )

    info = {
        "history": history,
        "bbox_min": lo,
        "bbox_max": hi,
        "voxel": voxel,
        "inv_std": float(np.exp(log_s[0])),
    }
    return sdf, color, info
