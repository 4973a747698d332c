"""Differentiable CPU rasterizer for anisotropic Gaussian kernels.

Forward: each kernel's 3D covariance R(q) diag(s)^2 R(q)^T is pushed
through the camera rotation and the perspective Jacobian at its mean
(EWA), a 0.3 px^2 low-pass term is added to the 2D covariance diagonal,
and per pixel the splats are alpha-composited front to back in (depth,
kernel index) order. Backward returns exact gradients of the composited
color/depth/alpha images with respect to every kernel attribute, with a
deterministic accumulation order.

The whole pass is vectorized over fragments (splat, pixel) pairs; there
is no tile binning, pixels are sorted globally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from .camera import Camera
from .errors import SurfsplatError
from .gaussians import GaussianKernel, GaussianSet

LOWPASS = 0.3  # px^2 anti-aliasing floor added to cov2d diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
_W_FLOOR = 1e-8
_FRAGMENT_BUDGET = 150_000_000


@dataclass
class Splat2D:
    index: int
    mean2d: np.ndarray  # (2,) px
    cov2d: np.ndarray  # (2, 2) px^2, includes the low-pass term
    depth: float  # camera-space z
    opacity: float
    color: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)


@dataclass
class ProjCache:
    """Per-kernel projection intermediates (arrays over the full set)."""

    valid: np.ndarray  # (N,) bool, False = culled
    qn: np.ndarray  # (N, 4) normalized quaternions
    R: np.ndarray  # (N, 3, 3)
    M: np.ndarray  # (N, 3, 3) R diag(s)
    cov_cam: np.ndarray  # (N, 3, 3)
    t: np.ndarray  # (N, 3) camera-space means
    J: np.ndarray  # (N, 2, 3)
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 2, 2) inverse of cov2d
    radii: np.ndarray  # (N, 2) 3-sigma extent per image axis


def project_gaussians(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    camera: Camera,
    width: int,
    height: int,
) -> ProjCache:
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(positions)
    qn = quat.normalize(np.atleast_2d(rotations))
    R = quat.to_matrix(qn)
    M = R * np.atleast_2d(scales)[:, None, :]  # R @ diag(s)
    cov3 = M @ M.transpose(0, 2, 1)

    W = camera.rotation
    t = positions @ W.T + camera.translation
    cov_cam = np.einsum("ab,nbc,dc->nad", W, cov3, W)

    z = t[:, 2]
    valid = z > camera.near

    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(valid, 1.0 / np.where(z != 0, z, 1.0), 0.0)
    mean2d = np.stack([fx * t[:, 0] * inv_z + cx, fy * t[:, 1] * inv_z + cy], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * t[:, 0] * inv_z**2
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * t[:, 1] * inv_z**2

    cov2d = np.einsum("nab,nbc,ndc->nad", J, cov_cam, J)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    safe_det = np.where(det > 0, det, 1.0)
    conic[:, 0, 0] = cov2d[:, 1, 1] / safe_det
    conic[:, 1, 1] = cov2d[:, 0, 0] / safe_det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / safe_det

    radii = 3.0 * np.sqrt(np.maximum(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1), 0.0))
    on_image = (
        (mean2d[:, 0] + radii[:, 0] >= 0)
        & (mean2d[:, 0] - radii[:, 0] <= width - 1)
        & (mean2d[:, 1] + radii[:, 1] >= 0)
        & (mean2d[:, 1] - radii[:, 1] <= height - 1)
    )
    valid = valid & np.where(np.isfinite(mean2d).all(axis=1), on_image, False) & (det > 0)
    return ProjCache(valid, qn, R, M, cov_cam, t, J, mean2d, cov2d, conic, radii)


def project_gaussian(kernel: GaussianKernel, camera: Camera, width: int, height: int) -> Splat2D | None:
    """Project one kernel; returns None when culled."""
    cache = project_gaussians(
        kernel.position[None], kernel.rotation[None], kernel.scale[None], camera, width, height
    )
    if not cache.valid[0]:
        return None
    return Splat2D(
        index=0,
        mean2d=cache.mean2d[0],
        cov2d=cache.cov2d[0],
        depth=float(cache.t[0, 2]),
        opacity=kernel.opacity,
        color=kernel.color,
    )


@dataclass
class FragCache:
    """Sorted fragment arrays retained for the backward pass."""

    proj: ProjCache
    width: int
    height: int
    background: np.ndarray
    gauss: np.ndarray  # (F,) kernel index per fragment
    pix: np.ndarray  # (F,) flat pixel id, sorted ascending
    delta: np.ndarray  # (F, 2) pixel center - mean2d
    gval: np.ndarray  # (F,) exp term
    a: np.ndarray  # (F,) clamped alpha
    T: np.ndarray  # (F,) transmittance before the fragment
    w: np.ndarray  # (F,) a * T
    starts: np.ndarray  # segment starts into the fragment arrays
    seg_pix: np.ndarray  # flat pixel id per segment
    wsum: np.ndarray  # per segment
    dsum: np.ndarray  # per segment (weighted depth)


def _build_fragments(proj: ProjCache, opacities, width, height):
    idx = np.flatnonzero(proj.valid)
    if idx.size == 0:
        return (np.zeros(0, dtype=np.int64),) * 2
    m = proj.mean2d[idx]
    r = proj.radii[idx]
    x0 = np.maximum(np.ceil(m[:, 0] - r[:, 0]), 0).astype(np.int64)
    x1 = np.minimum(np.floor(m[:, 0] + r[:, 0]), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(m[:, 1] - r[:, 1]), 0).astype(np.int64)
    y1 = np.minimum(np.floor(m[:, 1] + r[:, 1]), height - 1).astype(np.int64)
    wpx = np.maximum(x1 - x0 + 1, 0)
    hpx = np.maximum(y1 - y0 + 1, 0)
    area = wpx * hpx
    keep = area > 0
    idx, x0, y0, wpx, hpx, area = idx[keep], x0[keep], y0[keep], wpx[keep], hpx[keep], area[keep]
    total = int(area.sum())
    if total > _FRAGMENT_BUDGET:
        raise SurfsplatError(f"rasterizer: fragment budget exceeded ({total} fragments)")
    if total == 0:
        return (np.zeros(0, dtype=np.int64),) * 2
    gauss = np.repeat(idx, area)
    offsets = np.arange(total) - np.repeat(np.cumsum(area) - area, area)
    w_rep = np.repeat(wpx, area)
    px = np.repeat(x0, area) + offsets % w_rep
    py = np.repeat(y0, area) + offsets // w_rep
    return gauss, py * width + px


def rasterize_arrays(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    colors: np.ndarray,
    camera: Camera,
    width: int,
    height: int,
    background: np.ndarray,
) -> tuple[RenderOutput, FragCache]:
    background = np.asarray(background, dtype=float)
    proj = project_gaussians(positions, rotations, scales, camera, width, height)
    gauss, pix = _build_fragments(proj, opacities, width, height)

    color_img = np.tile(background, (height * width, 1))
    depth_img = np.zeros(height * width)
    alpha_img = np.zeros(height * width)

    if gauss.size:
        u = (pix % width).astype(float)
        v = (pix // width).astype(float)
        delta = np.stack([u, v], axis=1) - proj.mean2d[gauss]
        con = proj.conic[gauss]
        quad = (
            con[:, 0, 0] * delta[:, 0] ** 2
            + 2.0 * con[:, 0, 1] * delta[:, 0] * delta[:, 1]
            + con[:, 1, 1] * delta[:, 1] ** 2
        )
        gval = np.exp(-0.5 * quad)
        a = np.minimum(np.asarray(opacities, dtype=float)[gauss] * gval, ALPHA_CLAMP)
        keep = a >= ALPHA_SKIP
        gauss, pix, delta, gval, a = gauss[keep], pix[keep], delta[keep], gval[keep], a[keep]

    if gauss.size == 0:
        empty = np.zeros(0)
        cache = FragCache(
            proj, width, height, background, gauss, pix, np.zeros((0, 2)), empty, empty,
            empty, empty, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), empty, empty,
        )
        return (
            RenderOutput(
                color_img.reshape(height, width, 3), depth_img.reshape(height, width),
                alpha_img.reshape(height, width),
            ),
            cache,
        )

    z = proj.t[gauss, 2]
    order = np.lexsort((gauss, z, pix))
    gauss, pix, delta, gval, a = gauss[order], pix[order], delta[order], gval[order], a[order]
    z = proj.t[gauss, 2]

    # segmented exclusive prefix of log(1 - a) gives the transmittance
    starts = np.concatenate([[0], np.flatnonzero(np.diff(pix)) + 1])
    seg_len = np.diff(np.append(starts, pix.size))
    log1ma = np.log1p(-a)
    csum = np.cumsum(log1ma)
    excl = csum - log1ma
    base = np.repeat(excl[starts], seg_len)
    T = np.exp(excl - base)
    w = a * T

    seg_pix = pix[starts]
    wsum = np.add.reduceat(w, starts)
    dsum = np.add.reduceat(w * z, starts)
    seg_total_log = csum[np.append(starts[1:] - 1, pix.size - 1)] - excl[starts]
    t_end = np.exp(seg_total_log)

    cols = np.asarray(colors, dtype=float)[gauss]
    for c in range(3):
        color_img[seg_pix, c] = np.add.reduceat(w * cols[:, c], starts) + t_end * background[c]
    alpha_img[seg_pix] = 1.0 - t_end
    depth_img[seg_pix] = dsum / np.maximum(wsum, _W_FLOOR)

    cache = FragCache(
        proj, width, height, background, gauss, pix, delta, gval, a, T, w, starts, seg_pix, wsum, dsum
    )
    return (
        RenderOutput(
            color_img.reshape(height, width, 3),
            depth_img.reshape(height, width),
            alpha_img.reshape(height, width),
        ),
        cache,
    )


def rasterize(
    gs: GaussianSet, camera: Camera, width: int, height: int, background: np.ndarray
) -> RenderOutput:
    out, _ = rasterize_arrays(
        gs.positions, gs.rotations, gs.scales, gs.opacities, gs.colors, camera, width, height, background
    )
    return out


def rasterize_backward(
    cache: FragCache,
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    colors: np.ndarray,
    camera: Camera,
    g_color: np.ndarray,
    g_depth: np.ndarray,
    g_alpha: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of the forward compositing.

    g_color/g_depth/g_alpha are upstream gradients of the output images.
    Returns gradients for keys positions, rotations (raw, pre-normalization),
    scales, opacities, colors.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(positions)
    grads = {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "scales": np.zeros((n, 3)),
        "opacities": np.zeros(n),
        "colors": np.zeros((n, 3)),
    }
    if cache.gauss.size == 0:
        return grads
    proj = cache.proj
    gauss, pix = cache.gauss, cache.pix
    starts = cache.starts
    seg_len = np.diff(np.append(starts, pix.size))

    gC = np.asarray(g_color, dtype=float).reshape(-1, 3)[pix]  # (F, 3)
    gD = np.asarray(g_depth, dtype=float).reshape(-1)[cache.seg_pix]  # per segment
    gA = np.asarray(g_alpha, dtype=float).reshape(-1)[cache.seg_pix]

    denom = np.maximum(cache.wsum, _W_FLOOR)
    g_dsum = gD / denom
    g_wsum = np.where(cache.wsum > _W_FLOOR, -gD * cache.dsum / denom**2, 0.0) + gA
    bg_term = np.asarray(g_color, dtype=float).reshape(-1, 3)[cache.seg_pix] @ cache.background
    g_wsum = g_wsum - bg_term

    z = proj.t[gauss, 2]
    cols = np.asarray(colors, dtype=float)[gauss]
    g_w = (
        np.einsum("fc,fc->f", gC, cols)
        + np.repeat(g_dsum, seg_len) * z
        + np.repeat(g_wsum, seg_len)
    )

    # through the compositing recurrence (suffix sums within each segment)
    q = cache.w * g_w
    qsum = np.cumsum(q)
    incl = qsum - np.repeat(qsum[starts] - q[starts], seg_len)
    suffix = np.repeat(np.add.reduceat(q, starts), seg_len) - incl
    one_minus = 1.0 - cache.a
    g_a = cache.T * g_w - np.where(suffix != 0.0, suffix / np.where(one_minus > 0, one_minus, 1.0), 0.0)

    active = cache.a < ALPHA_CLAMP  # clamped fragments pass no gradient
    op_f = np.asarray(opacities, dtype=float)[gauss]
    g_op_f = np.where(active, cache.gval * g_a, 0.0)
    g_gval = np.where(active, op_f * g_a, 0.0)

    # G = exp(-0.5 d^T conic d):  dG/dmean2d = G * conic d,  dG/dcov = 0.5 G (conic d)(conic d)^T
    con = proj.conic[gauss]
    cd = np.einsum("fab,fb->fa", con, cache.delta)
    g_mean2d_f = (g_gval * cache.gval)[:, None] * cd
    outer = cd[:, :, None] * cd[:, None, :]
    g_cov2d_f = 0.5 * (g_gval * cache.gval)[:, None, None] * outer

    # per-kernel accumulation (deterministic bincount in fragment order)
    def acc(values):
        return np.bincount(gauss, weights=values, minlength=n)

    g_colors = np.stack([acc(cache.w * gC[:, c]) for c in range(3)], axis=1)
    g_op = acc(g_op_f)
    g_z_img = acc(cache.w * np.repeat(g_dsum, seg_len))
    g_mean2d = np.stack([acc(g_mean2d_f[:, 0]), acc(g_mean2d_f[:, 1])], axis=1)
    g_cov2d = np.empty((n, 2, 2))
    g_cov2d[:, 0, 0] = acc(g_cov2d_f[:, 0, 0])
    g_cov2d[:, 0, 1] = acc(g_cov2d_f[:, 0, 1])
    g_cov2d[:, 1, 0] = acc(g_cov2d_f[:, 1, 0])
    g_cov2d[:, 1, 1] = acc(g_cov2d_f[:, 1, 1])

    # -- chain through the EWA projection ---------------------------------
    W = camera.rotation
    fx, fy = camera.fx, camera.fy
    t = proj.t
    valid = proj.valid
    inv_z = np.where(valid, 1.0 / np.where(t[:, 2] != 0, t[:, 2], 1.0), 0.0)

    # cov2d = J cov_cam J^T + lowpass I
    J = proj.J
    g_cov_cam = np.einsum("nba,nbc,ncd->nad", J, g_cov2d, J)
    g_J = np.einsum("nab,nbc,ncd->nad", g_cov2d + g_cov2d.transpose(0, 2, 1), J, proj.cov_cam)

    # cov_cam = W cov3 W^T ; cov3 = M M^T ; M = R diag(s)
    g_cov3 = np.einsum("ba,nbc,cd->nad", W, g_cov_cam, W)
    g_M = np.einsum("nab,nbc->nac", g_cov3 + g_cov3.transpose(0, 2, 1), proj.M)
    scl = np.atleast_2d(np.asarray(scales, dtype=float))
    g_scales = np.einsum("nab,nab->nb", proj.R, g_M)
    g_R = g_M * scl[:, None, :]

    dR = quat.to_matrix_jacobian(proj.qn)  # (N, 4, 3, 3)
    g_qn = np.einsum("nqab,nab->nq", dR, g_R)
    Jn = quat.normalize_jacobian(np.atleast_2d(np.asarray(rotations, dtype=float)))
    g_quat = np.einsum("nqp,nq->np", Jn, g_qn)

    # camera-space mean gradient: projection rows, depth image, J(t) terms
    g_t = np.zeros((n, 3))
    g_t[:, 0] += g_mean2d[:, 0] * fx * inv_z
    g_t[:, 1] += g_mean2d[:, 1] * fy * inv_z
    g_t[:, 2] += -(g_mean2d[:, 0] * fx * t[:, 0] + g_mean2d[:, 1] * fy * t[:, 1]) * inv_z**2
    g_t[:, 2] += g_z_img
    g_t[:, 0] += g_J[:, 0, 2] * (-fx * inv_z**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy * inv_z**2)
    g_t[:, 2] += (
        g_J[:, 0, 0] * (-fx * inv_z**2)
        + g_J[:, 0, 2] * (2.0 * fx * t[:, 0] * inv_z**3)
        + g_J[:, 1, 1] * (-fy * inv_z**2)
        + g_J[:, 1, 2] * (2.0 * fy * t[:, 1] * inv_z**3)
    )
    g_pos = g_t @ W

    mask = valid[:, None]
    grads["positions"] = np.where(mask, g_pos, 0.0)
    grads["rotations"] = np.where(valid[:, None], g_quat, 0.0)
    grads["scales"] = np.where(mask, g_scales, 0.0)
    grads["opacities"] = np.where(valid, g_op, 0.0)
    grads["colors"] = np.where(mask, g_colors, 0.0)
    return grads
