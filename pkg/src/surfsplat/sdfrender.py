"""Volume rendering of the SDF + color grids along camera rays.

Per-sample opacity follows the unbiased logistic-CDF weighting: with
Phi_s the sigmoid of sharpness s, alpha_k = max((Phi_s(d_k) -
Phi_s(d_{k+1})) / Phi_s(d_k), 0). The ratio is evaluated in log space so
large |s * d| cannot underflow. The backward pass is hand-derived and
returns gradients with respect to both grids' node values and s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError
from .sdfgrid import ColorGrid, InterpData, SdfGrid

_W_FLOOR = 1e-8  # depth normalization floor


@dataclass
class RenderSettings:
    samples_per_ray: int = 48
    rays_per_batch: int = 1024
    inv_std: float = 20.0
    huber_delta: float = 0.1
    background: np.ndarray = None

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise DataError("samples_per_ray must be >= 2")
        if self.rays_per_batch < 1:
            raise DataError("rays_per_batch must be >= 1")
        if self.inv_std <= 0:
            raise DataError("inv_std must be positive")
        if self.huber_delta <= 0:
            raise DataError("huber_delta must be positive")
        if self.background is None:
            self.background = np.zeros(3)
        self.background = np.asarray(self.background, dtype=float)


@dataclass
class RayRenderCache:
    """Forward-pass intermediates kept for the backward pass."""

    origins: np.ndarray
    dirs: np.ndarray
    hit: np.ndarray
    ts: np.ndarray  # (R, n) sample parameters (hit rays only)
    d: np.ndarray  # (R, n+1) sdf values
    sdf_interp: InterpData  # for all (R*(n+1)) sample points
    color_interp: InterpData  # for the (R*n) color points
    colors: np.ndarray  # (R, n, 3)
    ls: np.ndarray  # (R, n+1) log-sigmoid of s*d
    ratio: np.ndarray  # (R, n)
    alpha: np.ndarray  # (R, n)
    T: np.ndarray  # (R, n) transmittance before each sample
    weights: np.ndarray  # (R, n)
    wsum: np.ndarray  # (R,)
    dsum: np.ndarray  # (R,)
    inv_std: float
    background: np.ndarray


@dataclass
class RayRenderResult:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) ray parameter of the expected surface
    weights: np.ndarray  # (R, n)
    cache: RayRenderCache


def _ray_box_hit(origins, dirs, bbox_min, bbox_max, near, far):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bbox_min - origins) * inv
        t2 = (bbox_max - origins) * inv
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=1)
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=1)
    # axis-parallel rays: inside the slab iff origin is between the planes
    par = dirs == 0.0
    if par.any():
        inside = (origins >= bbox_min) & (origins <= bbox_max)
        bad = (par & ~inside).any(axis=1)
        hi = np.where(bad, -np.inf, hi)
    return (np.maximum(lo, near) <= np.minimum(hi, far)) & (hi >= lo)


def render_rays(
    sdf: SdfGrid,
    color: ColorGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    settings: RenderSettings,
    jitter: np.ndarray | None = None,
) -> RayRenderResult:
    """Render a batch of rays; origins (R,3) or (3,), dirs (R,3) unit.

    jitter, if given, holds per-sample offsets in [0, 1) of shape
    (R, samples_per_ray); None places samples at bin midpoints.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    R = dirs.shape[0]
    origins = np.broadcast_to(np.asarray(origins, dtype=float), (R, 3))
    n = settings.samples_per_ray
    s = float(settings.inv_std)
    bg = settings.background

    hit = _ray_box_hit(origins, dirs, sdf.bbox_min, sdf.bbox_max, near, far)
    out_color = np.tile(bg, (R, 1))
    out_depth = np.full(R, far)
    out_weights = np.zeros((R, n))
    if not hit.any():
        cache = RayRenderCache(
            origins, dirs, hit, np.zeros((0, n)), np.zeros((0, n + 1)), None, None,
            np.zeros((0, n, 3)), np.zeros((0, n + 1)), np.zeros((0, n)), np.zeros((0, n)),
            np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0), s, bg,
        )
        return RayRenderResult(out_color, out_depth, out_weights, cache)

    o = origins[hit]
    dvec = dirs[hit]
    Rh = o.shape[0]
    h = (far - near) / n
    if jitter is None:
        jit = np.full((Rh, n), 0.5)
    else:
        jit = np.asarray(jitter, dtype=float)[hit]
    ts = near + (np.arange(n)[None, :] + jit) * h  # (Rh, n)
    t_all = np.concatenate([ts, ts[:, -1:] + h], axis=1)  # (Rh, n+1)

    pts = o[:, None, :] + t_all[:, :, None] * dvec[:, None, :]
    sdf_it = sdf.interp(pts.reshape(-1, 3))
    d = (sdf.values.reshape(-1)[sdf_it.idx] * sdf_it.w).sum(axis=1) + sdf_it.dist
    d = d.reshape(Rh, n + 1)

    cpts = pts[:, :n, :].reshape(-1, 3)
    color_it = color.interp(cpts)
    cols = np.einsum("nk,nkc->nc", color_it.w, color.values.reshape(-1, 3)[color_it.idx])
    cols = cols.reshape(Rh, n, 3)

    ls = -np.logaddexp(0.0, -s * d)  # log sigmoid(s * d)
    ratio = np.exp(ls[:, 1:] - ls[:, :-1])
    alpha = np.maximum(1.0 - ratio, 0.0)
    one_minus = 1.0 - alpha
    T = np.cumprod(np.concatenate([np.ones((Rh, 1)), one_minus[:, :-1]], axis=1), axis=1)
    w = alpha * T
    wsum = w.sum(axis=1)
    dsum = (w * ts).sum(axis=1)

    out_color[hit] = (w[:, :, None] * cols).sum(axis=1) + (1.0 - wsum)[:, None] * bg
    out_depth[hit] = dsum / np.maximum(wsum, _W_FLOOR)
    out_weights[hit] = w

    cache = RayRenderCache(
        origins, dirs, hit, ts, d, sdf_it, color_it, cols, ls, ratio, alpha, T, w,
        wsum, dsum, s, bg,
    )
    return RayRenderResult(out_color, out_depth, out_weights, cache)


def render_ray(sdf, color, origin, direction, near, far, settings):
    """Single-ray convenience wrapper: returns (color, depth, weights)."""
    res = render_rays(sdf, color, origin, np.asarray(direction)[None, :], near, far, settings)
    return res.color[0], res.depth[0], res.weights[0]


def render_backward(
    sdf: SdfGrid,
    color: ColorGrid,
    cache: RayRenderCache,
    g_color: np.ndarray,
    g_depth: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of sum(g_color * C) + sum(g_depth * D) from a forward cache.

    Returns (d/d sdf values flat, d/d color values flat, d/d inv_std).
    """
    n_sdf = sdf.values.size
    n_col = color.values.reshape(-1, 3).shape[0]
    g_sdf = np.zeros(n_sdf)
    g_col = np.zeros((n_col, 3))
    g_s = 0.0
    hit = cache.hit
    if cache.ts.shape[0] == 0:
        return g_sdf, g_col.reshape(-1), g_s

    gC = np.asarray(g_color, dtype=float)[hit]
    gD = np.asarray(g_depth, dtype=float)[hit]
    Rh, n = cache.ts.shape
    s = cache.inv_std

    denom = np.maximum(cache.wsum, _W_FLOOR)
    g_dsum = gD / denom
    g_wsum_depth = np.where(cache.wsum > _W_FLOOR, -gD * cache.dsum / denom**2, 0.0)
    # dL/dw_k = gC . c_k + (gD/denom) t_k + dL/dW; the total-weight term
    # collects the depth normalization and the (1 - W) background factor.
    g_wsum = g_wsum_depth - gC @ cache.background
    g_w = np.einsum("rc,rnc->rn", gC, cache.colors) + g_dsum[:, None] * cache.ts + g_wsum[:, None]

    # color grid gradient: dL/dc_k = w_k * gC
    g_ck = cache.weights[:, :, None] * gC[:, None, :]  # (Rh, n, 3)
    flat_gc = g_ck.reshape(-1, 3)
    it = cache.color_interp
    for c in range(3):
        contrib = it.w * flat_gc[:, c : c + 1]
        g_col[:, c] += np.bincount(it.idx.reshape(-1), weights=contrib.reshape(-1), minlength=n_col)

    # alpha gradients through the compositing recurrence
    q = cache.weights * g_w
    suffix = q[:, ::-1].cumsum(axis=1)[:, ::-1] - q  # sum over j > k
    one_minus = 1.0 - cache.alpha
    safe = np.where(one_minus > 0.0, one_minus, 1.0)
    g_alpha = cache.T * g_w - np.where(suffix != 0.0, suffix / safe, 0.0)

    # alpha = 1 - exp(ls_{k+1} - ls_k), inactive (clamped) samples get no flow
    g_ls = np.zeros((Rh, n + 1))
    r_term = np.where(cache.alpha > 0.0, cache.ratio * g_alpha, 0.0)
    g_ls[:, :-1] += r_term
    g_ls[:, 1:] -= r_term

    # ls = log sigmoid(s * d): d ls / dd = s * sigmoid(-s d), d ls / ds = d * sigmoid(-s d)
    sig_neg = expit(-s * cache.d)
    g_d = g_ls * s * sig_neg
    g_s = float((g_ls * cache.d * sig_neg).sum())

    sit = cache.sdf_interp
    contrib = sit.w * g_d.reshape(-1, 1)
    g_sdf += np.bincount(sit.idx.reshape(-1), weights=contrib.reshape(-1), minlength=n_sdf)
    return g_sdf, g_col.reshape(-1), g_s


# -- losses -----------------------------------------------------------------


def huber(a, b, delta: float):
    """Robust residual penalty: quadratic within delta, linear outside."""
    r = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    ar = np.abs(r)
    return np.where(ar <= delta, 0.5 * r * r, delta * (ar - 0.5 * delta))


def huber_grad(a, b, delta: float):
    """d huber(a, b, delta) / da."""
    r = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.where(np.abs(r) <= delta, r, delta * np.sign(r))


def color_depth_losses(
    pred_color: np.ndarray,
    gt_color: np.ndarray,
    pred_depth: np.ndarray,
    gt_depth: np.ndarray,
    delta_color: float,
    delta_depth: float,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Masked-batch Huber means; returns (L_color, L_depth, dL/dC, dL/dD)."""
    pred_color = np.atleast_2d(pred_color)
    m = pred_color.shape[0]
    if m == 0:
        raise DataError("color/depth loss on an empty ray batch")
    l_color = float(huber(pred_color, gt_color, delta_color).sum() / m)
    l_depth = float(huber(pred_depth, gt_depth, delta_depth).sum() / m)
    g_color = huber_grad(pred_color, gt_color, delta_color) / m
    g_depth = huber_grad(pred_depth, gt_depth, delta_depth) / m
    return l_color, l_depth, g_color, g_depth


def eikonal_loss(sdf: SdfGrid, points: np.ndarray) -> float:
    return eikonal_loss_and_grad(sdf, points)[0]


def eikonal_loss_and_grad(sdf: SdfGrid, points: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean (||grad sdf|| - 1)^2 over points, plus gradient w.r.t. node values."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise DataError("eikonal loss needs at least one sample point")
    it = sdf.interp(points)
    flat = sdf.values.reshape(-1)
    normals = np.einsum("nk,nka->na", flat[it.idx], it.gw) + it.ext
    norms = np.linalg.norm(normals, axis=1)
    loss = float(((norms - 1.0) ** 2).mean())
    M = points.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        g_n = np.where(
            norms[:, None] > 0.0,
            (2.0 / M) * (norms - 1.0)[:, None] * normals / np.where(norms > 0, norms, 1.0)[:, None],
            0.0,
        )
    contrib = np.einsum("nka,na->nk", it.gw, g_n)
    grad = np.bincount(it.idx.reshape(-1), weights=contrib.reshape(-1), minlength=flat.size)
    return loss, grad


def mesh_total_loss(l_color: float, l_depth: float, l_eikonal: float, alpha1: float, alpha2: float) -> float:
    return l_color + alpha1 * l_depth + alpha2 * l_eikonal
