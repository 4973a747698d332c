"""Stage 3: per-frame semi-rigid deformation of the bound kernel set.

Each frame optimizes kernel positions and rotations only (scale, opacity,
color stay frozen at their stage-2 values) under the rendering losses
plus three regularizers: a local ARAP term around tracked keypoints
(best-fit rotation per kernel via SVD, held constant under
differentiation), a rotation-consistency term tying neighboring kernels'
frame-to-frame rotation deltas together over the short horizon, and an
isometry term preserving rest distances to frame 0 over the long horizon.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import quaternion as quat
from .dataset import FrameData
from .errors import DataError, DivergenceError
from .gaussians import GaussianSet, load_ply, save_ply
from .neighbors import NeighborGraph
from .optim import AdamState, adam_step
from .surface import masked_image_losses, masked_psnr
from .splat import rasterize_arrays, rasterize_backward
from .tracks import RegionAssignment, SparseTrackSet

log = logging.getLogger(__name__)


@dataclass
class DeformationState:
    frame: int
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit, canonical sign

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.rotations = quat.canonical(quat.normalize(self.rotations))


# -- rigid fit ----------------------------------------------------------------


def estimate_rotation(cur: np.ndarray, prev: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Best rotation R minimizing sum_k w_k ||cur_k - R prev_k||^2.

    Solved by SVD of the weighted cross-covariance; the smallest singular
    direction is flipped when needed so det(R) = +1.
    """
    R = estimate_rotations(cur[None], prev[None], np.atleast_2d(weights))[0]
    return R


def estimate_rotations(cur: np.ndarray, prev: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Batched rigid fits: cur/prev (B, K, 3), weights (B, K) -> (B, 3, 3)."""
    A = np.einsum("bk,bka,bkc->bac", weights, cur, prev)
    norms = np.linalg.norm(A, axis=(1, 2))
    degenerate = norms < 1e-300
    A = np.where(degenerate[:, None, None], np.eye(3), A)
    U, _, Vt = np.linalg.svd(A)
    det = np.linalg.det(U @ Vt)
    D = np.tile(np.eye(3), (len(A), 1, 1))
    D[:, 2, 2] = det
    R = U @ D @ Vt
    R[degenerate] = np.eye(3)
    return R


# -- regularizers -------------------------------------------------------------


def arap_weights(rest_positions: np.ndarray, anchors0: np.ndarray, sigma_w: float) -> np.ndarray:
    """Radial-basis kernel/keypoint weights, normalized to sum 1 per kernel."""
    d2 = ((rest_positions[:, None, :] - anchors0[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2.0 * sigma_w * sigma_w))
    w = np.maximum(w, 1e-300)  # keep weights strictly positive
    return w / w.sum(axis=1, keepdims=True)


def arap_loss(
    pos_t: np.ndarray,
    pos_prev: np.ndarray,
    in_region: np.ndarray,
    anchors_t: np.ndarray,
    anchors_prev: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Local-rigidity energy and its gradient with respect to pos_t.

    weights has one row per kernel in the region (matching in_region's
    true entries). Each kernel's best-fit rotation is recomputed here and
    treated as constant under differentiation.
    """
    grad = np.zeros_like(pos_t)
    sel = np.flatnonzero(in_region)
    n_kp = len(anchors_t)
    if sel.size == 0 or n_kp == 0:
        log.warning("arap_loss: empty region or keypoint set; loss inactive")
        return 0.0, grad
    P = pos_t[sel][:, None, :] - anchors_t[None, :, :]  # (S, K, 3)
    Q = pos_prev[sel][:, None, :] - anchors_prev[None, :, :]
    R = estimate_rotations(P, Q, weights)
    resid = P - np.einsum("bac,bkc->bka", R, Q)
    terms = weights * (resid**2).sum(axis=2)
    scale = 1.0 / (n_kp * sel.size)
    loss = float(terms.sum() * scale)
    grad[sel] = 2.0 * scale * np.einsum("bk,bka->ba", weights, resid)
    return loss, grad


def rot_loss(
    rot_t_raw: np.ndarray, rot_prev: np.ndarray, graph: NeighborGraph
) -> tuple[float, np.ndarray]:
    """Neighborhood rotation-consistency energy; gradient w.r.t. raw rot_t.

    Compares sign-canonicalized frame-to-frame quaternion deltas
    delta_i = canonical(q_t,i * q_prev,i^-1) between graph neighbors with
    the plain 4-vector 2-norm.
    """
    n = len(rot_t_raw)
    qn = quat.normalize(rot_t_raw)
    p = quat.conjugate(rot_prev)  # unit inverse
    delta = quat.multiply(qn, p)
    sign = np.zeros(n)
    for c in range(4):
        comp = delta[:, c]
        sign = np.where(sign == 0.0, np.sign(comp), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    dhat = delta * sign[:, None]

    src, dst, _ = graph.pairs()
    scale = 1.0 / (graph.r * n)
    if src.size == 0:
        return 0.0, np.zeros_like(rot_t_raw)
    u = dhat[dst] - dhat[src]
    norms = np.linalg.norm(u, axis=1)
    loss = float(norms.sum() * scale)

    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norms[:, None] > 0, u / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    g_dhat = np.zeros((n, 4))
    for c in range(4):
        g_dhat[:, c] = scale * (
            np.bincount(dst, weights=unit[:, c], minlength=n)
            - np.bincount(src, weights=unit[:, c], minlength=n)
        )
    # chain: dhat = sign * (qn x p); right-multiplication is linear in qn
    M = quat.right_mult_matrix(p)  # (N, 4, 4)
    g_qn = sign[:, None] * np.einsum("nqp,nq->np", M, g_dhat)
    Jn = quat.normalize_jacobian(rot_t_raw)
    return loss, np.einsum("nqp,nq->np", Jn, g_qn)


def iso_loss(
    pos_t: np.ndarray, pos_0: np.ndarray, graph: NeighborGraph
) -> tuple[float, np.ndarray]:
    """Rest-distance preservation energy; gradient w.r.t. pos_t."""
    n = len(pos_t)
    src, dst, w = graph.pairs()
    grad = np.zeros_like(pos_t)
    if src.size == 0:
        return 0.0, grad
    scale = 1.0 / (graph.r * n)
    e0 = pos_0[dst] - pos_0[src]
    et = pos_t[dst] - pos_t[src]
    d0 = np.linalg.norm(e0, axis=1)
    dt = np.linalg.norm(et, axis=1)
    loss = float((w * np.abs(d0 - dt)).sum() * scale)
    s = np.where(dt > 0, np.sign(dt - d0) * w * scale, 0.0)
    dir_t = np.where(dt[:, None] > 0, et / np.where(dt > 0, dt, 1.0)[:, None], 0.0)
    contrib = s[:, None] * dir_t
    for a in range(3):
        grad[:, a] += np.bincount(dst, weights=contrib[:, a], minlength=n)
        grad[:, a] -= np.bincount(src, weights=contrib[:, a], minlength=n)
    return loss, grad


def deform_total_loss(
    l_color: float, l_depth: float, l_arap: float, l_rot: float, l_iso: float,
    lambda1: float, lambda2: float, lambda3: float, lambda4: float,
) -> float:
    return l_color + lambda1 * l_depth + lambda2 * l_arap + lambda3 * l_rot + lambda4 * l_iso


# -- per-frame optimization ---------------------------------------------------


@dataclass
class DeformConfig:
    iters: int = 300
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.05
    lambda4: float = 0.02
    rho: float = 0.1  # region radius, scene units (pipeline ties it to mesh scale)
    huber_delta_color: float = 0.1
    huber_delta_depth: float = 0.01
    lr_position_frac: float = 1.6e-4  # times the scene extent
    lr_rotation: float = 1e-3
    background: tuple = (0.0, 0.0, 0.0)
    log_every: int = 0


def frame_anchor_sets(
    tracks: SparseTrackSet, regions: RegionAssignment, t: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keypoints usable at frame t: observed at t, t-1 and at frame 0.

    Returns (keypoint ids, anchors at t, anchors at t-1). Unobserved
    keypoints are dropped for this frame.
    """
    ids = [
        int(k)
        for k in regions.keypoint_ids
        if t in tracks.tracks[k] and (t - 1) in tracks.tracks[k]
    ]
    a_t = tracks.keypoints_at(t, ids)
    a_prev = tracks.keypoints_at(t - 1, ids)
    return np.asarray(ids, dtype=np.int64), a_t, a_prev


def optimize_frame(
    t: int,
    prev_state: DeformationState,
    state0: DeformationState,
    frozen: GaussianSet,
    frame_t: FrameData,
    tracks: SparseTrackSet,
    graph: NeighborGraph,
    regions: RegionAssignment,
    config: DeformConfig,
) -> tuple[DeformationState, dict]:
    """Warm-start from frame t-1 and minimize the deformation loss."""
    if t < 1:
        raise DataError("deformation starts at frame 1")
    n = len(frozen)
    h, w = frame_t.height, frame_t.width
    cam = frame_t.camera
    bg = np.asarray(config.background, dtype=float)

    ids, anchors_t, anchors_prev = frame_anchor_sets(tracks, regions, t)
    sel = np.flatnonzero(regions.in_region)
    have_arap = len(ids) > 0 and sel.size > 0 and config.lambda2 > 0
    if have_arap:
        sigma_w = regions.rho / 2.0
        anchors0 = tracks.keypoints_at(0, ids)
        weights = arap_weights(state0.positions[sel], anchors0, sigma_w)
    elif config.lambda2 > 0:
        log.warning("frame %d: no usable keypoints; ARAP term skipped", t)

    extent = float(np.linalg.norm(state0.positions.max(axis=0) - state0.positions.min(axis=0))) or 1.0
    pos = prev_state.positions.copy()
    rot = prev_state.rotations.copy()
    st_pos = AdamState.fresh("positions", pos.size, config.lr_position_frac * extent)
    st_rot = AdamState.fresh("rotations", rot.size, config.lr_rotation)

    history = []
    for it in range(config.iters):
        out, cache = rasterize_arrays(
            pos, rot, frozen.scales, frozen.opacities, frozen.colors, cam, w, h, bg
        )
        l_color, l_depth, gC, gD = masked_image_losses(
            out.color, out.depth, frame_t, config.huber_delta_color, config.huber_delta_depth
        )
        if have_arap:
            l_arap, g_arap = arap_loss(
                pos, prev_state.positions, regions.in_region, anchors_t, anchors_prev, weights
            )
        else:
            l_arap, g_arap = 0.0, np.zeros_like(pos)
        l_rot, g_rot = rot_loss(rot, prev_state.rotations, graph) if config.lambda3 > 0 else (0.0, np.zeros_like(rot))
        l_iso, g_iso = iso_loss(pos, state0.positions, graph) if config.lambda4 > 0 else (0.0, np.zeros_like(pos))
        loss = deform_total_loss(
            l_color, l_depth, l_arap, l_rot, l_iso,
            config.lambda1, config.lambda2, config.lambda3, config.lambda4,
        )
        if not np.isfinite(loss):
            raise DivergenceError(f"deform frame {t}", it)
        history.append(loss)

        grads = rasterize_backward(
            cache, pos, rot, frozen.scales, frozen.opacities, frozen.colors, cam,
            gC, config.lambda1 * gD, np.zeros((h, w)),
        )
        g_pos = grads["positions"] + config.lambda2 * g_arap + config.lambda4 * g_iso
        g_rot_total = grads["rotations"] + config.lambda3 * g_rot

        pos_f, st_pos = adam_step(pos.ravel(), g_pos.ravel(), st_pos)
        rot_f, st_rot = adam_step(rot.ravel(), g_rot_total.ravel(), st_rot)
        pos, rot = pos_f.reshape(n, 3), rot_f.reshape(n, 4)

        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("deform t=%d iter %d: loss %.6f", t, it + 1, loss)

    state = DeformationState(frame=t, positions=pos, rotations=rot)
    out, _ = rasterize_arrays(
        state.positions, state.rotations, frozen.scales, frozen.opacities, frozen.colors, cam, w, h, bg
    )
    metrics = {"psnr": masked_psnr(out.color, frame_t), "final_loss": history[-1] if history else None}
    return state, metrics


# -- checkpoints --------------------------------------------------------------


def save_state_ply(path, state: DeformationState, frozen: GaussianSet) -> None:
    gs = GaussianSet.from_raw(
        state.positions, state.rotations, frozen.scales, frozen.opacities, frozen.colors
    )
    save_ply(path, gs, comments=[f"frame {state.frame}"])


def load_state_ply(path) -> tuple[GaussianSet, int | None]:
    gs, comments = load_ply(path)
    frame = None
    for c in comments:
        parts = c.split()
        if len(parts) == 2 and parts[0] == "frame":
            frame = int(parts[1])
    return gs, frame
