"""Unit-quaternion algebra in (w, x, y, z) order, vectorized over leading axes.

All functions accept arrays of shape (..., 4) and broadcast. Rotation
matrices use the convention R(q) @ v = rotate(q, v) for unit q.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is >= 0.

    Exact-zero leading components fall through to the next component, so
    the map is deterministic and idempotent for every input.
    """
    q = np.asarray(q, dtype=float)
    sign = np.zeros(q.shape[:-1])
    for c in range(4):
        comp = q[..., c]
        sign = np.where(sign == 0.0, np.sign(comp), sign)
    sign = np.where(sign == 0.0, 1.0, sign)
    return q * sign[..., None]


def conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def right_mult_matrix(p: np.ndarray) -> np.ndarray:
    """Matrix M(p) with multiply(q, p) == M(p) @ q, shape (..., 4, 4)."""
    p = np.asarray(p, dtype=float)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rows = [
        np.stack([pw, -px, -py, -pz], axis=-1),
        np.stack([px, pw, pz, -py], axis=-1),
        np.stack([py, -pz, pw, px], axis=-1),
        np.stack([pz, py, -px, pw], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def to_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """Partials dR/dq of to_matrix at a unit quaternion, shape (..., 4, 3, 3).

    Differentiates the polynomial formula itself; callers composing with a
    normalization must chain normalize_jacobian separately.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    o = np.zeros_like(w)

    def mat(r0, r1, r2):
        return np.stack([np.stack(r0, axis=-1), np.stack(r1, axis=-1), np.stack(r2, axis=-1)], axis=-2)

    dw = 2 * mat([o, -z, y], [z, o, -x], [-y, x, o])
    dx = 2 * mat([o, y, z], [y, -2 * x, -w], [z, w, -2 * x])
    dy = 2 * mat([-2 * y, x, w], [x, o, z], [-w, z, -2 * y])
    dz = 2 * mat([-2 * z, -w, x], [w, -2 * z, y], [x, y, o])
    return np.stack([dw, dx, dy, dz], axis=-3)


def normalize_jacobian(q: np.ndarray) -> np.ndarray:
    """Jacobian d(q/||q||)/dq, shape (..., 4, 4)."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    eye = np.broadcast_to(np.eye(4), q.shape[:-1] + (4, 4))
    return (eye - u[..., :, None] * u[..., None, :]) / n[..., None]


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def from_matrix(R: np.ndarray) -> np.ndarray:
    """Canonical unit quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    Rb = R[None] if single else R.reshape(-1, 3, 3)
    out = np.empty((Rb.shape[0], 4))
    for i, m in enumerate(Rb):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
        out[i] = q
    out = canonical(normalize(out))
    return out[0] if single else out.reshape(R.shape[:-2] + (4,))
