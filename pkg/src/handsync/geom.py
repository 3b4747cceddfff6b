"""Rotation and rigid-transform kernel.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and canonicalized to
the ``w >= 0`` hemisphere. Rotation matrices are plain ``(..., 3, 3)``
arrays. Every function broadcasts over leading axes unless noted.

Twists are 6-vectors ordered ``(rho, phi)``: translational part first,
rotational part second.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


def hat(v):
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)],
        axis=-2,
    )


def vee(W):
    W = np.asarray(W, dtype=float)
    return 0.5 * np.stack(
        [W[..., 2, 1] - W[..., 1, 2], W[..., 0, 2] - W[..., 2, 0], W[..., 1, 0] - W[..., 0, 1]],
        axis=-1,
    )


def rot_z(theta):
    """Rotation about z; first row is ``(cos, -sin, 0)``."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    o, i = np.zeros_like(theta), np.ones_like(theta)
    return np.stack(
        [np.stack([c, -s, o], -1), np.stack([s, c, o], -1), np.stack([o, o, i], -1)], axis=-2
    )


def rot_x(alpha):
    alpha = np.asarray(alpha, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    o, i = np.zeros_like(alpha), np.ones_like(alpha)
    return np.stack(
        [np.stack([i, o, o], -1), np.stack([o, c, -s], -1), np.stack([o, s, c], -1)], axis=-2
    )


def orthonormality_error(R):
    """Max-abs deviation of ``R^T R`` from identity and of ``det R`` from one."""
    R = np.asarray(R, dtype=float)
    RtR = np.swapaxes(R, -1, -2) @ R
    ortho = np.abs(RtR - np.eye(3)).max(axis=(-1, -2))
    return np.maximum(ortho, np.abs(np.linalg.det(R) - 1.0))


def check_rotation(R, name="R", tol=ORTHO_TOL):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"{name} must have trailing shape (3, 3), got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError(f"{name} contains non-finite entries")
    err = orthonormality_error(R)
    if np.any(err > tol):
        raise ValueError(f"{name} is not a rotation matrix (orthonormality error {np.max(err):.3g})")
    return R


def project_to_so3(M):
    """Nearest rotation in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(U.shape[:-1])
    D[..., -1] = d
    return (U * D[..., None, :]) @ Vt


def chordal_mean(Rs, axis=0):
    """Chordal L2 mean of rotations stacked along ``axis``."""
    return project_to_so3(np.mean(np.asarray(Rs, dtype=float), axis=axis))


# ---------------------------------------------------------------- quaternions


def canonicalize(q):
    """Flip quaternions into the ``w >= 0`` hemisphere.

    Ties at ``w == 0`` are broken by making the first nonzero vector component
    positive, so the canonical form is unique.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    lead = np.where(x != 0, x, np.where(y != 0, y, z))
    flip = (w < 0) | ((w == 0) & (lead < 0))
    return np.where(flip[..., None], -q, q)


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return canonicalize(q / n)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.stack(
        [
            np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], -1),
            np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], -1),
            np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], -1),
        ],
        axis=-2,
    )


def matrix_to_quat(R, check=True):
    """Shepperd's method: pivot on the largest of trace and diagonal entries."""
    R = np.asarray(R, dtype=float)
    if check:
        check_rotation(R)
    r00, r11, r22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = r00 + r11 + r22
    pivot = np.argmax(np.stack([tr, r00, r11, r22], -1), axis=-1)

    d21 = R[..., 2, 1] - R[..., 1, 2]
    d02 = R[..., 0, 2] - R[..., 2, 0]
    d10 = R[..., 1, 0] - R[..., 0, 1]
    s01 = R[..., 0, 1] + R[..., 1, 0]
    s02 = R[..., 0, 2] + R[..., 2, 0]
    s12 = R[..., 1, 2] + R[..., 2, 1]

    with np.errstate(invalid="ignore", divide="ignore"):
        a = 0.5 * np.sqrt(np.maximum(1.0 + tr, 0.0))
        c0 = np.stack([a, d21 / (4 * a), d02 / (4 * a), d10 / (4 * a)], -1)
        a = 0.5 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 0.0))
        c1 = np.stack([d21 / (4 * a), a, s01 / (4 * a), s02 / (4 * a)], -1)
        a = 0.5 * np.sqrt(np.maximum(1.0 - r00 + r11 - r22, 0.0))
        c2 = np.stack([d02 / (4 * a), s01 / (4 * a), a, s12 / (4 * a)], -1)
        a = 0.5 * np.sqrt(np.maximum(1.0 - r00 - r11 + r22, 0.0))
        c3 = np.stack([d10 / (4 * a), s02 / (4 * a), s12 / (4 * a), a], -1)

    cands = np.stack([c0, c1, c2, c3], axis=-2)
    q = np.take_along_axis(cands, pivot[..., None, None], axis=-2)[..., 0, :]
    return normalize_quat(q)


def quat_exp(v):
    """Rotation vector to unit quaternion."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    # sin(theta/2)/theta, accurate at theta -> 0
    k = 0.5 * np.sinc(theta / (2 * np.pi))
    return np.concatenate([np.cos(0.5 * theta)[..., None], v * k[..., None]], axis=-1)


def quat_log(q):
    """Unit quaternion to rotation vector with norm in ``[0, pi]``."""
    q = canonicalize(q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(n, w)
    safe = np.where(n > 0, n, 1.0)
    scale = np.where(n > 0, angle / safe, 2.0 / np.where(w > 0, w, 1.0))
    return v * scale[..., None]


def exp_so3(v):
    return quat_to_matrix(quat_exp(v))


def log_so3(R):
    """Rotation vector of ``R``.

    Goes through Shepperd's largest-pivot quaternion extraction, which keeps
    the axis well conditioned as the angle approaches pi.
    """
    return quat_log(matrix_to_quat(R, check=False))


def slerp(q0, q1, t):
    """Shortest-arc spherical interpolation, broadcasting over ``t``."""
    q0 = canonicalize(q0)
    q1 = np.asarray(q1, dtype=float)
    t = np.asarray(t, dtype=float)
    dot = np.sum(q0 * q1, axis=-1)
    q1 = np.where((dot < 0)[..., None], -q1, q1)
    delta = quat_multiply(quat_conjugate(q0), q1)
    dv = delta[..., 1:]
    half = np.arctan2(np.linalg.norm(dv, axis=-1), delta[..., 0])
    # sin(t*h)/sin(h) written with sinc so h -> 0 stays exact
    ratio = t * np.sinc(t * half / np.pi) / np.sinc(half / np.pi)
    delta_t = np.concatenate([np.cos(t * half)[..., None], dv * ratio[..., None]], axis=-1)
    out = quat_multiply(q0, delta_t)
    out = np.where((t == 0)[..., None], q0, out)
    out = np.where((t == 1)[..., None], q1, out)
    return canonicalize(out)


def geodesic_distance(Ra, Rb):
    """Rotation angle of ``Ra^T Rb``, in radians."""
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    return np.linalg.norm(log_so3(np.swapaxes(Ra, -1, -2) @ Rb), axis=-1)


def quat_distance(qa, qb):
    """Geodesic angle between quaternion orientations."""
    d = np.abs(np.sum(np.asarray(qa) * np.asarray(qb), axis=-1))
    cross = np.linalg.norm(quat_multiply(quat_conjugate(qa), qb)[..., 1:], axis=-1)
    return 2.0 * np.arctan2(cross, d)


# ----------------------------------------------------------------------- SE(3)

_SMALL = 1e-3


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)[..., None, None]
    P = hat(phi)
    small = th < _SMALL
    ts = np.where(small, 1.0, th)
    a = np.where(small, 0.5 - th**2 / 24, (1 - np.cos(ts)) / ts**2)
    b = np.where(small, 1.0 / 6 - th**2 / 120, (ts - np.sin(ts)) / ts**3)
    return np.eye(3) + a * P + b * (P @ P)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)[..., None, None]
    P = hat(phi)
    small = th < _SMALL
    ts = np.where(small, 1.0, th)
    c = np.where(
        small,
        1.0 / 12 + th**2 / 720,
        1.0 / ts**2 - (1 + np.cos(ts)) / (2 * ts * np.sin(ts)),
    )
    return np.eye(3) - 0.5 * P + c * (P @ P)


def _se3_q(rho, phi):
    """Coupling block of the SE(3) left Jacobian."""
    th = np.linalg.norm(phi, axis=-1)[..., None, None]
    Rh, Ph = hat(rho), hat(phi)
    small = th < _SMALL
    ts = np.where(small, 1.0, th)
    c1 = np.where(small, 1.0 / 6 - th**2 / 120, (ts - np.sin(ts)) / ts**3)
    c2 = np.where(small, 1.0 / 24 - th**2 / 720, (ts**2 + 2 * np.cos(ts) - 2) / (2 * ts**4))
    c3 = np.where(
        small, 1.0 / 120 - th**2 / 2520, (2 * ts - 3 * np.sin(ts) + ts * np.cos(ts)) / (2 * ts**5)
    )
    PR = Ph @ Rh
    RP = Rh @ Ph
    PRP = PR @ Ph
    PP = Ph @ Ph
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (PP @ Rh + RP @ Ph - 3 * PRP)
        + c3 * (PRP @ Ph + PP @ RP)
    )


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., :3, 3:] = -Jinv @ Q @ Jinv
    return out


def exp_se3(xi):
    """Twist ``(rho, phi)`` to a 4x4 homogeneous transform."""
    xi = np.asarray(xi, dtype=float)
    T = np.zeros(xi.shape[:-1] + (4, 4))
    T[..., :3, :3] = exp_so3(xi[..., 3:])
    T[..., :3, 3] = (so3_left_jacobian(xi[..., 3:]) @ xi[..., :3, None])[..., 0]
    T[..., 3, 3] = 1.0
    return T


def log_se3(T):
    T = np.asarray(T, dtype=float)
    phi = log_so3(T[..., :3, :3])
    rho = (so3_left_jacobian_inv(phi) @ T[..., :3, 3, None])[..., 0]
    return np.concatenate([rho, phi], axis=-1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a rotation matrix and a translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        p = np.array(self.translation, dtype=float).reshape(3)
        check_rotation(R, "Pose.rotation")
        if not np.all(np.isfinite(p)):
            raise ValueError("Pose.translation must be finite")
        R.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", p)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(
                self.rotation @ other.rotation,
                self.rotation @ other.translation + self.translation,
            )
        return NotImplemented

    def act(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"
