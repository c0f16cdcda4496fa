"""Rotations, point-set alignment and pinhole projection.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` for point
sets).  Rotations are stored as unit quaternions in ``(w, x, y, z)`` order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateInput

_EPS = 1e-9


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


class Rotation:
    """A 3D rotation held as a unit quaternion ``(w, x, y, z)``."""

    __slots__ = ("_q",)

    def __init__(self, quat):
        q = np.asarray(quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise DegenerateInput(f"cannot build a rotation from quaternion {q}")
        q = q / n
        if q[0] < 0.0:
            q = -q
        self._q = q

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_quat(cls, quat) -> "Rotation":
        return cls(quat)

    @classmethod
    def from_axis_angle(cls, rotvec) -> "Rotation":
        v = np.asarray(rotvec, dtype=float).reshape(3)
        angle = np.linalg.norm(v)
        if angle < 1e-12:
            return cls(np.concatenate(([1.0], 0.5 * v)))
        half = 0.5 * angle
        return cls(np.concatenate(([np.cos(half)], np.sin(half) / angle * v)))

    @classmethod
    def from_matrix(cls, matrix) -> "Rotation":
        m = np.asarray(matrix, dtype=float).reshape(3, 3)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        # Shepperd: branch on the largest of (trace, diagonal) for stability
        if tr > max(m[0, 0], m[1, 1], m[2, 2]):
            s = 2.0 * np.sqrt(1.0 + tr)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = 2.0 * np.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] >= m[2, 2]:
            s = 2.0 * np.sqrt(max(1.0 + m[1, 1] - m[0, 0] - m[2, 2], 0.0))
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(max(1.0 + m[2, 2] - m[0, 0] - m[1, 1], 0.0))
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(q)

    @property
    def quat(self) -> np.ndarray:
        return self._q.copy()

    def as_axis_angle(self) -> np.ndarray:
        w, xyz = self._q[0], self._q[1:]
        n = np.linalg.norm(xyz)
        if n < 1e-12:
            return 2.0 * xyz / w
        return xyz / n * (2.0 * np.arctan2(n, w))

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    @property
    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self._q[1:]), self._q[0]))

    def apply(self, v) -> np.ndarray:
        """Rotate a vector ``(3,)`` or a stack of vectors ``(N, 3)``."""
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def __mul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(_quat_mul(self._q, other._q))

    def __repr__(self) -> str:
        return f"Rotation(axis_angle={np.array2string(self.as_axis_angle(), precision=6)})"


def compose(a: Rotation, b: Rotation) -> Rotation:
    """Rotation acting as ``b`` first, then ``a`` (matrix product ``A @ B``)."""
    return a * b


def inverse(r: Rotation) -> Rotation:
    return r.inverse()


def geodesic_angle(a: Rotation, b: Rotation) -> float:
    """Angle in radians of the relative rotation between ``a`` and ``b``."""
    rel = _quat_mul(a.inverse().quat, b.quat)
    # atan2 keeps full precision for nearly equal rotations, unlike arccos
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def _unit(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not n > _EPS:
        raise DegenerateInput(f"{name} has near-zero norm ({n:.3g})")
    return v / n


def perpendicular_axis(v) -> np.ndarray:
    """Deterministic unit vector orthogonal to ``v``.

    Takes the basis vector along the smallest component of ``v`` and removes
    its projection onto ``v``.
    """
    u = _unit(v, "v")
    e = np.zeros(3)
    e[int(np.argmin(np.abs(u)))] = 1.0
    p = e - np.dot(e, u) * u
    return p / np.linalg.norm(p)


def axis_angle_between(v1, v2) -> Rotation:
    """Shortest-arc rotation taking the direction of ``v1`` onto that of ``v2``."""
    a = _unit(v1, "v1")
    b = _unit(v2, "v2")
    cross = np.cross(a, b)
    cn = np.linalg.norm(cross)
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if cn < _EPS:
        if dot > 0.0:
            return Rotation.identity()
        return Rotation.from_axis_angle(np.pi * perpendicular_axis(a))
    # atan2 is arccos(dot) evaluated without the loss of precision near 0 and pi
    angle = np.arctan2(cn, dot)
    return Rotation.from_axis_angle(cross / cn * angle)


def rodrigues_rotate(r: Rotation, v) -> np.ndarray:
    """Rotate ``v`` with the Rodrigues formula about ``r``'s axis."""
    v = np.asarray(v, dtype=float)
    rv = r.as_axis_angle()
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        return v + np.cross(rv, v)
    k = rv / angle
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(k, v) * s + np.outer(v @ k, k).reshape(v.shape) * (1.0 - c)


def swing_twist_decompose(r: Rotation, axis) -> tuple[Rotation, Rotation]:
    """Split ``r`` into ``swing * twist`` where ``twist`` rotates about ``axis``.

    The twist is applied first, so ``compose(swing, twist)`` reproduces ``r``
    and ``swing`` is the shortest arc from ``axis`` to ``r.apply(axis)``.
    """
    a = np.asarray(axis, dtype=float).reshape(3)
    if abs(np.linalg.norm(a) - 1.0) > 1e-6:
        raise DegenerateInput(f"twist axis must be unit length, got norm {np.linalg.norm(a):.6g}")
    q = r.quat
    proj = np.dot(q[1:], a) * a
    tq = np.concatenate(([q[0]], proj))
    if np.linalg.norm(tq) < 1e-12:
        # r is a half-turn about an axis orthogonal to `axis`
        twist = Rotation.identity()
    else:
        twist = Rotation(tq)
    swing = r * twist.inverse()
    return swing, twist


def weighted_kabsch(src, dst, weights) -> Rotation:
    """Rotation minimising ``sum_i w_i |R (src_i - c_src) - (dst_i - c_dst)|^2``.

    Both sets are centred on their weighted centroids.  A reflection in the
    SVD solution is corrected by flipping the singular vector paired with the
    smallest singular value.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape or len(w) != len(src):
        raise DegenerateInput(
            f"mismatched inputs: src {src.shape}, dst {dst.shape}, weights {w.shape}")
    if len(src) < 2:
        raise DegenerateInput("weighted_kabsch needs at least 2 points")
    if np.any(w < 0):
        raise DegenerateInput("weights must be non-negative")
    total = w.sum()
    if total < _EPS:
        raise DegenerateInput("sum of weights is ~0")
    c_src = w @ src / total
    c_dst = w @ dst / total
    H = (src - c_src).T @ (w[:, None] * (dst - c_dst))
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Rotation.from_matrix(R)


def _check_pairs(src, dst, minimum=2):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise DegenerateInput(f"mismatched point sets: {src.shape} vs {dst.shape}")
    if len(src) < minimum:
        raise DegenerateInput(f"need at least {minimum} points, got {len(src)}")
    return src, dst


def fit_scale_translation(src, dst) -> tuple[float, np.ndarray]:
    """Least-squares ``s, t`` for ``s * src + t ~ dst`` (no rotation)."""
    src, dst = _check_pairs(src, dst)
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    a = src - c_src
    den = float(np.sum(a * a))
    if den < 1e-18:
        raise DegenerateInput("all source points coincide")
    s = float(np.sum(a * (dst - c_dst))) / den
    if not s > 0.0:
        raise DegenerateInput(f"least-squares scale is not positive ({s:.3g})")
    return s, c_dst - s * c_src


def procrustes_align(src, dst) -> tuple[Rotation, float, np.ndarray]:
    """Similarity transform ``(R, s, t)`` minimising ``|s R src + t - dst|^2``."""
    src, dst = _check_pairs(src, dst)
    rot = weighted_kabsch(src, dst, np.ones(len(src)))
    rotated = rot.apply(src)
    s, t = fit_scale_translation(rotated, dst)
    return rot, s, t


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def perspective_project(K: CameraIntrinsics, x) -> np.ndarray:
    """Pinhole projection of a point ``(3,)`` or points ``(N, 3)`` to pixels."""
    x = np.asarray(x, dtype=float)
    z = x[..., 2]
    if np.any(~(z > 1e-6)):
        raise BehindCamera("point at or behind the camera plane (z <= 1e-6)")
    u = K.fx * x[..., 0] / z + K.cx
    v = K.fy * x[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


# Batched helpers used on the optimisation path.

def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(rotvecs: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a stack ``(N, 3)`` of axis-angle vectors."""
    rv = np.asarray(rotvecs, dtype=float)
    theta = np.linalg.norm(rv, axis=-1)[..., None, None]
    K = skew(rv)
    K2 = K @ K
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3) + a * K + b * K2


def axis_angle_matrix_jacobian(rotvecs: np.ndarray) -> np.ndarray:
    """Derivatives ``dR/d(rotvec_i)`` with shape ``(N, 3, 3, 3)``, index i second.

    Uses the closed form of Gallego and Yezzi (2015); a second-order series is
    used below 1e-6 rad.
    """
    rv = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    R = axis_angle_to_matrix(rv)
    Kw = skew(rv)
    theta2 = np.sum(rv * rv, axis=1)
    basis = skew(np.eye(3))[None]                                   # (1, 3, 3, 3)
    series = basis + 0.5 * (basis @ Kw[:, None] + Kw[:, None] @ basis)
    cols = np.swapaxes(np.eye(3) - R, 1, 2)                         # row i = (I - R) e_i
    m = rv[:, :, None, None] * Kw[:, None] + skew(np.cross(rv[:, None, :], cols))
    safe = np.where(theta2 < 1e-12, 1.0, theta2)[:, None, None, None]
    exact = m @ R[:, None] / safe
    return np.where((theta2 < 1e-12)[:, None, None, None], series, exact)
