"""Rigid-body algebra on SE(3).

Poses are immutable values holding a unit quaternion ``(w, x, y, z)`` and a
translation. Tangent vectors (twists) are ordered ``(omega, v)``: rotation
first (radians), translation second (meters).

Conventions
-----------
* ``compose(a, b)`` is the group product ``a * b``.
* ``relative(a, b)`` is ``a^-1 * b``; it maps points expressed in frame ``b``
  into frame ``a``.
* Perturbations used by the optimizer are right-multiplicative,
  ``T <- T * exp(xi)``.
"""

from __future__ import annotations

import math

import numpy as np

_RENORM_TOL = 1e-12
_ORTHO_TOL = 1e-6


class NotOrthonormal(ValueError):
    pass


class DegenerateCorrespondences(ValueError):
    """Point pairs do not constrain a rigid transform (collinear or coincident)."""


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(W):
    return np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]]) * 0.5


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method: branch on the largest of trace and diagonal entries."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _normalize_quat(q):
    q = np.asarray(q, dtype=float).reshape(4)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion must be finite and non-zero")
    if abs(n - 1.0) > _RENORM_TOL:
        q = q / n
    return q


# ---------------------------------------------------------------------------
# SO(3)


def _series(theta2, coeffs):
    out = 0.0
    p = 1.0
    for c in coeffs:
        out += c * p
        p *= theta2
    return out


def so3_exp_quat(omega):
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    half = 0.5 * theta
    if theta < 1e-4:
        # sin(theta/2)/theta
        k = 0.5 - theta * theta / 48.0
    else:
        k = math.sin(half) / theta
    return np.array([math.cos(half), *(k * omega)])


def so3_exp(omega):
    return quat_to_matrix(so3_exp_quat(omega))


def quat_log(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = math.sqrt(float(v @ v))
    if n == 0.0:
        return np.zeros(3)
    return (2.0 * math.atan2(n, q[0]) / n) * v


def so3_log(R):
    """Rotation vector of ``R``.

    Near an angle of pi, ``R - R^T`` vanishes and the axis is recovered from
    the column of ``R + I`` with the largest diagonal entry instead.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(c)
    if theta < 1e-6:
        return vee(R)
    if math.pi - theta > 1e-6:
        return vee(R) * (theta / math.sin(theta))
    B = R + np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(B[k, k] * 2.0)
    axis /= np.linalg.norm(axis)
    # resolve the sign with the (tiny) skew part when it is informative
    s = vee(R)
    if s @ axis < 0:
        axis = -axis
    return axis * theta


def so3_left_jacobian(omega):
    omega = np.asarray(omega, dtype=float)
    t2 = float(omega @ omega)
    W = skew(omega)
    if t2 < 1e-4:
        a = _series(t2, (1 / 2, -1 / 24, 1 / 720, -1 / 40320))
        b = _series(t2, (1 / 6, -1 / 120, 1 / 5040, -1 / 362880))
    else:
        t = math.sqrt(t2)
        a = (1.0 - math.cos(t)) / t2
        b = (t - math.sin(t)) / (t2 * t)
    return np.eye(3) + a * W + b * (W @ W)


def so3_left_jacobian_inv(omega):
    omega = np.asarray(omega, dtype=float)
    t2 = float(omega @ omega)
    W = skew(omega)
    if t2 < 1e-4:
        c = _series(t2, (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600))
    else:
        t = math.sqrt(t2)
        c = 1.0 / t2 - 1.0 / (2.0 * t * math.tan(0.5 * t))
    return np.eye(3) - 0.5 * W + c * (W @ W)


# ---------------------------------------------------------------------------
# SE(3)


class Pose:
    """Immutable rigid transform (unit quaternion + translation)."""

    __slots__ = ("_q", "_t", "_R")

    def __init__(self, quat=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = _normalize_quat(quat)
        t = np.array(translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.flags.writeable = False
        t.flags.writeable = False
        R = quat_to_matrix(q)
        R.flags.writeable = False
        object.__setattr__(self, "_q", q)
        object.__setattr__(self, "_t", t)
        object.__setattr__(self, "_R", R)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        R = np.asarray(R, dtype=float)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ORTHO_TOL or np.linalg.det(R) < 0:
            raise NotOrthonormal(f"rotation is not orthonormal (err={err:.3g})")
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @property
    def quat(self):
        return self._q

    @property
    def rotation(self):
        return self._R

    @property
    def translation(self):
        return self._t

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self._R
        M[:3, 3] = self._t
        return M

    def inverse(self):
        q = self._q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(self._R.T @ self._t))

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        return NotImplemented

    def apply(self, points):
        """Transform an (N,3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=float)
        return p @ self._R.T + self._t

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=float) @ self._R.T

    def __repr__(self):
        q = np.round(self._q, 6).tolist()
        t = np.round(self._t, 6).tolist()
        return f"Pose(quat={q}, translation={t})"

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self._t, other._t) and (
            np.array_equal(self._q, other._q) or np.array_equal(self._q, -other._q)
        )

    def __hash__(self):
        return hash((self._q.tobytes(), self._t.tobytes()))

    def __reduce__(self):
        return (Pose, (self._q.copy(), self._t.copy()))


def compose(a: Pose, b: Pose) -> Pose:
    q = quat_mul(a.quat, b.quat)
    return Pose(q, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def relative(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``; the pose of ``b`` seen from ``a``."""
    qa_inv = a.quat * np.array([1.0, -1.0, -1.0, -1.0])
    q = quat_mul(qa_inv, b.quat)
    return Pose(q, a.rotation.T @ (b.translation - a.translation))


def exp_map(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp_quat(omega), so3_left_jacobian(omega) @ v)


def log_map(T: Pose) -> np.ndarray:
    omega = quat_log(T.quat)
    v = so3_left_jacobian_inv(omega) @ T.translation
    return np.concatenate([omega, v])


def rot_x(angle):
    return Pose(so3_exp_quat([angle, 0.0, 0.0]))


def rot_y(angle):
    return Pose(so3_exp_quat([0.0, angle, 0.0]))


def rot_z(angle):
    return Pose(so3_exp_quat([0.0, 0.0, angle]))


def from_xyz_yaw(x, y, z, yaw):
    return Pose(so3_exp_quat([0.0, 0.0, yaw]), (x, y, z))


def yaw_of(T: Pose) -> float:
    R = T.rotation
    return math.atan2(R[1, 0], R[0, 0])


def rotation_angle(T: Pose) -> float:
    return float(np.linalg.norm(quat_log(T.quat)))


# ---------------------------------------------------------------------------
# Jacobians on SE(3), twist order (omega, v)


def adjoint(T: Pose) -> np.ndarray:
    R = T.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(T.translation) @ R
    return A


def _q_matrix(omega, v):
    t2 = float(omega @ omega)
    P = skew(omega)
    V = skew(v)
    PV = P @ V
    VP = V @ P
    PVP = PV @ P
    if t2 < 1e-2:
        c1 = _series(t2, (1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800))
        c2 = _series(t2, (1 / 24, -1 / 720, 1 / 40320, -1 / 3628800, 1 / 479001600))
        c3 = _series(t2, (1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160))
    else:
        t = math.sqrt(t2)
        s, c = math.sin(t), math.cos(t)
        c1 = (t - s) / (t2 * t)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t)
    return (
        0.5 * V
        + c1 * (PV + VP + PVP)
        + c2 * (P @ PV + VP @ P - 3.0 * PVP)
        + c3 * (PVP @ P + P @ PVP)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    J = so3_left_jacobian(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _q_matrix(omega, v)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ _q_matrix(omega, v) @ Ji
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


# ---------------------------------------------------------------------------
# closed-form alignment


def svd_align(src, dst) -> Pose:
    """Least-squares rigid transform ``T`` with ``T * src_k ~= dst_k``.

    Unweighted centroids; the cross-covariance is decomposed as ``U S V^T``
    and ``R = V U^T``, with the last singular direction flipped whenever that
    product would be a reflection.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"length mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateCorrespondences("need at least 3 point pairs")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    A = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(A)
    scale = max(np.abs(src - cs).max(), np.abs(dst - cd).max(), 1e-300)
    if S[0] <= 1e-24 * scale * scale or S[1] <= 1e-10 * S[0]:
        raise DegenerateCorrespondences("correspondences are collinear or coincident")
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = cd - R @ cs
    return Pose(matrix_to_quat(R), t)


def random_pose(rng, max_angle=math.pi, max_translation=10.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return Pose(so3_exp_quat(axis * angle), t)
