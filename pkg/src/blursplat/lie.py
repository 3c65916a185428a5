"""SO(3)/SE(3) operations on unit quaternions and 6-vector tangents.

Conventions
-----------
* Quaternions are scalar-first ``(w, x, y, z)``.
* Poses are camera-to-world: ``p_world = R @ p_cam + t``.
* Tangents are ordered ``(omega, nu)``: rotation first, then translation.
* Perturbations are left-multiplied: ``T' = exp(xi) @ T``.

All functions broadcast over leading batch dimensions, so ``so3_exp`` accepts
``(3,)`` or ``(N, 3)`` and so on.

Renormalization policy: every constructor and every composition renormalizes
the resulting quaternion, so norm drift cannot accumulate across long chains.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
# |w| below this is treated as a rotation by exactly pi
PI_DEGENERACY = 1e-12


class DegenerateRotationWarning(RuntimeWarning):
    """Raised (as a warning) when a log is taken of a rotation by pi."""


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite components")


def _normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# quaternion primitives
# --------------------------------------------------------------------------


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, single 3x3 matrix."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return _normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


# --------------------------------------------------------------------------
# SO(3)
# --------------------------------------------------------------------------


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation vector -> unit quaternion.

    Below ``SMALL_ANGLE`` the half-angle sin/cos are replaced by their
    4th-order Taylor series.
    """
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega, "omega")
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half_sinc = np.where(
        small,
        0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0,
        np.sin(0.5 * safe) / safe,
    )
    w = np.where(small, 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0, np.cos(0.5 * safe))
    q = np.concatenate([w[..., None], half_sinc[..., None] * omega], axis=-1)
    return _normalize(q)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation vector with norm in [0, pi].

    A rotation by exactly pi has two valid logs; one is returned and a
    :class:`DegenerateRotationWarning` is emitted.
    """
    q = np.asarray(q, dtype=float)
    _check_finite(q, "quaternion")
    # double cover: pick w >= 0 so the angle lands in [0, pi]
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1)
    if np.any(w < PI_DEGENERACY):
        warnings.warn("log of a rotation by pi is not unique", DegenerateRotationWarning, stacklevel=2)
    small = vn < SMALL_ANGLE
    safe_vn = np.where(small, 1.0, vn)
    safe_w = np.where(small, w, 1.0)
    x2 = (vn / safe_w) ** 2
    scale = np.where(
        small,
        (2.0 / safe_w) * (1.0 - x2 / 3.0 + x2 * x2 / 5.0),
        2.0 * np.arctan2(vn, w) / safe_vn,
    )
    return scale[..., None] * v


def is_pi_rotation(q: np.ndarray) -> bool:
    return bool(np.any(np.abs(np.asarray(q, dtype=float)[..., 0]) < PI_DEGENERACY))


def _so3_coeffs(theta2: np.ndarray):
    """Coefficients a=(1-cos)/theta^2 and b=(theta-sin)/theta^3 with Taylor branches."""
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    s = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0, (1.0 - np.cos(s)) / (s * s))
    b = np.where(
        small,
        1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        (s - np.sin(s)) / (s * s * s),
    )
    return a, b


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)
    a, b = _so3_coeffs(theta2)
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    s = np.where(small, 1.0, theta)
    # (1 - (theta/2) cot(theta/2)) / theta^2, finite at theta = pi
    half = 0.5 * s
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (s * s),
    )
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


# --------------------------------------------------------------------------
# SE(3) on raw arrays: (q, t) pairs and 6-vector tangents
# --------------------------------------------------------------------------


def se3_exp_arrays(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = np.asarray(xi, dtype=float)
    _check_finite(xi, "tangent")
    omega, nu = xi[..., :3], xi[..., 3:]
    q = so3_exp(omega)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(omega), nu)
    return q, t


def se3_log_arrays(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    omega = so3_log(q)
    nu = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(omega), np.asarray(t, dtype=float))
    return np.concatenate([omega, nu], axis=-1)


def _se3_Q(omega: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian (Barfoot's Q)."""
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    P = skew(omega)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    if theta < SMALL_ANGLE:
        c1 = 1.0 / 6.0 - theta2 / 120.0
        c2 = 1.0 / 24.0 - theta2 / 720.0
        c3 = 1.0 / 120.0 - theta2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = -(1.0 - theta2 / 2.0 - c) / theta**4
        c3 = -0.5 * ((1.0 - theta2 / 2.0 - c) / theta**4 - 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    return 0.5 * Rh + c1 * (PR + RP + PRP) + c2 * (P @ PR + RP @ P - 3.0 * PRP) + c3 * (PRP @ P + P @ PRP)


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian for (omega, nu) ordering."""
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_Q(xi[:3], xi[3:])
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ _se3_Q(xi[:3], xi[3:]) @ Ji
    return out


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------


class Rotation:
    """Unit quaternion wrapper; the stored quaternion is always normalized."""

    __slots__ = ("q",)

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        q = np.asarray(q, dtype=float).reshape(4)
        _check_finite(q, "quaternion")
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        self.q = q / n

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_rotvec(cls, omega) -> Rotation:
        return cls(so3_exp(omega))

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(matrix_to_quat(R))

    def log(self) -> np.ndarray:
        return so3_log(self.q)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> Rotation:
        return Rotation(quat_conjugate(self.q))

    def canonical(self) -> np.ndarray:
        return -self.q if self.q[0] < 0 else self.q.copy()

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(quat_multiply(self.q, other.q))
        return quat_rotate(self.q, np.asarray(other, dtype=float))

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def __repr__(self) -> str:
        return f"Rotation({np.array2string(self.q, precision=6)})"


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform, camera-to-world when used as a camera pose."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        _check_finite(t, "translation")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(Rotation(), np.zeros(3))

    @classmethod
    def from_arrays(cls, q, t) -> PoseSE3:
        return cls(Rotation(q), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, M) -> PoseSE3:
        M = np.asarray(M, dtype=float)
        return cls(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.matrix()
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> PoseSE3:
        rinv = self.rotation.inverse()
        return PoseSE3(rinv, -(rinv @ self.translation))

    def __matmul__(self, other):
        if isinstance(other, PoseSE3):
            return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)
        return self.rotation @ np.asarray(other, dtype=float) + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint, (omega, nu) ordering: Ad = [[R, 0], [t^R, R]]."""
        R = self.rotation.matrix()
        out = np.zeros((6, 6))
        out[:3, :3] = R
        out[3:, 3:] = R
        out[3:, :3] = skew(self.translation) @ R
        return out

    def perturb(self, xi) -> PoseSE3:
        """Left perturbation ``exp(xi) @ self``."""
        return se3_exp(xi) @ self

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.rotation.canonical()], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_json(cls, d: dict) -> PoseSE3:
        return cls.from_arrays(d["q"], d["t"])

    def allclose(self, other: PoseSE3, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation.canonical(), other.rotation.canonical(), atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        return f"PoseSE3(q={np.array2string(self.rotation.q, precision=6)}, t={np.array2string(self.translation, precision=6)})"


def se3_exp(xi) -> PoseSE3:
    q, t = se3_exp_arrays(np.asarray(xi, dtype=float).reshape(6))
    return PoseSE3(Rotation(q), t)


def se3_log(T: PoseSE3) -> np.ndarray:
    return se3_log_arrays(T.rotation.q, T.translation)


def pose_distance(a: PoseSE3, b: PoseSE3) -> float:
    """Geodesic distance on SO(3) x R^3: sqrt(angle^2 + |dt|^2)."""
    ang = (a.rotation.inverse() @ b.rotation).angle()
    return math.hypot(ang, float(np.linalg.norm(a.translation - b.translation)))


def interpolate_pose(T_start: PoseSE3, T_end: PoseSE3, u: float, coupled: bool = True) -> PoseSE3:
    """Geodesic ``T_start @ exp(u * log(T_start^-1 @ T_end))``.

    ``coupled=False`` interpolates rotation and translation separately
    (SO(3) x R^3) instead of along the SE(3) screw.
    """
    rel = T_start.inverse() @ T_end
    if is_pi_rotation(rel.rotation.q):
        warnings.warn("relative rotation is pi; interpolation axis is arbitrary", DegenerateRotationWarning, stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRotationWarning)
        if coupled:
            return T_start @ se3_exp(u * se3_log(rel))
        rot = T_start.rotation @ Rotation(so3_exp(u * rel.rotation.log()))
        return PoseSE3(rot, (1.0 - u) * T_start.translation + u * T_end.translation)


def interpolation_jacobians(T_start: PoseSE3, T_end: PoseSE3, u: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the interpolated pose w.r.t. left perturbations of both endpoints.

    Writing ``T_u = exp(u E) T_start`` with ``E = log(T_end T_start^-1)``:

        d xi_u / d xi_end   = u J_l(uE) J_l(E)^-1
        d xi_u / d xi_start = Ad(exp(uE)) - u J_l(uE) J_r(E)^-1

    with ``J_r(E) = J_l(-E)``.
    """
    E = se3_log(T_end @ T_start.inverse())
    Jl_uE = se3_left_jacobian(u * E)
    J_end = u * Jl_uE @ se3_left_jacobian_inv(E)
    J_start = se3_exp(u * E).adjoint() - u * Jl_uE @ se3_left_jacobian_inv(-E)
    return J_start, J_end
